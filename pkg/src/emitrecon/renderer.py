"""Discretized SDF volume rendering and light-transport estimates.

Ray convention: ``dirs`` point from the scene toward the camera, so a ray
with origin ``c`` visits ``c - t * dirs``.  Any object exposing the scene
protocol of :class:`~emitrecon.fields.FieldSet` can be rendered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .brdf import disney_brdf
from .colorspace import tau
from .fields import DegenerateNormalError

PRIMARY_SAMPLES = 100
SECONDARY_SAMPLES = 64
HEMISPHERE_SAMPLES = 256
SELF_OFFSET = 1e-3
ALPHA_MAX = 1.0 - 1e-6
TWO_PI = 2.0 * math.pi

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


class CounterSampler:
    """Stateless uniform generator keyed by integer counters.

    The same (seed, stream, keys...) always maps to the same numbers, which
    makes Monte Carlo estimates independent of batching and worker order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def uniform(self, stream: int, *keys, dtype=torch.float32) -> torch.Tensor:
        arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64) for k in keys])
        h = _splitmix64(np.full(arrays[0].shape, np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)))
        h = _splitmix64(h ^ np.uint64(stream))
        for a in arrays:
            h = _splitmix64(h ^ a.astype(np.uint64))
        u = (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return torch.as_tensor(u, dtype=dtype)


@dataclass
class RayBatch:
    origins: torch.Tensor  # (R, 3)
    dirs: torch.Tensor     # (R, 3) unit, toward the camera
    near: torch.Tensor     # (R,)
    far: torch.Tensor      # (R,)
    on: torch.Tensor       # (R,) bool
    ids: torch.Tensor      # (R,) int64

    def __len__(self) -> int:
        return self.origins.shape[0]

    def select(self, sel) -> "RayBatch":
        return RayBatch(self.origins[sel], self.dirs[sel], self.near[sel], self.far[sel],
                        self.on[sel], self.ids[sel])


def bbox_interval(origins, march_dirs, bbox_min, bbox_max):
    """Entry/exit distances of ``origins + t * march_dirs`` through the box."""
    safe = torch.where(march_dirs.abs() < 1e-12, torch.full_like(march_dirs, 1e-12), march_dirs)
    t0 = (bbox_min - origins) / safe
    t1 = (bbox_max - origins) / safe
    near = torch.minimum(t0, t1).amax(-1).clamp_min(0.0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far


def make_rays(origins, dirs, bbox, *, on=None, ids=None) -> RayBatch:
    """Rays clipped to the bounding box; ``dirs`` point toward the camera."""
    origins = torch.as_tensor(origins)
    dirs = torch.as_tensor(dirs, dtype=origins.dtype)
    near, far = bbox_interval(origins, -dirs, bbox[0], bbox[1])
    far = torch.maximum(far, near)
    n = origins.shape[0]
    if on is None:
        on = torch.ones(n, dtype=torch.bool)
    if ids is None:
        ids = torch.arange(n, dtype=torch.int64)
    return RayBatch(origins, dirs, near, far, torch.as_tensor(on, dtype=torch.bool),
                    torch.as_tensor(ids, dtype=torch.int64))


@dataclass
class RayMarch:
    t: torch.Tensor       # (R, N)
    x: torch.Tensor       # (R, N, 3)
    dirs: torch.Tensor    # (R, 3), toward the camera
    alpha: torch.Tensor   # (R, N)
    trans: torch.Tensor   # (R, N), T_i
    weights: torch.Tensor  # (R, N)
    t_end: torch.Tensor   # (R,)
    on: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def alpha_from_sdf(f_i, f_next, s):
    """Discrete opacity max((Phi(f_i) - Phi(f_next)) / Phi(f_i), 0), capped below 1."""
    f_i = torch.as_tensor(f_i, dtype=torch.float64) if not torch.is_tensor(f_i) else f_i
    f_next = torch.as_tensor(f_next, dtype=f_i.dtype) if not torch.is_tensor(f_next) else f_next
    s = torch.as_tensor(s, dtype=f_i.dtype)
    if bool((s <= 0).any()):
        raise ValueError("sharpness must be positive")
    # 1 - Phi(f_next)/Phi(f_i), evaluated in log space to survive large s
    a = -torch.expm1(F.logsigmoid(s * f_next) - F.logsigmoid(s * f_i))
    return a.clamp(0.0, ALPHA_MAX)


def _composite_weights(alpha):
    one_minus = 1.0 - alpha
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[..., :1]), one_minus], -1), -1)
    return trans[..., :-1], alpha * trans[..., :-1], trans[..., -1]


def sample_t(rays: RayBatch, n_samples: int, *, sampler: CounterSampler | None = None,
             step: int = 0, stream: int = 1, jitter: bool = True) -> torch.Tensor:
    """n_samples + 1 stratified distances over [near, far]."""
    n = n_samples + 1
    dtype = rays.origins.dtype
    k = torch.arange(n, dtype=dtype)
    if jitter:
        sampler = sampler or CounterSampler()
        u = sampler.uniform(stream, rays.ids.numpy()[:, None], np.arange(n)[None, :], step, dtype=dtype)
    else:
        u = torch.full((len(rays), n), 0.5, dtype=dtype)
    frac = (k + u) / n
    return rays.near[:, None] + frac * (rays.far - rays.near)[:, None]


def march(rays: RayBatch, fields, n_samples: int = PRIMARY_SAMPLES, *, sampler=None,
          step: int = 0, jitter: bool = True, t_vals: torch.Tensor | None = None) -> RayMarch:
    if t_vals is None:
        t_vals = sample_t(rays, n_samples, sampler=sampler, step=step, jitter=jitter)
    x_all = rays.origins[:, None, :] - t_vals[..., None] * rays.dirs[:, None, :]
    f = fields.sdf(x_all)
    alpha = alpha_from_sdf(f[:, :-1], f[:, 1:], fields.sharpness)
    alpha = alpha * (rays.far > rays.near).to(alpha.dtype)[:, None]
    trans, w, t_end = _composite_weights(alpha)
    return RayMarch(t=t_vals[:, :-1], x=x_all[:, :-1], dirs=rays.dirs, alpha=alpha, trans=trans,
                    weights=w, t_end=t_end, on=rays.on)


def outgoing_radiance(m: RayMarch, fields) -> torch.Tensor:
    """Per-sample L_o = L_o^S + I * L_o^E along the primary rays."""
    wo = m.dirs[:, None, :].expand_as(m.x)
    lo = fields.radiance(m.x, wo, "S")
    on = m.on if m.on is not None else torch.ones(m.x.shape[0], dtype=torch.bool)
    if bool(on.any()):
        le = fields.radiance(m.x[on], wo[on], "E")
        lo = lo.index_put((on.nonzero()[:, 0],), lo[on] + le)
    return lo


def composite_color(m: RayMarch, fields, mode: str = "hdr", radiance: torch.Tensor | None = None,
                    background: bool = False):
    """Composited ray color.

    With ``background=True`` the environment seen past the last sample,
    weighted by the residual transmittance, is added (in tone-mapped mode it
    goes through the tone-mapper like every other radiance value).
    """
    if mode not in ("hdr", "gamma", "tonemapped"):
        raise ValueError(f"unknown composite mode {mode!r}")
    lo = outgoing_radiance(m, fields) if radiance is None else radiance
    bg = fields.env(-m.dirs) if background else None
    if mode == "tonemapped":
        out = (m.weights[..., None] * fields.tonemap(lo)).sum(-2)
        if bg is not None:
            out = out + m.t_end[..., None] * fields.tonemap(bg)
        return out
    hdr = (m.weights[..., None] * lo).sum(-2)
    if bg is not None:
        hdr = hdr + m.t_end[..., None] * bg
    return tau(hdr) if mode == "gamma" else hdr


def expected_surface_point(m: RayMarch) -> torch.Tensor:
    return (m.weights[..., None] * m.x).sum(-2)


def expected_emission_strength(m: RayMarch, fields) -> torch.Tensor:
    e = fields.emission(m.x)
    return (m.weights[..., None] * e).sum(-2).amax(-1)


# --- secondary rays ----------------------------------------------------------

def orthonormal_basis(n: torch.Tensor):
    """Tangent frame (t, b) for unit normals n (branchless construction)."""
    sign = torch.where(n[..., 2] >= 0, torch.ones_like(n[..., 2]), -torch.ones_like(n[..., 2]))
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = torch.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], -1)
    bt = torch.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], -1)
    return t, bt


def uniform_hemisphere(n: torch.Tensor, u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
    """Directions uniform on the hemisphere about n (pdf 1 / 2pi).

    Shapes: n (P, 3), u1/u2 (P, M) -> (P, M, 3).
    """
    z = u1
    r = torch.sqrt((1.0 - z * z).clamp_min(0.0))
    phi = TWO_PI * u2
    t, b = orthonormal_basis(n)
    return (r * torch.cos(phi))[..., None] * t[:, None] + (r * torch.sin(phi))[..., None] * b[:, None] \
        + z[..., None] * n[:, None]


def _secondary(x, wi, fields, which, n_samples, eps, sampler, step, keys, jitter=True,
               min_weight=0.0):
    """March from x along wi; returns (sum_j w_j L_o^{which}(x_j, -wi) per key, T_end).

    With ``min_weight > 0`` the radiance fields are only queried at samples
    whose weight reaches it (the others contribute zero).
    """
    shape = x.shape[:-1]
    xf = x.reshape(-1, 3)
    wf = wi.reshape(-1, 3)
    origins = xf + eps * wf
    lo, hi = fields.bbox
    near, far = bbox_interval(origins, wf, lo, hi)
    near = torch.zeros_like(near)
    far = far.clamp_min(0.0)
    ids = torch.as_tensor(np.asarray(keys, dtype=np.int64).reshape(-1))
    rays = RayBatch(origins, -wf, near, far, torch.zeros(len(ids), dtype=torch.bool), ids)
    t = sample_t(rays, n_samples, sampler=sampler, step=step, stream=2, jitter=jitter)
    m = march(rays, fields, n_samples, t_vals=t)
    wo = (-wf)[:, None, :].expand_as(m.x)
    sel = (m.weights >= min_weight).nonzero(as_tuple=True) if min_weight > 0 else None
    out = {}
    for w in which:
        if sel is None:
            rad = fields.radiance(m.x, wo, w)
        else:
            rad = torch.zeros_like(m.x).index_put(sel, fields.radiance(m.x[sel], wo[sel], w))
        out[w] = (m.weights[..., None] * rad).sum(-2).reshape(*shape, 3)
    return out, m.t_end.reshape(shape)


def surface_normals(x, fields, strict: bool = True):
    _, g = fields.sdf_with_gradient(x)
    norm = g.norm(dim=-1)
    valid = norm >= 1e-8
    if strict and not bool(valid.all()):
        raise DegenerateNormalError("SDF gradient vanishes at a shading point")
    n = g / torch.where(valid, norm, torch.ones_like(norm))[..., None]
    return n, valid


@dataclass
class Reflection:
    env_direct: torch.Tensor    # (P, 3)  integral of S V R
    env_indirect: torch.Tensor  # (P, 3)  integral of composited L_o^S R
    emission: torch.Tensor      # (P, 3)  integral of composited L_o^E R
    normals: torch.Tensor
    valid: torch.Tensor


def reflection_integrals(x, wo, fields, n_dirs: int = HEMISPHERE_SAMPLES, *,
                         n_samples: int = SECONDARY_SAMPLES, eps: float = SELF_OFFSET,
                         sampler: CounterSampler | None = None, step: int = 0,
                         point_keys=None, strict: bool = True, chunk: int = 64,
                         want=("S", "E"), min_weight: float = 0.0) -> Reflection:
    """Uniform-hemisphere Monte Carlo estimates of the three reflection terms.

    Each term is (1/M) sum_j [incident part](w_j) R(x, wo, w_j) / (1 / 2pi).
    The secondary marches are shared by all terms.
    """
    sampler = sampler or CounterSampler()
    p = x.shape[0]
    if point_keys is None:
        point_keys = np.arange(p)
    point_keys = np.asarray(point_keys, dtype=np.int64)
    n, valid = surface_normals(x, fields, strict=strict)
    base, rough, metal = fields.brdf(x)
    zero = torch.zeros(p, 3, dtype=x.dtype)
    acc = {"direct": zero, "S": zero, "E": zero}
    for start in range(0, n_dirs, chunk):
        j = np.arange(start, min(n_dirs, start + chunk))
        u1 = sampler.uniform(3, point_keys[:, None], j[None, :], step, dtype=x.dtype)
        u2 = sampler.uniform(4, point_keys[:, None], j[None, :], step, dtype=x.dtype)
        wi = uniform_hemisphere(n, u1, u2)  # (P, m, 3)
        m = wi.shape[1]
        keys = point_keys[:, None] * np.int64(1 << 20) + j[None, :]
        lit, t_end = _secondary(x[:, None, :].expand(p, m, 3), wi, fields, [w for w in want],
                                n_samples, eps, sampler, step, keys, min_weight=min_weight)
        r = disney_brdf(n[:, None, :].expand(p, m, 3), wo[:, None, :].expand(p, m, 3), wi,
                        base[:, None, :].expand(p, m, 3), rough[:, None].expand(p, m),
                        metal[:, None].expand(p, m)) * TWO_PI
        if "S" in want:
            acc["direct"] = acc["direct"] + (fields.env(wi) * t_end[..., None] * r).sum(1)
            acc["S"] = acc["S"] + (lit["S"] * r).sum(1)
        if "E" in want:
            acc["E"] = acc["E"] + (lit["E"] * r).sum(1)
    mask = valid.to(x.dtype)[:, None] / n_dirs
    return Reflection(acc["direct"] * mask, acc["S"] * mask, acc["E"] * mask, n, valid)


def incident_radiance(x, wi, fields, which: str, *, n_samples: int = SECONDARY_SAMPLES,
                      eps: float = SELF_OFFSET, sampler=None, step: int = 0, keys=None,
                      jitter: bool = True):
    """Composited L_o^{which} seen from x along wi, plus S(wi) V for which='S'."""
    if which not in ("S", "E"):
        raise ValueError("which must be 'S' or 'E'")
    if keys is None:
        keys = np.arange(x.shape[0])
    lit, t_end = _secondary(x, wi, fields, [which], n_samples, eps, sampler or CounterSampler(),
                            step, keys, jitter=jitter)
    out = lit[which]
    if which == "S":
        out = out + fields.env(wi) * t_end[..., None]
    return out


def lhat_S(x, wo, fields, n_dirs: int = HEMISPHERE_SAMPLES, **kw):
    r = reflection_integrals(x, wo, fields, n_dirs, want=("S",), **kw)
    return r.env_direct + r.env_indirect


def lhat_E(x, wo, fields, n_dirs: int = HEMISPHERE_SAMPLES, variant: str = "full", **kw):
    r = reflection_integrals(x, wo, fields, n_dirs, want=("E",), **kw)
    return lhat_E_from(r, fields.emission(x), variant)


def lhat_E_from(r: Reflection, emission, variant: str):
    if variant == "full":
        return emission + r.emission
    if variant == "certain":
        return r.emission
    if variant == "uncertain":
        return emission + r.emission.detach()
    raise ValueError(f"unknown variant {variant!r}")


def active_samples(m: RayMarch, min_weight: float):
    """(ray index, sample index) pairs whose weight reaches ``min_weight``."""
    sel = (m.weights >= min_weight).nonzero()
    return sel[:, 0], sel[:, 1]


def decompose_illumination(rays: RayBatch, fields, n_dirs: int = HEMISPHERE_SAMPLES, *,
                           n_samples: int = PRIMARY_SAMPLES, n_secondary: int = SECONDARY_SAMPLES,
                           sampler=None, step: int = 0, jitter: bool = True,
                           min_weight: float = 1e-4, secondary_min_weight: float = 0.0,
                           emission_fn=None, strict: bool = False):
    """Four composited buffers: env-direct, env-indirect, emission, emission-reflection.

    Shading is restricted to primary samples whose weight reaches
    ``min_weight``.  ``emission_fn`` overrides E(x) on the primary ray.
    """
    sampler = sampler or CounterSampler()
    m = march(rays, fields, n_samples, sampler=sampler, step=step, jitter=jitter)
    ri, si = active_samples(m, min_weight)
    r_count = len(rays)
    dtype = m.x.dtype
    bufs = {k: torch.zeros(r_count, 3, dtype=dtype)
            for k in ("env_direct", "env_indirect", "emission", "emission_reflection")}
    if ri.numel() == 0:
        return bufs
    x = m.x[ri, si]
    wo = rays.dirs[ri]
    w = m.weights[ri, si][:, None]
    keys = rays.ids[ri].numpy() * np.int64(1 << 12) + si.numpy()
    refl = reflection_integrals(x, wo, fields, n_dirs, n_samples=n_secondary, sampler=sampler,
                                step=step, point_keys=keys, strict=strict,
                                min_weight=secondary_min_weight)
    on = rays.on[ri].to(dtype)[:, None]
    emit = (emission_fn or fields.emission)(x)
    bufs["env_direct"] = bufs["env_direct"].index_add(0, ri, w * refl.env_direct)
    bufs["env_indirect"] = bufs["env_indirect"].index_add(0, ri, w * refl.env_indirect)
    bufs["emission"] = bufs["emission"].index_add(0, ri, w * on * emit)
    bufs["emission_reflection"] = bufs["emission_reflection"].index_add(0, ri, w * on * refl.emission)
    return bufs
