"""Loss terms.  Each returns a scalar tensor; gradients come from autograd.

Stop-gradients are expressed with ``detach`` so that the parameters behind
them receive exactly zero gradient from the corresponding term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..renderer import (HEMISPHERE_SAMPLES, SECONDARY_SAMPLES, CounterSampler, RayBatch, RayMarch,
                        composite_color, lhat_E_from, march, outgoing_radiance,
                        reflection_integrals, uniform_hemisphere)


@dataclass
class LossWeights:
    lambda_tau: float = 0.1
    lambda_l: float = 1.0
    lambda_r: float = 0.1
    lambda_supp: float = 0.01
    lambda_smooth: float = 1e-3
    lambda_lts_s: float = 1.0
    lambda_lts_e: float = 1.0
    lambda_mask: float = 1.0
    lambda_eikonal: float = 0.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return x.sum()
    if reduction == "mean":
        return x.sum() / max(x.shape[0], 1)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class TrainBatch:
    rays: RayBatch
    target: torch.Tensor             # (R, 3) LDR pixels in [0, 1]
    alpha: torch.Tensor | None = None  # (R,) coverage, None when unknown


def rendering_loss(batch: TrainBatch, fields, lambda_tau: float = 0.1, *, m: RayMarch | None = None,
                   n_samples: int = 100, sampler=None, step: int = 0, jitter: bool = True,
                   background: bool = True, lambda_mask: float = 1.0, reduction: str = "sum"):
    """||C - C_tonemapped||^2 + lambda_tau ||C - tau(C_hdr)||^2 per ray.

    Rays whose alpha is below 0.5 additionally pull their opacity to zero.
    Returns ``(loss, march)`` so callers can reuse the samples.
    """
    if m is None:
        m = march(batch.rays, fields, n_samples, sampler=sampler, step=step, jitter=jitter)
    lo = outgoing_radiance(m, fields)
    c_tm = composite_color(m, fields, "tonemapped", radiance=lo, background=background)
    per_ray = ((batch.target - c_tm) ** 2).sum(-1)
    if lambda_tau > 0:
        c_tau = composite_color(m, fields, "gamma", radiance=lo, background=background)
        per_ray = per_ray + lambda_tau * ((batch.target - c_tau) ** 2).sum(-1)
    if batch.alpha is not None and lambda_mask > 0:
        empty = (batch.alpha < 0.5).to(per_ray.dtype)
        per_ray = per_ray + lambda_mask * empty * m.weights.sum(-1) ** 2
    return _reduce(per_ray, reduction), m


# --- LTS points --------------------------------------------------------------

@dataclass
class LtsPoints:
    x: torch.Tensor        # (P, 3)
    wo: torch.Tensor       # (P, 3) outgoing directions, upper hemisphere
    on: torch.Tensor       # (P,) bool
    certain: torch.Tensor  # (P,) bool
    keys: np.ndarray       # (P,) int64 sampler keys

    def __len__(self):
        return self.x.shape[0]


def sample_lts_points(m: RayMarch, fields, rays: RayBatch, certain: torch.Tensor, per_ray: int = 1, *,
                      sampler: CounterSampler | None = None, step: int = 0, min_opacity: float = 0.1):
    """Pick shading points along rays in proportion to their weights.

    Each selected point gets a fresh outgoing direction drawn uniformly from
    the hemisphere around its normal.  Rays with opacity below
    ``min_opacity`` contribute no points.
    """
    sampler = sampler or CounterSampler()
    w = m.weights.detach()
    opac = w.sum(-1)
    keep = (opac >= min_opacity).nonzero()[:, 0]
    if keep.numel() == 0:
        z = torch.zeros(0, 3, dtype=m.x.dtype)
        return LtsPoints(z, z, torch.zeros(0, dtype=torch.bool), torch.zeros(0, dtype=torch.bool),
                         np.zeros(0, dtype=np.int64))
    ids = rays.ids[keep].numpy()
    k = np.arange(per_ray)
    u = sampler.uniform(5, ids[:, None], k[None, :], step, dtype=w.dtype)
    cdf = torch.cumsum(w[keep], -1)
    cdf = cdf / cdf[:, -1:]
    idx = torch.searchsorted(cdf, u.contiguous()).clamp_max(w.shape[1] - 1)  # (K, per_ray)
    rows = keep[:, None].expand_as(idx)
    x = m.x[rows, idx].detach().reshape(-1, 3)
    keys = (ids[:, None] * np.int64(1 << 8) + k[None, :]).reshape(-1)
    with torch.no_grad():
        _, g = fields.sdf_with_gradient(x)
        n = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        u1 = sampler.uniform(6, keys, step, dtype=x.dtype)[:, None]
        u2 = sampler.uniform(7, keys, step, dtype=x.dtype)[:, None]
        wo = uniform_hemisphere(n, u1, u2)[:, 0]
    on = rays.on[keep][:, None].expand_as(idx).reshape(-1)
    cert = certain[keep][:, None].expand_as(idx).reshape(-1)
    return LtsPoints(x, wo, on, cert, keys)


def _reflection(points: LtsPoints, fields, n_dirs, want, **kw):
    return reflection_integrals(points.x, points.wo, fields, n_dirs, point_keys=points.keys,
                                strict=False, want=want, **kw)


def lts_loss_S(points: LtsPoints, fields, n_dirs: int = HEMISPHERE_SAMPLES, *, refl=None,
               reduction: str = "sum", **kw):
    """sum ||L_o^S - Lhat_o^S||^2 (plain l2, both sides differentiable)."""
    if refl is None:
        refl = _reflection(points, fields, n_dirs, ("S",), **kw)
    lhat = refl.env_direct + refl.env_indirect
    lo = fields.radiance(points.x, points.wo, "S")
    per = ((lo - lhat) ** 2).sum(-1) * refl.valid.to(lo.dtype)
    return _reduce(per, reduction)


def lts_loss_E(points: LtsPoints, fields, n_dirs: int = HEMISPHERE_SAMPLES, *, progressive: bool = False,
               lambda_l: float = 1.0, lambda_r: float = 0.1, refl=None, reduction: str = "sum",
               on_only: bool = True, pinned: dict | None = None, **kw):
    """Emission-side LTS loss.

    Basic form: sum ||L_o^E - Lhat_o^E||^2 with the full estimate.
    Progressive form: certain points use the reflection-only estimate,
    uncertain points E(x) + sg(reflection), and the residual is split into
    lambda_l ||sg(L_o^E) - Lhat||_1 + lambda_r ||L_o^E - sg(Lhat)||_1.
    Only lights-on points contribute unless ``on_only`` is False.  A
    ``pinned`` dict freezes the stop-gradient operands at the values of the
    first call, making the loss a function whose exact gradient is the
    analytic one.
    """
    if refl is None:
        refl = _reflection(points, fields, n_dirs, ("E",), **kw)
    lo = fields.radiance(points.x, points.wo, "E")
    emit = fields.emission(points.x)
    mask = refl.valid.to(lo.dtype)
    if on_only:
        mask = mask * points.on.to(lo.dtype)
    if not progressive:
        lhat = lhat_E_from(refl, emit, "full")
        per = ((lo - lhat) ** 2).sum(-1)
    else:
        cert = points.certain[:, None]
        lo_sg, refl_sg = lo.detach(), refl.emission.detach()
        lhat_sg = torch.where(cert, refl_sg, emit.detach() + refl_sg)
        if pinned is not None:
            # hold the stop-gradient operands at their first values (finite-difference checks)
            lo_sg, refl_sg, lhat_sg = pinned.setdefault("E", (lo_sg, refl_sg, lhat_sg))
        lhat = torch.where(cert, refl.emission, emit + refl_sg)
        per = lambda_l * (lo_sg - lhat).abs().sum(-1) + lambda_r * (lo - lhat_sg).abs().sum(-1)
    return _reduce(per * mask, reduction)


def suppression_loss(m: RayMarch, fields, certain: torch.Tensor, *, reduction: str = "sum"):
    """sum over certain rays of ||sum_i w_i E(x_i)||^2."""
    if not bool(certain.any()):
        return torch.zeros((), dtype=m.x.dtype)
    w = m.weights[certain]
    e = fields.emission(m.x[certain])
    per = ((w[..., None] * e).sum(-2) ** 2).sum(-1)
    return _reduce(per, reduction)


def _unit(v):
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-8)


def smoothing_loss(x: torch.Tensor, fields, *, sampler: CounterSampler | None = None, step: int = 0,
                   keys=None, offset: float | None = None, reduction: str = "sum"):
    """sum ||q(x) - q(x + delta)||_1 for normals, BRDF parameters and emission.

    ``delta`` has a random isotropic direction and length ``offset``
    (half a voxel by default).
    """
    sampler = sampler or CounterSampler()
    if keys is None:
        keys = np.arange(x.shape[0])
    offset = 0.5 * fields.voxel_size if offset is None else offset
    u1 = sampler.uniform(8, keys, step, dtype=x.dtype)
    u2 = sampler.uniform(9, keys, step, dtype=x.dtype)
    z = 2.0 * u1 - 1.0
    r = torch.sqrt((1.0 - z * z).clamp_min(0.0))
    phi = 2.0 * np.pi * u2
    delta = torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], -1) * offset
    y = x + delta

    def q(p):
        _, g = fields.sdf_with_gradient(p)
        b, rough, metal = fields.brdf(p)
        return torch.cat([_unit(g), b, rough[..., None], metal[..., None], fields.emission(p)], -1)

    per = (q(x) - q(y)).abs().sum(-1)
    return _reduce(per, reduction)


def eikonal_loss(x: torch.Tensor, fields, *, reduction: str = "sum"):
    """sum (||grad f|| - 1)^2, keeping the grid close to a distance field."""
    _, g = fields.sdf_with_gradient(x)
    return _reduce((g.norm(dim=-1) - 1.0) ** 2, reduction)


def lts_terms(points: LtsPoints, fields, n_dirs: int, *, progressive: bool, weights: LossWeights,
              n_samples: int = SECONDARY_SAMPLES, sampler=None, step: int = 0,
              min_weight: float = 0.0, reduction: str = "mean"):
    """Both LTS losses from one shared set of secondary marches."""
    refl = _reflection(points, fields, n_dirs, ("S", "E"), n_samples=n_samples, sampler=sampler,
                       step=step, min_weight=min_weight)
    ls = lts_loss_S(points, fields, refl=refl, reduction=reduction)
    le = lts_loss_E(points, fields, refl=refl, progressive=progressive, lambda_l=weights.lambda_l,
                    lambda_r=weights.lambda_r, reduction=reduction)
    return ls, le


__all__ = ["LossWeights", "TrainBatch", "LtsPoints", "rendering_loss", "sample_lts_points",
           "lts_loss_S", "lts_loss_E", "suppression_loss", "smoothing_loss", "eikonal_loss",
           "lts_terms"]
