"""Brute-force reference: analytic scenes and a volumetric Monte Carlo path tracer.

The tracer uses the same discretized alpha/transmittance transport as the
renderer (stratified samples, NeuS-style discrete opacity) but is an
independent implementation: scalar loops compiled with numba, its own BRDF,
its own random numbers.  At every bounce it composites emission along the
segment, adds the environment weighted by the residual transmittance, then
picks a sample point in proportion to its weight and scatters uniformly over
the hemisphere with throughput ``W R / (1 / 2pi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from numba import njit

from .camera import Camera

TWO_PI = 2.0 * math.pi
GOLDEN = np.uint64(0x9E3779B97F4A7C15)


# --- random numbers ------------------------------------------------------------

@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _seed_state(seed, a, b):
    s = _mix(np.uint64(seed) + GOLDEN)
    s = _mix(s ^ np.uint64(a))
    return _mix(s ^ np.uint64(b))


@njit(cache=True)
def _rand(state):
    state[0] += GOLDEN
    return float(_mix(state[0]) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --- scene evaluation ----------------------------------------------------------
# The scene is passed as a tuple of arrays; see AnalyticScene.packed().

@njit(cache=True)
def _sdf(sc, x, y, z):
    boxes = sc[0]
    spheres = sc[1]
    best = 1e30
    for k in range(boxes.shape[0]):
        qx = abs(x - boxes[k, 0]) - boxes[k, 3]
        qy = abs(y - boxes[k, 1]) - boxes[k, 4]
        qz = abs(z - boxes[k, 2]) - boxes[k, 5]
        ox = max(qx, 0.0)
        oy = max(qy, 0.0)
        oz = max(qz, 0.0)
        d = math.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
        if d < best:
            best = d
    for k in range(spheres.shape[0]):
        dx = x - spheres[k, 0]
        dy = y - spheres[k, 1]
        dz = z - spheres[k, 2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz) - spheres[k, 3]
        if d < best:
            best = d
    return best


NORMAL_STEP = 1e-4


@njit(cache=True)
def _sdf_grad(sc, x, y, z):
    h = 1e-4
    gx = (_sdf(sc, x + h, y, z) - _sdf(sc, x - h, y, z)) / (2 * h)
    gy = (_sdf(sc, x, y + h, z) - _sdf(sc, x, y - h, z)) / (2 * h)
    gz = (_sdf(sc, x, y, z + h) - _sdf(sc, x, y, z - h)) / (2 * h)
    return gx, gy, gz


@njit(cache=True)
def _inside(regions, k, x, y, z):
    return (abs(x - regions[k, 0]) <= regions[k, 3] and abs(y - regions[k, 1]) <= regions[k, 4]
            and abs(z - regions[k, 2]) <= regions[k, 5])


@njit(cache=True)
def _material(sc, x, y, z, out):
    regions = sc[3]
    vals = sc[4]
    for k in range(regions.shape[0]):
        if _inside(regions, k, x, y, z):
            for c in range(5):
                out[c] = vals[k, c]
            return
    default = sc[2]
    for c in range(5):
        out[c] = default[c]


@njit(cache=True)
def _emission(sc, x, y, z, out):
    regions = sc[5]
    vals = sc[6]
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for k in range(regions.shape[0]):
        if _inside(regions, k, x, y, z):
            out[0] += vals[k, 0]
            out[1] += vals[k, 1]
            out[2] += vals[k, 2]


@njit(cache=True)
def _softplus(v):
    return max(v, 0.0) + math.log1p(math.exp(-abs(v)))


@njit(cache=True)
def _env(sc, dx, dy, dz, out):
    mu = sc[7]
    lam = sc[8]
    xi = sc[9]
    p0 = 0.0
    p1 = 0.0
    p2 = 0.0
    for k in range(mu.shape[0]):
        lobe = math.exp(lam[k] * (dx * xi[k, 0] + dy * xi[k, 1] + dz * xi[k, 2] - 1.0))
        p0 += mu[k, 0] * lobe
        p1 += mu[k, 1] * lobe
        p2 += mu[k, 2] * lobe
    out[0] = _softplus(p0)
    out[1] = _softplus(p1)
    out[2] = _softplus(p2)


@njit(cache=True)
def _brdf(nx, ny, nz, ox, oy, oz, ix, iy, iz, mat, schlick, out):
    """Simplified Disney BRDF, cosine included; writes RGB into out."""
    no = min(max(nx * ox + ny * oy + nz * oz, 0.0), 1.0)
    ni = min(max(nx * ix + ny * iy + nz * iz, 0.0), 1.0)
    r = mat[3]
    m = mat[4]
    for c in range(3):
        out[c] = 0.0
    if no <= 0.0:
        return
    hx = ox + ix
    hy = oy + iy
    hz = oz + iz
    hl = math.sqrt(hx * hx + hy * hy + hz * hz)
    spec_scale = 0.0
    fw = 0.0
    if hl >= 1e-6:
        hx /= hl
        hy /= hl
        hz /= hl
        nh = min(max(nx * hx + ny * hy + nz * hz, 0.0), 1.0)
        oh = min(max(ox * hx + oy * hy + oz * hz, 0.0), 1.0)
        rd = max(r, 0.05)
        r4 = rd ** 4
        d = math.exp(2.0 * (nh - 1.0) / r4) / (math.pi * r4)
        k = r * r / 2.0
        g = no * ni / ((no * (1.0 - k) + k) * (ni * (1.0 - k) + k))
        spec_scale = d * g / (4.0 * no)
        fw = (1.0 - oh) ** 5 if schlick else 1.0 - oh ** 5
    for c in range(3):
        f0 = 0.04 * (1.0 - m) + mat[c] * m
        fres = f0 + (1.0 - f0) * fw
        out[c] = spec_scale * fres + ni * (1.0 - m) * mat[c] / math.pi


@njit(cache=True)
def _box_exit(sc, ox, oy, oz, dx, dy, dz):
    """(near, far) of o + t d against the bounding box, near clamped at 0."""
    bb = sc[10]
    near = 0.0
    far = 1e30
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        da = d[a]
        if abs(da) < 1e-12:
            da = 1e-12
        t0 = (bb[a] - o[a]) / da
        t1 = (bb[a + 3] - o[a]) / da
        near = max(near, min(t0, t1))
        far = min(far, max(t0, t1))
    return near, far


@njit(cache=True)
def _log_sigmoid(v):
    return -_softplus(-v)


@njit(cache=True)
def _segment(sc, ox, oy, oz, dx, dy, dz, near, far, n, jitter, state, xs, ws):
    """March n samples along o + t d; fills xs/ws, returns residual transmittance."""
    s = sc[11][0]
    if far <= near:
        for i in range(n):
            ws[i] = 0.0
        return 1.0
    span = far - near
    prev = 0.0
    trans = 1.0
    for i in range(n + 1):
        u = _rand(state) if jitter else 0.5
        t = near + (i + u) / (n + 1) * span
        px = ox + t * dx
        py = oy + t * dy
        pz = oz + t * dz
        ls = _log_sigmoid(s * _sdf(sc, px, py, pz))
        if i > 0:
            a = -math.expm1(ls - prev)
            a = min(max(a, 0.0), 1.0 - 1e-6)
            ws[i - 1] = trans * a
            trans *= 1.0 - a
        if i < n:
            xs[i, 0] = px
            xs[i, 1] = py
            xs[i, 2] = pz
        prev = ls
    return trans


@njit(cache=True)
def _scatter_dir(nx, ny, nz, u1, u2):
    sign = 1.0 if nz >= 0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    tx, ty, tz = 1.0 + sign * nx * nx * a, sign * b, -sign * nx
    bx, by, bz = b, sign + ny * ny * a, -ny
    z = u1
    r = math.sqrt(max(0.0, 1.0 - z * z))
    phi = TWO_PI * u2
    c = r * math.cos(phi)
    sn = r * math.sin(phi)
    return (c * tx + sn * bx + z * nx, c * ty + sn * by + z * ny, c * tz + sn * bz + z * nz)


@njit(cache=True)
def _trace(sc, ox, oy, oz, dx, dy, dz, near, far, bounces, n_first, n_next, eps,
           emis_on, env_on, env_first, jitter, schlick, state, out):
    """Radiance arriving at o from direction -d (marching along d).

    ``jitter`` only affects the first segment; later segments are always
    stratified with random offsets.
    """
    nmax = max(n_first, n_next)
    xs = np.empty((nmax, 3))
    ws = np.empty(nmax)
    e = np.empty(3)
    mat = np.empty(5)
    f = np.empty(3)
    beta0 = 1.0
    beta1 = 1.0
    beta2 = 1.0
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    n = n_first
    for depth in range(bounces + 1):
        t_end = _segment(sc, ox, oy, oz, dx, dy, dz, near, far, n, jitter or depth > 0, state, xs,
                         ws)
        if emis_on:
            for i in range(n):
                if ws[i] > 0.0:
                    _emission(sc, xs[i, 0], xs[i, 1], xs[i, 2], e)
                    out[0] += beta0 * ws[i] * e[0]
                    out[1] += beta1 * ws[i] * e[1]
                    out[2] += beta2 * ws[i] * e[2]
        if env_on and (depth > 0 or env_first) and t_end > 0.0:
            _env(sc, dx, dy, dz, e)
            out[0] += beta0 * t_end * e[0]
            out[1] += beta1 * t_end * e[1]
            out[2] += beta2 * t_end * e[2]
        if depth == bounces:
            break
        wsum = 0.0
        for i in range(n):
            wsum += ws[i]
        if wsum <= 0.0:
            break
        target = _rand(state) * wsum
        j = n - 1
        acc = 0.0
        for i in range(n):
            acc += ws[i]
            if acc > target:
                j = i
                break
        px, py, pz = xs[j, 0], xs[j, 1], xs[j, 2]
        gx, gy, gz = _sdf_grad(sc, px, py, pz)
        gl = math.sqrt(gx * gx + gy * gy + gz * gz)
        if gl < 1e-8:
            break
        gx /= gl
        gy /= gl
        gz /= gl
        u1 = _rand(state)
        u2 = _rand(state)
        ix, iy, iz = _scatter_dir(gx, gy, gz, u1, u2)
        _material(sc, px, py, pz, mat)
        _brdf(gx, gy, gz, -dx, -dy, -dz, ix, iy, iz, mat, schlick, f)
        beta0 *= wsum * f[0] * TWO_PI
        beta1 *= wsum * f[1] * TWO_PI
        beta2 *= wsum * f[2] * TWO_PI
        if beta0 == 0.0 and beta1 == 0.0 and beta2 == 0.0:
            break
        ox, oy, oz = px + eps * ix, py + eps * iy, pz + eps * iz
        dx, dy, dz = ix, iy, iz
        near, far = _box_exit(sc, ox, oy, oz, dx, dy, dz)
        near = 0.0
        far = max(far, 0.0)
        n = n_next


@njit(cache=True)
def _render_rays(sc, origins, toward_cam, ids, spp, bounces, n_first, n_next, eps, emis_on,
                 env_on, env_first, jitter, schlick, seed, mean, var):
    out = np.empty(3)
    state = np.empty(1, dtype=np.uint64)
    for r in range(origins.shape[0]):
        dx, dy, dz = -toward_cam[r, 0], -toward_cam[r, 1], -toward_cam[r, 2]
        near, far = _box_exit(sc, origins[r, 0], origins[r, 1], origins[r, 2], dx, dy, dz)
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        q0 = 0.0
        q1 = 0.0
        q2 = 0.0
        for k in range(spp):
            state[0] = _seed_state(seed, ids[r], k)
            _trace(sc, origins[r, 0], origins[r, 1], origins[r, 2], dx, dy, dz, near, far, bounces,
                   n_first, n_next, eps, emis_on, env_on, env_first, jitter, schlick, state, out)
            s0 += out[0]
            s1 += out[1]
            s2 += out[2]
            q0 += out[0] * out[0]
            q1 += out[1] * out[1]
            q2 += out[2] * out[2]
        mean[r, 0] = s0 / spp
        mean[r, 1] = s1 / spp
        mean[r, 2] = s2 / spp
        if spp > 1:
            var[r, 0] = max(q0 / spp - mean[r, 0] ** 2, 0.0) * spp / (spp - 1)
            var[r, 1] = max(q1 / spp - mean[r, 1] ** 2, 0.0) * spp / (spp - 1)
            var[r, 2] = max(q2 / spp - mean[r, 2] ** 2, 0.0) * spp / (spp - 1)


@njit(cache=True)
def _point_radiance(sc, pts, wo, keys, spp, bounces, n_next, eps, emis_on, env_on, schlick,
                    seed, mean):
    """Outgoing radiance at pts toward wo with up to ``bounces`` scattering events."""
    out = np.empty(3)
    e = np.empty(3)
    mat = np.empty(5)
    f = np.empty(3)
    state = np.empty(1, dtype=np.uint64)
    for p in range(pts.shape[0]):
        x, y, z = pts[p, 0], pts[p, 1], pts[p, 2]
        if emis_on:
            _emission(sc, x, y, z, e)
            mean[p, 0] = e[0]
            mean[p, 1] = e[1]
            mean[p, 2] = e[2]
        else:
            mean[p, 0] = 0.0
            mean[p, 1] = 0.0
            mean[p, 2] = 0.0
        if bounces == 0:
            continue
        gx, gy, gz = _sdf_grad(sc, x, y, z)
        gl = math.sqrt(gx * gx + gy * gy + gz * gz)
        if gl < 1e-8:
            continue
        gx /= gl
        gy /= gl
        gz /= gl
        _material(sc, x, y, z, mat)
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for k in range(spp):
            state[0] = _seed_state(seed, keys[p], k)
            u1 = _rand(state)
            u2 = _rand(state)
            ix, iy, iz = _scatter_dir(gx, gy, gz, u1, u2)
            _brdf(gx, gy, gz, wo[p, 0], wo[p, 1], wo[p, 2], ix, iy, iz, mat, schlick, f)
            if f[0] == 0.0 and f[1] == 0.0 and f[2] == 0.0:
                continue
            ox, oy, oz = x + eps * ix, y + eps * iy, z + eps * iz
            near, far = _box_exit(sc, ox, oy, oz, ix, iy, iz)
            _trace(sc, ox, oy, oz, ix, iy, iz, 0.0, max(far, 0.0), bounces - 1, n_next, n_next, eps,
                   emis_on, env_on, True, True, schlick, state, out)
            s0 += out[0] * f[0] * TWO_PI
            s1 += out[1] * f[1] * TWO_PI
            s2 += out[2] * f[2] * TWO_PI
        mean[p, 0] += s0 / spp
        mean[p, 1] += s1 / spp
        mean[p, 2] += s2 / spp


@njit(cache=True)
def _batch_sdf(sc, pts, out, grad, with_grad):
    for p in range(pts.shape[0]):
        out[p] = _sdf(sc, pts[p, 0], pts[p, 1], pts[p, 2])
        if with_grad:
            gx, gy, gz = _sdf_grad(sc, pts[p, 0], pts[p, 1], pts[p, 2])
            grad[p, 0] = gx
            grad[p, 1] = gy
            grad[p, 2] = gz


@njit(cache=True)
def _batch_material(sc, pts, out):
    for p in range(pts.shape[0]):
        _material(sc, pts[p, 0], pts[p, 1], pts[p, 2], out[p])


@njit(cache=True)
def _batch_emission(sc, pts, out):
    for p in range(pts.shape[0]):
        _emission(sc, pts[p, 0], pts[p, 1], pts[p, 2], out[p])


@njit(cache=True)
def _batch_env(sc, dirs, out):
    for p in range(dirs.shape[0]):
        _env(sc, dirs[p, 0], dirs[p, 1], dirs[p, 2], out[p])


# --- public API ------------------------------------------------------------------

def _regions(items, width):
    if not items:
        return np.zeros((0, width))
    return np.asarray(items, dtype=np.float64).reshape(-1, width)


@dataclass
class AnalyticScene:
    """Closed-form scene: union of boxes/spheres, box-shaped material and emission regions.

    Boxes are ``(cx, cy, cz, hx, hy, hz)``; spheres ``(cx, cy, cz, r)``.
    Material values are ``(r, g, b, roughness, metallic)``.  Emission regions
    add their RGB strength to every point they contain.  The environment is a
    spherical-Gaussian mixture with a softplus, like the learned one.
    """

    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    default_material: tuple = (0.5, 0.5, 0.5, 0.8, 0.0)
    material_regions: list = field(default_factory=list)  # [(box6, mat5)]
    emission_regions: list = field(default_factory=list)  # [(box6, rgb3)]
    env_mu: np.ndarray = field(default_factory=lambda: np.array([[-30.0, -30.0, -30.0]]))
    env_lam: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    env_xi: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.0, 1.0]]))
    sharpness: float = 200.0

    def packed(self):
        mat_boxes = _regions([b for b, _ in self.material_regions], 6)
        mat_vals = _regions([v for _, v in self.material_regions], 5)
        em_boxes = _regions([b for b, _ in self.emission_regions], 6)
        em_vals = _regions([v for _, v in self.emission_regions], 3)
        return (_regions(self.boxes, 6), _regions(self.spheres, 4),
                np.asarray(self.default_material, dtype=np.float64), mat_boxes, mat_vals,
                em_boxes, em_vals, np.asarray(self.env_mu, dtype=np.float64).reshape(-1, 3),
                np.asarray(self.env_lam, dtype=np.float64).reshape(-1),
                np.asarray(self.env_xi, dtype=np.float64).reshape(-1, 3),
                np.asarray([*self.bbox_min, *self.bbox_max], dtype=np.float64),
                np.asarray([self.sharpness], dtype=np.float64))

    # batched numpy accessors
    def sdf(self, pts):
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        _batch_sdf(self.packed(), pts, out, np.empty((1, 3)), False)
        return out

    def sdf_gradient(self, pts):
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        grad = np.empty((len(pts), 3))
        _batch_sdf(self.packed(), pts, out, grad, True)
        return out, grad

    def material(self, pts):
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(pts), 5))
        _batch_material(self.packed(), pts, out)
        return out

    def emission(self, pts):
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(pts), 3))
        _batch_emission(self.packed(), pts, out)
        return out

    def env(self, dirs):
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(dirs), 3))
        _batch_env(self.packed(), dirs, out)
        return out

    def without_emission(self) -> "AnalyticScene":
        return _replace(self, emission_regions=[])

    def with_emission_scale(self, k: float) -> "AnalyticScene":
        return _replace(self, emission_regions=[(b, tuple(k * np.asarray(v))) for b, v in self.emission_regions])


def _replace(scene, **kw):
    from dataclasses import replace
    return replace(scene, **kw)


@dataclass
class PathTraceConfig:
    bounces: int = 2
    spp: int = 16
    n_samples: int = 100
    n_secondary: int = 64
    eps: float = 1e-3
    seed: int = 0
    jitter: bool = True
    schlick: bool = False

    def __post_init__(self):
        if self.bounces < 0:
            raise ValueError("bounces must be >= 0")


def path_trace(scene: AnalyticScene, origins, toward_cam, cfg: PathTraceConfig, *,
               emission: bool = True, env: bool = True, background: bool = True,
               ids=None, return_variance: bool = False):
    """Per-ray radiance estimates (R, 3) averaged over ``cfg.spp`` paths.

    ``emission``/``env`` select the light sources (lights-on images use both,
    lights-off images only the environment); ``background`` controls whether
    the environment seen directly along the primary ray is included.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    toward_cam = np.ascontiguousarray(toward_cam, dtype=np.float64).reshape(-1, 3)
    ids = np.arange(len(origins), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    mean = np.zeros((len(origins), 3))
    var = np.zeros((len(origins), 3))
    _render_rays(scene.packed(), origins, toward_cam, ids, int(cfg.spp), int(cfg.bounces),
                 int(cfg.n_samples), int(cfg.n_secondary), float(cfg.eps), bool(emission), bool(env),
                 bool(background), bool(cfg.jitter), bool(cfg.schlick), int(cfg.seed), mean, var)
    if return_variance:
        return mean, var
    return mean


def point_radiance(scene: AnalyticScene, pts, wo, *, bounces: int, spp: int = 1,
                   n_secondary: int = 64, eps: float = 1e-3, emission: bool = True,
                   env: bool = True, keys=None, seed: int = 0, schlick: bool = False):
    """Estimate of L_o(x, wo) with at most ``bounces`` scattering events."""
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
    wo = np.ascontiguousarray(wo, dtype=np.float64).reshape(-1, 3)
    keys = np.arange(len(pts), dtype=np.int64) if keys is None else np.asarray(keys, dtype=np.int64)
    mean = np.zeros((len(pts), 3))
    _point_radiance(scene.packed(), pts, wo, keys, int(spp), int(bounces), int(n_secondary),
                    float(eps), bool(emission), bool(env), bool(schlick), int(seed), mean)
    return mean


def render_view(scene: AnalyticScene, camera: Camera, cfg: PathTraceConfig, *, view_index: int = 0,
                **kw) -> np.ndarray:
    """HDR image (H, W, 3) of one camera."""
    origins, toward = camera.pixel_rays()
    ids = view_index * camera.width * camera.height + np.arange(len(origins))
    return path_trace(scene, origins, toward, cfg, ids=ids, **kw).reshape(camera.height, camera.width, 3)


def coverage_and_emitter_mask(scene: AnalyticScene, camera: Camera, n_samples: int = 100):
    """Per-pixel opacity (1 - T_end) and the emitter mask (weight on emitters > 0.5)."""
    origins, toward = camera.pixel_rays()
    packed = scene.packed()
    r = len(origins)
    alpha = np.zeros(r)
    emit = np.zeros(r)
    xs = np.empty((n_samples, 3))
    ws = np.empty(n_samples)
    state = np.zeros(1, dtype=np.uint64)
    e = np.empty((n_samples, 3))
    for i in range(r):
        d = -toward[i]
        near, far = _box_exit(packed, *origins[i], *d)
        t_end = _segment(packed, *origins[i], *d, near, far, n_samples, False, state, xs, ws)
        alpha[i] = 1.0 - t_end
        _batch_emission(packed, xs, e)
        emit[i] = float(ws @ (e.max(axis=1) > 0))
    shape = (camera.height, camera.width)
    return alpha.reshape(shape), (emit > 0.5).reshape(shape)


def box_env(level: float) -> tuple:
    """SG parameters for a constant environment of the given radiance."""
    mu = math.log(math.expm1(level)) if level > 0 else -30.0
    return np.array([[mu, mu, mu]]), np.array([0.0]), np.array([[0.0, 0.0, 1.0]])


def make_box_scene(strength: float = 5.0, *, env_level: float = 0.25, albedo=(0.5, 0.5, 0.5),
                   roughness: float = 0.8, patch_halfsize=(0.25, 0.2),
                   patch_center=(0.0, -0.3), sharpness: float = 200.0) -> AnalyticScene:
    """Open box (floor and two walls) with one rectangular emissive patch.

    The patch sits on the wall facing -x, just above the floor, so the floor
    in front of it receives strong light.  ``patch_center`` is (y, z) on that
    wall and ``patch_halfsize`` its half extents.
    """
    floor_top, wall_x, wall_y = -0.6, 0.6, 0.6
    boxes = [
        (0.0, 0.0, -0.85, 1.2, 1.2, 0.25),                      # floor slab, top at z=-0.6
        (0.85, 0.0, -0.1, 0.25, 1.2, 0.75),                     # wall, face at x=0.6
        (0.0, 0.85, -0.1, 1.2, 0.25, 0.75),                     # wall, face at y=0.6
    ]
    del floor_top, wall_y
    py, pz = patch_center
    hy, hz = patch_halfsize
    emitter = (wall_x, py, pz, 0.04, hy, hz)
    regions = [(emitter, (strength, strength, strength))] if strength > 0 else []
    mat = (*albedo, roughness, 0.0)
    mu, lam, xi = box_env(env_level)
    return AnalyticScene(bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0), boxes=boxes,
                         default_material=mat, emission_regions=regions, env_mu=mu, env_lam=lam,
                         env_xi=xi, sharpness=sharpness)


def make_two_surface_scene(strength: float = 3.0, *, env_level: float = 0.0,
                           sharpness: float = 200.0) -> AnalyticScene:
    """A diffuse floor facing an emissive ceiling tile: the smallest one-bounce setup."""
    boxes = [(0.0, 0.0, -0.8, 1.2, 1.2, 0.2),   # floor, top at z=-0.6
             (0.0, 0.0, 0.6, 0.3, 0.3, 0.05)]   # tile, bottom face at z=0.55
    regions = [((0.0, 0.0, 0.55, 0.3, 0.3, 0.04), (strength, strength, strength))]
    mu, lam, xi = box_env(env_level)
    return AnalyticScene(boxes=boxes, default_material=(0.6, 0.6, 0.6, 0.7, 0.0),
                         emission_regions=regions, env_mu=mu, env_lam=lam, env_xi=xi,
                         sharpness=sharpness)


class AnalyticFields:
    """Scene-protocol adapter exposing an analytic scene to the renderer.

    Radiance fields return oracle estimates of the outgoing radiance with up
    to ``bounces`` scattering events: ``which='E'`` is the extra radiance due
    to emitters, ``which='S'`` the radiance under the environment alone.
    With ``bounces=0`` they reduce to E(x) and 0.  Every radiance query draws
    fresh, reproducible random numbers.
    """

    def __init__(self, scene: AnalyticScene, *, bounces: int = 0, spp: int = 1,
                 n_secondary: int = 64, eps: float = 1e-3, seed: int = 0, dtype=torch.float64):
        self.scene = scene
        self.bounces = int(bounces)
        self.spp = int(spp)
        self.n_secondary = n_secondary
        self.eps = eps
        self.seed = seed
        self._dtype = dtype
        self._calls = 0

    @property
    def dtype(self):
        return self._dtype

    @property
    def bbox(self):
        return (torch.as_tensor(self.scene.bbox_min, dtype=self._dtype),
                torch.as_tensor(self.scene.bbox_max, dtype=self._dtype))

    @property
    def sharpness(self):
        return torch.tensor(self.scene.sharpness, dtype=self._dtype)

    @property
    def voxel_size(self) -> float:
        return 0.02

    def _np(self, x):
        return x.detach().reshape(-1, 3).cpu().double().numpy()

    def _t(self, a, shape):
        return torch.as_tensor(a, dtype=self._dtype).reshape(shape)

    def sdf(self, x):
        return self._t(self.scene.sdf(self._np(x)), x.shape[:-1])

    def sdf_with_gradient(self, x):
        v, g = self.scene.sdf_gradient(self._np(x))
        return self._t(v, x.shape[:-1]), self._t(g, x.shape)

    def brdf(self, x):
        m = self._t(self.scene.material(self._np(x)), (*x.shape[:-1], 5))
        return m[..., :3], m[..., 3], m[..., 4]

    def emission(self, x):
        return self._t(self.scene.emission(self._np(x)), x.shape)

    def env(self, w):
        return self._t(self.scene.env(self._np(w)), w.shape)

    def tonemap(self, c):
        from .colorspace import tau
        return tau(c)

    def radiance(self, x, w, which: str):
        if which not in ("S", "E"):
            raise ValueError(f"unknown radiance field {which!r}")
        pts = self._np(x)
        if which == "S" and self.bounces == 0:
            return torch.zeros(x.shape, dtype=self._dtype)
        self._calls += 1
        keys = np.arange(len(pts), dtype=np.int64) + (np.int64(self._calls) << np.int64(32))
        est = point_radiance(self.scene, pts, self._np(w), bounces=self.bounces, spp=self.spp,
                             n_secondary=self.n_secondary, eps=self.eps, emission=which == "E",
                             env=which == "S", keys=keys, seed=self.seed)
        return self._t(est, x.shape)
