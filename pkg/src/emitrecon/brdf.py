"""Simplified Disney BRDF with the Lambert cosine folded in.

    R = D F G / (4 n.wo) + (n.wi) (1 - m) b / pi

D is the spherical-Gaussian approximation of the normal distribution, G the
GGX form with k = r^2 / 2.  The Fresnel factor is ``1 - (wo.h)^5``, i.e. the
form ``F0 + (1 - F0)(1 - (wo.h)^5)``; pass ``schlick=True`` for the usual
``(1 - wo.h)^5`` variant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

ROUGHNESS_FLOOR = 0.05
DIELECTRIC_F0 = 0.04
SCHLICK_DEFAULT = False


@dataclass
class BrdfParams:
    base_color: np.ndarray  # (3,)
    roughness: float
    metallic: float

    def __post_init__(self):
        self.base_color = np.asarray(self.base_color, dtype=np.float64)
        if self.base_color.shape != (3,) or (self.base_color < 0).any() or (self.base_color > 1).any():
            raise ValueError("base_color must be a 3-vector in [0, 1]")
        if not 0.0 <= self.roughness <= 1.0 or not 0.0 <= self.metallic <= 1.0:
            raise ValueError("roughness and metallic must lie in [0, 1]")


def _dot(a, b):
    return (a * b).sum(-1)


def _fresnel_weight(oh, schlick):
    # F = 1 - w (1 - F0): returns w, the factor multiplying (1 - F0)
    return (1.0 - oh) ** 5 if schlick else 1.0 - oh ** 5


def disney_brdf(n, wo, wi, base, rough, metal, *, schlick: bool | None = None,
                return_degenerate: bool = False):
    """Batched, differentiable evaluation.

    Shapes: vectors (..., 3), ``base`` (..., 3), ``rough``/``metal`` (...).
    Points viewed from below (n.wo <= 0) evaluate to zero.
    """
    schlick = SCHLICK_DEFAULT if schlick is None else schlick
    no = _dot(n, wo).clamp(0.0, 1.0)
    ni = _dot(n, wi).clamp(0.0, 1.0)
    hsum = wo + wi
    hlen = hsum.norm(dim=-1)
    degenerate = hlen < 1e-6
    h = hsum / torch.where(degenerate, torch.ones_like(hlen), hlen)[..., None]
    nh = _dot(n, h).clamp(0.0, 1.0)
    oh = _dot(wo, h).clamp(0.0, 1.0)

    r_d = rough.clamp_min(ROUGHNESS_FLOOR)
    r4 = r_d ** 4
    dist = torch.exp(2.0 * (nh - 1.0) / r4) / (math.pi * r4)

    f0 = DIELECTRIC_F0 * (1.0 - metal)[..., None] + base * metal[..., None]
    if schlick:
        fres = f0 + (1.0 - f0) * ((1.0 - oh) ** 5)[..., None]
    else:
        fres = f0 + (1.0 - f0) * (1.0 - oh ** 5)[..., None]

    k = rough ** 2 / 2.0
    a = no * (1.0 - k) + k
    b = ni * (1.0 - k) + k
    # G / (4 n.wo) with the n.wo factor cancelled analytically
    g_over = ni / (4.0 * a * b)
    spec = (dist * g_over)[..., None] * fres
    valid = (~degenerate) & (no > 0)
    spec = torch.where(valid[..., None], spec, torch.zeros_like(spec))

    diffuse = (ni * (1.0 - metal))[..., None] * base / math.pi
    out = spec + diffuse
    out = torch.where((no > 0)[..., None], out, torch.zeros_like(out))
    if return_degenerate:
        return out, degenerate
    return out


def _validate(n, wo, wi):
    for name, v in (("n", n), ("wo", wo), ("wi", wi)):
        if not np.allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-6):
            raise ValueError(f"{name} must be a unit vector")
    if (np.sum(n * wo, axis=-1) <= 0).any():
        raise ValueError("n . wo must be positive")


def eval_brdf(n, wo, wi, p: BrdfParams, *, schlick: bool | None = None,
              return_degenerate: bool = False):
    """Cosine-weighted reflectance for a single configuration (float64)."""
    n, wo, wi = (np.asarray(v, dtype=np.float64) for v in (n, wo, wi))
    _validate(n, wo, wi)
    t = lambda v: torch.as_tensor(v, dtype=torch.float64)  # noqa: E731
    with torch.no_grad():
        out, deg = disney_brdf(t(n), t(wo), t(wi), t(p.base_color), t(p.roughness),
                               t(p.metallic), schlick=schlick, return_degenerate=True)
    if return_degenerate:
        return out.numpy(), bool(deg)
    return out.numpy()


@dataclass
class BrdfGradient:
    base_color: np.ndarray  # (3,)
    roughness: float
    metallic: float
    normal: np.ndarray  # (3,), gradient wrt the raw normal vector


def brdf_grad(n, wo, wi, p: BrdfParams, upstream, *, schlick: bool | None = None) -> BrdfGradient:
    """Hand-derived gradient of ``upstream . eval_brdf(...)``.

    Valid away from the clamps (all dot products strictly inside (0, 1)) and
    for roughness above the floor used inside D.
    """
    schlick = SCHLICK_DEFAULT if schlick is None else schlick
    n, wo, wi = (np.asarray(v, dtype=np.float64) for v in (n, wo, wi))
    _validate(n, wo, wi)
    up = np.asarray(upstream, dtype=np.float64)
    bc, r, m = p.base_color, float(p.roughness), float(p.metallic)

    hsum = wo + wi
    hlen = np.linalg.norm(hsum)
    no = float(np.clip(n @ wo, 0.0, 1.0))
    ni = float(np.clip(n @ wi, 0.0, 1.0))

    diff_coef = ni * (1.0 - m) / math.pi
    g_base = up * diff_coef
    g_metal = -float(up @ bc) * ni / math.pi
    g_ni = float(up @ bc) * (1.0 - m) / math.pi
    g_no = 0.0
    g_nh = 0.0
    g_rough = 0.0

    if hlen >= 1e-6:
        h = hsum / hlen
        nh = float(np.clip(n @ h, 0.0, 1.0))
        oh = float(np.clip(wo @ h, 0.0, 1.0))
        rd = max(r, ROUGHNESS_FLOOR)
        u = rd ** 4
        dist = math.exp(2.0 * (nh - 1.0) / u) / (math.pi * u)
        fw = _fresnel_weight(oh, schlick)
        f0 = DIELECTRIC_F0 * (1.0 - m) + bc * m
        fres = f0 + (1.0 - f0) * fw
        k = r * r / 2.0
        a = no * (1.0 - k) + k
        b = ni * (1.0 - k) + k
        g_over = ni / (4.0 * a * b)

        up_f = float(up @ fres)
        # dF/dF0 = 1 - fw
        dfd0 = 1.0 - fw
        g_base = g_base + up * dist * g_over * dfd0 * m
        g_metal += dist * g_over * dfd0 * float(up @ (bc - DIELECTRIC_F0))

        # roughness: through D (above the floor) and through k in G
        if r > ROUGHNESS_FLOOR:
            d_dist_du = dist * (-2.0 * (nh - 1.0) / u ** 2 - 1.0 / u)
            g_rough += up_f * g_over * d_dist_du * 4.0 * r ** 3
        dg_dk = -g_over * ((1.0 - no) / a + (1.0 - ni) / b)
        g_rough += up_f * dist * dg_dk * r

        g_nh = up_f * g_over * dist * 2.0 / u
        g_no = up_f * dist * (-g_over * (1.0 - k) / a)
        g_ni += up_f * dist * (1.0 / (4.0 * a * b) - g_over * (1.0 - k) / b)
        g_normal = g_no * wo + g_ni * wi + g_nh * h
    else:
        g_normal = g_ni * wi

    return BrdfGradient(base_color=np.asarray(g_base, dtype=np.float64), roughness=g_rough,
                        metallic=g_metal, normal=g_normal)
