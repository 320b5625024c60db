"""Spherical-Gaussian mixture environment map."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_LOBES = 48


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly uniform unit vectors on the sphere."""
    if n == 0:
        return np.zeros((0, 3))
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def sg_preactivation(mu, lam, xi, dirs):
    """Sum over lobes of mu_k exp(lam_k (dir . xi_k - 1)); dirs (..., 3)."""
    cos = dirs @ xi.T  # (..., K)
    lobe = torch.exp(lam * (cos - 1.0))
    return lobe @ mu


class EnvMap(nn.Module):
    """Mixture of spherical Gaussians followed by a softplus.

    ``mu`` is left unconstrained; the softplus keeps the output nonnegative.
    ``xi`` is kept on the unit sphere and ``lam`` positive by :meth:`project`,
    which the trainer calls after every optimizer step.
    """

    def __init__(self, n_lobes: int = DEFAULT_LOBES, *, sharpness: float = 10.0,
                 seed: int = 0, dtype=torch.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.mu = nn.Parameter(torch.as_tensor(0.01 * rng.random((n_lobes, 3)), dtype=dtype))
        self.lam = nn.Parameter(torch.full((n_lobes,), float(sharpness), dtype=dtype))
        self.xi = nn.Parameter(torch.as_tensor(fibonacci_sphere(n_lobes), dtype=dtype))

    @property
    def n_lobes(self) -> int:
        return self.mu.shape[0]

    def forward(self, dirs: torch.Tensor) -> torch.Tensor:
        return F.softplus(sg_preactivation(self.mu, self.lam, self.xi, dirs))

    @torch.no_grad()
    def project(self) -> None:
        self.xi.div_(self.xi.norm(dim=-1, keepdim=True).clamp_min(1e-12))
        self.lam.clamp_(min=1e-4)


@dataclass
class SgGradient:
    mu: np.ndarray   # (K, 3)
    lam: np.ndarray  # (K,)
    xi: np.ndarray   # (K, 3), tangent to the sphere at each axis


def _check_unit(d: np.ndarray) -> None:
    if not np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6):
        raise ValueError("direction must be a unit vector")


def eval_envmap(env: EnvMap, direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    _check_unit(d)
    with torch.no_grad():
        pre = sg_preactivation(env.mu.double(), env.lam.double(), env.xi.double(),
                               torch.as_tensor(d))
    return F.softplus(pre).numpy()


def envmap_grad(env: EnvMap, direction, upstream) -> SgGradient:
    """Reverse-mode rule for ``upstream . eval_envmap(env, direction)``.

    The axis gradient is projected onto the tangent plane of each axis; the
    optimizer renormalizes the axes after stepping.
    """
    d = np.asarray(direction, dtype=np.float64)
    _check_unit(d)
    up = np.asarray(upstream, dtype=np.float64)
    mu = env.mu.detach().double().numpy()
    lam = env.lam.detach().double().numpy()
    xi = env.xi.detach().double().numpy()

    cos = xi @ d
    lobe = np.exp(lam * (cos - 1.0))  # (K,)
    pre = lobe @ mu  # (3,)
    g_pre = up / (1.0 + np.exp(-pre))  # softplus' = sigmoid

    g_mu = lobe[:, None] * g_pre[None, :]
    g_lobe = mu @ g_pre  # (K,)
    g_lam = g_lobe * lobe * (cos - 1.0)
    g_xi = (g_lobe * lobe * lam)[:, None] * d[None, :]
    g_xi = g_xi - np.sum(g_xi * xi, axis=-1, keepdims=True) * xi
    return SgGradient(mu=g_mu, lam=g_lam, xi=g_xi)
