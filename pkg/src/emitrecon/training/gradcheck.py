"""Central finite-difference verification of the autograd gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..fields import FieldSet
from ..renderer import CounterSampler, make_rays, march
from .losses import (LtsPoints, TrainBatch, lts_loss_E, lts_loss_S, rendering_loss, smoothing_loss,
                     suppression_loss)


SLAB = 0.5  # floor and ceiling faces at z = -SLAB and z = +SLAB


def tiny_fields(seed: int = 0, resolution: int = 8) -> FieldSet:
    """Float64 field set with randomised parameters, so no gradient is trivially zero.

    The geometry is an open slab between a floor and a ceiling, so secondary
    rays from either face reach the other one.
    """
    f = FieldSet(resolution=resolution, features=4, radiance_hidden=8, tonemap_hidden=8, env_lobes=4,
                 sharpness=10.0, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 100)
    z = torch.linspace(-1.0, 1.0, resolution, dtype=torch.float64)
    with torch.no_grad():
        slab = torch.minimum(z + SLAB, SLAB - z)
        f.sdf_field.grid.values.copy_(slab.expand(resolution, resolution, resolution)[..., None])
        f.brdf_grid.values.add_(0.5 * torch.randn(f.brdf_grid.values.shape, generator=gen, dtype=torch.float64))
        f.emission_grid.values.copy_(torch.randn(f.emission_grid.values.shape, generator=gen,
                                                 dtype=torch.float64) - 1.0)
        f.sdf_field.grid.values.add_(0.05 * torch.randn(f.sdf_field.grid.values.shape, generator=gen,
                                                        dtype=torch.float64))
        for rf in (f.radiance_s, f.radiance_e):
            rf.head[2].bias.fill_(-1.0)
        f.envmap.mu.normal_(0.0, 0.5, generator=gen)
    return f


def tiny_problem(seed: int = 0, n_rays: int = 4):
    """Rays aimed at the sphere, targets, LTS points and certain flags."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cam = np.array([0.3, -2.5, 0.8])
    aim = rng.uniform(-0.3, 0.3, size=(n_rays, 3))
    d = cam - aim
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    on = np.arange(n_rays) % 2 == 0
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    rays = make_rays(t(np.repeat(cam[None], n_rays, 0)), t(d), (t([-1.0] * 3), t([1.0] * 3)),
                     on=torch.as_tensor(on))
    target = t(rng.uniform(0.1, 0.9, size=(n_rays, 3)))
    alpha = t(np.where(np.arange(n_rays) == n_rays - 1, 0.0, 1.0))
    # shading points just above the floor and just below the ceiling, alternating
    side = np.where(np.arange(n_rays) % 2 == 0, -1.0, 1.0)
    xy = rng.uniform(-0.4, 0.4, size=(n_rays, 2))
    x = t(np.column_stack([xy, side * (SLAB - 0.03)]))
    wo = t(rng.normal(size=(n_rays, 3)) + np.column_stack([np.zeros((n_rays, 2)), -2.0 * side]))
    wo = wo / wo.norm(dim=-1, keepdim=True)
    pts = LtsPoints(x, wo, torch.ones(n_rays, dtype=torch.bool), torch.as_tensor(np.arange(n_rays) % 2 == 1),
                    np.arange(n_rays, dtype=np.int64))
    return TrainBatch(rays, target, alpha), pts


LOSSES = ("render", "lts_S", "lts_E_basic", "lts_E_progressive", "supp", "smooth")


def make_loss(name: str, fields, batch: TrainBatch, pts: LtsPoints, *, n_samples: int = 16,
              n_dirs: int = 8, n_secondary: int = 16, lambda_l: float = 1.0, lambda_r: float = 0.1):
    """Closure evaluating one loss term deterministically.

    Stop-gradient operands are frozen at their values from the first call,
    which is the one that produces the analytic gradient.
    """
    sampler = CounterSampler(7)
    pinned: dict = {}
    kw = dict(n_samples=n_secondary, sampler=sampler, step=0)

    def fn():
        if name == "render":
            return rendering_loss(batch, fields, 0.1, n_samples=n_samples, sampler=sampler)[0]
        if name == "lts_S":
            return lts_loss_S(pts, fields, n_dirs, **kw)
        if name == "lts_E_basic":
            return lts_loss_E(pts, fields, n_dirs, progressive=False, **kw)
        if name == "lts_E_progressive":
            return lts_loss_E(pts, fields, n_dirs, progressive=True, lambda_l=lambda_l, lambda_r=lambda_r,
                              pinned=pinned, **kw)
        if name == "supp":
            m = march(batch.rays, fields, n_samples, sampler=sampler)
            return suppression_loss(m, fields, torch.ones(len(batch.rays), dtype=torch.bool))
        if name == "smooth":
            return smoothing_loss(pts.x, fields, sampler=sampler)
        raise ValueError(f"unknown loss {name!r}")

    return fn


def parameter_classes(fields: FieldSet) -> dict[str, torch.nn.Parameter]:
    return {
        "sdf_grid": fields.sdf_field.grid.values, "sharpness": fields.sdf_field.log_s,
        "brdf_grid": fields.brdf_grid.values, "emission_grid": fields.emission_grid.values,
        "radiance_s_grid": fields.radiance_s.grid.values, "radiance_s_head": fields.radiance_s.head[0].weight,
        "radiance_e_grid": fields.radiance_e.grid.values, "radiance_e_head": fields.radiance_e.head[0].weight,
        "env_mu": fields.envmap.mu, "env_lambda": fields.envmap.lam, "env_xi": fields.envmap.xi,
        "tonemap_head": fields.tonemapper.head[0].weight,
    }


@dataclass
class GradReport:
    errors: dict[str, float]         # class -> max relative error
    checked: dict[str, int]          # class -> number of entries compared

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def analytic_grads(fn, params) -> dict[str, torch.Tensor]:
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    return {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for k, p in params.items()}


def gradient_check(fields: FieldSet, fn, n_params: int = 6, *, seed: int = 0, rel_floor: float = 1e-6,
                   classes=None) -> GradReport:
    """Compare autograd to central differences on random entries of each parameter class.

    Entries are chosen among those with nonzero analytic gradient when
    possible; the step is ``1e-6 * max(1, |theta|)``.  The relative error of
    an entry is ``|g - g_fd| / max(|g|, |g_fd|, rel_floor)``.
    """
    params = parameter_classes(fields)
    if classes is not None:
        params = {k: v for k, v in params.items() if k in classes}
    grads = analytic_grads(fn, params)
    rng = np.random.Generator(np.random.PCG64(seed))
    errors, checked = {}, {}
    for name, p in params.items():
        g = grads[name].reshape(-1)
        nz = torch.nonzero(g).reshape(-1).numpy()
        pool = nz if nz.size else np.arange(g.numel())
        idx = rng.choice(pool, size=min(n_params, pool.size), replace=False)
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in idx:
            orig = float(flat[i])
            h = 1e-6 * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            a = float(g[i])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), rel_floor))
        errors[name] = worst
        checked[name] = int(idx.size)
    return GradReport(errors, checked)


def run_suite(seed: int = 0, n_params: int = 4) -> dict[str, GradReport]:
    """Gradient check of every loss term on the tiny configuration."""
    fields = tiny_fields(seed)
    batch, pts = tiny_problem(seed)
    return {name: gradient_check(fields, make_loss(name, fields, batch, pts), n_params, seed=seed)
            for name in LOSSES}
