"""Learnable scene representations on dense voxel grids.

Every field is a plain ``torch.nn.Module``; gradients come from autograd.
The grid sampler's reverse-mode rule is also available in closed form
(:func:`sample_grid_grad`) for verification.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .envmap import EnvMap


class DegenerateNormalError(ValueError):
    pass


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class VoxelGrid(nn.Module):
    """Dense grid of ``channels`` values at the vertices of a regular lattice.

    Vertex (i, j, k) sits at ``bbox_min + (i, j, k) * voxel_size`` so the
    lattice spans the bounding box exactly; queries outside are clamped to
    the edge.
    """

    def __init__(self, resolution, bbox_min, bbox_max, channels: int, *,
                 values: torch.Tensor | None = None, dtype=torch.float32):
        super().__init__()
        resolution = tuple(int(r) for r in resolution)
        if len(resolution) != 3 or min(resolution) < 2:
            raise ValueError("resolution must be three integers >= 2")
        lo = torch.as_tensor(bbox_min, dtype=dtype)
        hi = torch.as_tensor(bbox_max, dtype=dtype)
        if not bool((lo < hi).all()):
            raise ValueError("bbox min must be below max on every axis")
        self.resolution = resolution
        self.channels = int(channels)
        self.register_buffer("bbox_min", lo)
        self.register_buffer("bbox_max", hi)
        if values is None:
            values = torch.zeros(*resolution, channels, dtype=dtype)
        if tuple(values.shape) != (*resolution, channels):
            raise ValueError("values must have shape (nx, ny, nz, channels)")
        self.values = nn.Parameter(values.to(dtype))

    @property
    def voxel_size(self) -> torch.Tensor:
        res = torch.as_tensor(self.resolution, dtype=self.bbox_min.dtype)
        return (self.bbox_max - self.bbox_min) / (res - 1)

    def vertex_positions(self) -> torch.Tensor:
        axes = [torch.linspace(float(self.bbox_min[d]), float(self.bbox_max[d]), self.resolution[d],
                               dtype=self.bbox_min.dtype) for d in range(3)]
        return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)

    def corners(self, x: torch.Tensor, with_grad: bool = False):
        """Flat corner indices, trilinear weights and (optionally) d weight / dx."""
        res = torch.as_tensor(self.resolution, dtype=x.dtype)
        scale = (res - 1) / (self.bbox_max - self.bbox_min)
        u = (x - self.bbox_min) * scale
        inside = (u >= 0) & (u <= res - 1)
        u = torch.minimum(u.clamp_min(0.0), res - 1)
        i0 = torch.minimum(torch.floor(u), res - 2)
        f = u - i0
        i0 = i0.long()
        nx, ny, nz = self.resolution
        idx, wts, dws = [], [], []
        g = 1.0 - f
        for cx in (0, 1):
            wx = f[..., 0] if cx else g[..., 0]
            for cy in (0, 1):
                wy = f[..., 1] if cy else g[..., 1]
                for cz in (0, 1):
                    wz = f[..., 2] if cz else g[..., 2]
                    idx.append(((i0[..., 0] + cx) * ny + (i0[..., 1] + cy)) * nz + (i0[..., 2] + cz))
                    wts.append(wx * wy * wz)
                    if with_grad:
                        dws.append(torch.stack([(2 * cx - 1) * wy * wz,
                                                (2 * cy - 1) * wx * wz,
                                                (2 * cz - 1) * wx * wy], dim=-1))
        idx = torch.stack(idx, dim=-1)
        wts = torch.stack(wts, dim=-1)
        if not with_grad:
            return idx, wts, None
        dws = torch.stack(dws, dim=-2) * (scale * inside.to(x.dtype))[..., None, :]
        return idx, wts, dws

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # grid_sample with align_corners/border padding is exactly the vertex
        # interpolation above with clamp-to-edge; it is much faster than gathering
        shape = x.shape[:-1]
        u = 2.0 * (x.reshape(1, 1, 1, -1, 3) - self.bbox_min) / (self.bbox_max - self.bbox_min) - 1.0
        vol = self.values.permute(3, 2, 1, 0).unsqueeze(0)  # (1, C, nz, ny, nx)
        out = F.grid_sample(vol, u.to(vol.dtype), mode="bilinear", padding_mode="border",
                            align_corners=True)
        return out.reshape(self.channels, -1).t().reshape(*shape, self.channels)

    def gather(self, x: torch.Tensor) -> torch.Tensor:
        """Reference interpolation through explicit corner weights."""
        idx, wts, _ = self.corners(x)
        flat = self.values.reshape(-1, self.channels)
        return (flat[idx] * wts[..., None]).sum(-2)

    def sample_with_grad(self, x: torch.Tensor):
        """Values (..., C) and spatial gradient (..., C, 3) of the interpolant."""
        idx, wts, dws = self.corners(x, with_grad=True)
        vals = self.values.reshape(-1, self.channels)[idx]  # (..., 8, C)
        out = (vals * wts[..., None]).sum(-2)
        grad = torch.einsum("...kc,...kd->...cd", vals, dws)
        return out, grad


def sample_grid(grid: VoxelGrid, x) -> np.ndarray:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=grid.values.dtype)
    with torch.no_grad():
        return grid(x).double().numpy()


def sample_grid_grad(grid: VoxelGrid, x, upstream):
    """Closed-form reverse-mode rule of trilinear interpolation at one point.

    Returns ``(corner_index, corner_grad, grad_x)``: flat indices of the 8
    corner vertices, the gradient each receives (8, C), and the gradient with
    respect to the query position (3,).
    """
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=torch.float64)
    up = np.asarray(upstream, dtype=np.float64).reshape(grid.channels)
    g64 = VoxelGrid(grid.resolution, grid.bbox_min.double(), grid.bbox_max.double(), grid.channels,
                    values=grid.values.detach().double(), dtype=torch.float64)
    with torch.no_grad():
        idx, wts, dws = g64.corners(xt, with_grad=True)
        vals = g64.values.reshape(-1, grid.channels)[idx].numpy()
    corner_grad = wts.numpy()[:, None] * up[None, :]
    grad_x = np.einsum("kc,c,kd->d", vals, up, dws.numpy())
    return idx.numpy(), corner_grad, grad_x


# --- spherical harmonics, degree 2 -----------------------------------------

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)


def sh_basis(d: torch.Tensor) -> torch.Tensor:
    x, y, z = d.unbind(-1)
    return torch.stack([
        torch.full_like(x, _SH_C0),
        -_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x,
        _SH_C2[0] * x * y, _SH_C2[1] * y * z, _SH_C2[2] * (2 * z * z - x * x - y * y),
        _SH_C2[3] * x * z, _SH_C2[4] * (x * x - y * y),
    ], dim=-1)


class SdfField(nn.Module):
    def __init__(self, grid: VoxelGrid, sharpness: float = 30.0):
        super().__init__()
        if sharpness <= 0:
            raise ValueError("sharpness must be positive")
        self.grid = grid
        self.log_s = nn.Parameter(torch.tensor(math.log(sharpness), dtype=grid.values.dtype))

    @property
    def sharpness(self) -> torch.Tensor:
        return self.log_s.exp()

    def forward(self, x):
        return self.grid(x)[..., 0]

    def with_gradient(self, x):
        v, g = self.grid.sample_with_grad(x)
        return v[..., 0], g[..., 0, :]


def sdf_value(field: SdfField, x) -> float:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=field.grid.values.dtype)
    with torch.no_grad():
        return float(field(x))


def sdf_normal(field: SdfField, x) -> np.ndarray:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=field.grid.values.dtype)
    with torch.no_grad():
        _, g = field.with_gradient(x)
    g = g.double().numpy()
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    if (norm < 1e-8).any():
        raise DegenerateNormalError("SDF gradient vanishes at the query point")
    return g / norm


class RadianceField(nn.Module):
    """Feature grid + SH direction encoding + two-layer head, softplus output."""

    def __init__(self, grid: VoxelGrid, hidden: int = 64, sh_degree: int = 2,
                 out_bias: float = -6.0, seed: int = 0):
        super().__init__()
        if sh_degree != 2:
            raise ValueError("only degree-2 spherical harmonics are supported")
        self.grid = grid
        dtype = grid.values.dtype
        n_in = grid.channels + 9
        gen = torch.Generator().manual_seed(seed)
        self.head = nn.Sequential(nn.Linear(n_in, hidden, dtype=dtype), nn.ReLU(),
                                  nn.Linear(hidden, 3, dtype=dtype))
        with torch.no_grad():
            for layer in (self.head[0], self.head[2]):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
                layer.bias.zero_()
            self.head[2].bias.fill_(out_bias)

    def preactivation(self, x, w):
        feats = self.grid(x)
        return self.head(torch.cat([feats, sh_basis(w)], dim=-1))

    def forward(self, x, w):
        return F.softplus(self.preactivation(x, w))


def eval_radiance(field: RadianceField, x, w) -> np.ndarray:
    dtype = field.grid.values.dtype
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)
    w = torch.as_tensor(np.asarray(w, dtype=np.float64), dtype=dtype)
    with torch.no_grad():
        return field(x, w).double().numpy()


class ToneMapper(nn.Module):
    """Learnable map from HDR linear color to [0, 1]^3.

    The encoding octaves are ``pe_base * 2^k``.  The default base keeps the
    slowest octave monotone well past the LDR range, so the curve does not
    fold back on HDR values brighter than anything seen in training.
    """

    def __init__(self, pe_frequencies: int = 4, hidden: int = 32, seed: int = 0, dtype=torch.float32,
                 pe_base: float = math.pi / 8):
        super().__init__()
        self.pe_frequencies = int(pe_frequencies)
        self.pe_base = float(pe_base)
        n_in = 3 * (1 + 2 * self.pe_frequencies)
        gen = torch.Generator().manual_seed(seed)
        self.head = nn.Sequential(nn.Linear(n_in, hidden, dtype=dtype), nn.ReLU(),
                                  nn.Linear(hidden, 3, dtype=dtype))
        with torch.no_grad():
            for layer in (self.head[0], self.head[2]):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
                layer.bias.zero_()

    def encode(self, c):
        freqs = (2.0 ** torch.arange(self.pe_frequencies, dtype=c.dtype)) * self.pe_base
        ang = c[..., None] * freqs  # (..., 3, K)
        return torch.cat([c, torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)

    def forward(self, c):
        return torch.sigmoid(self.head(self.encode(c)))


def eval_tonemap(m: ToneMapper, c) -> np.ndarray:
    dtype = m.head[0].weight.dtype
    c = torch.as_tensor(np.asarray(c, dtype=np.float64), dtype=dtype)
    with torch.no_grad():
        return m(c).double().numpy()


class FieldSet(nn.Module):
    """Every learnable scene quantity behind one object.

    The renderer only relies on the methods ``sdf``, ``sdf_with_gradient``,
    ``sharpness``, ``brdf``, ``emission``, ``radiance``, ``env`` and
    ``tonemap``, so analytic stand-ins can be substituted in tests.
    """

    def __init__(self, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0), resolution=64, *,
                 features: int = 12, radiance_hidden: int = 64, tonemap_frequencies: int = 4,
                 tonemap_hidden: int = 32, env_lobes: int = 48, sharpness: float = 30.0,
                 emission_init: float = 1e-3, feature_std: float = 0.1, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        lo = torch.as_tensor(bbox_min, dtype=dtype)
        hi = torch.as_tensor(bbox_max, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)

        sdf_grid = VoxelGrid(resolution, lo, hi, 1, dtype=dtype)
        with torch.no_grad():
            pos = sdf_grid.vertex_positions()
            center = 0.5 * (lo + hi)
            radius = 0.5 * float((hi - lo).min())
            sdf_grid.values.copy_(((pos - center).norm(dim=-1) - radius)[..., None])
        self.sdf_field = SdfField(sdf_grid, sharpness)

        self.brdf_grid = VoxelGrid(resolution, lo, hi, 5, dtype=dtype)
        em = torch.full((*resolution, 3), _inv_softplus(emission_init), dtype=dtype)
        self.emission_grid = VoxelGrid(resolution, lo, hi, 3, values=em, dtype=dtype)

        def feature_grid():
            v = torch.randn(*resolution, features, generator=gen, dtype=dtype) * feature_std
            return VoxelGrid(resolution, lo, hi, features, values=v, dtype=dtype)

        self.radiance_s = RadianceField(feature_grid(), hidden=radiance_hidden, seed=seed + 1)
        self.radiance_e = RadianceField(feature_grid(), hidden=radiance_hidden, seed=seed + 2)
        self.envmap = EnvMap(env_lobes, seed=seed + 3, dtype=dtype)
        self.tonemapper = ToneMapper(tonemap_frequencies, tonemap_hidden, seed=seed + 4, dtype=dtype)

    # -- scene protocol -----------------------------------------------------
    @property
    def bbox(self):
        g = self.sdf_field.grid
        return g.bbox_min, g.bbox_max

    @property
    def dtype(self):
        return self.sdf_field.grid.values.dtype

    @property
    def voxel_size(self) -> float:
        return float(self.sdf_field.grid.voxel_size.min())

    @property
    def sharpness(self):
        return self.sdf_field.sharpness

    def sdf(self, x):
        return self.sdf_field(x)

    def sdf_with_gradient(self, x):
        return self.sdf_field.with_gradient(x)

    def brdf(self, x):
        v = torch.sigmoid(self.brdf_grid(x))
        return v[..., :3], v[..., 3], v[..., 4]

    def emission(self, x):
        return F.softplus(self.emission_grid(x))

    def radiance(self, x, w, which: str):
        if which == "S":
            return self.radiance_s(x, w)
        if which == "E":
            return self.radiance_e(x, w)
        raise ValueError(f"unknown radiance field {which!r}")

    def env(self, w):
        return self.envmap(w)

    def tonemap(self, c):
        return self.tonemapper(c)

    # -- parameter groups ---------------------------------------------------
    def grid_parameters(self):
        return [self.sdf_field.grid.values, self.brdf_grid.values, self.emission_grid.values,
                self.radiance_s.grid.values, self.radiance_e.grid.values]

    def head_parameters(self):
        grids = {id(p) for p in self.grid_parameters()}
        return [p for p in self.parameters() if id(p) not in grids]

    def project(self):
        """Restore constraints after an optimizer step."""
        self.envmap.project()


class ParameterStore:
    """Flat view over every parameter of a module, in registration order."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.layout: OrderedDict[str, tuple[int, tuple[int, ...]]] = OrderedDict()
        offset = 0
        for name, p in module.named_parameters():
            self.layout[name] = (offset, tuple(p.shape))
            offset += p.numel()
        self.size = offset

    def _params(self):
        return dict(self.module.named_parameters())

    def flatten(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self._params().values()])

    def flat_grad(self) -> torch.Tensor:
        out = []
        for p in self._params().values():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            out.append(g.detach().reshape(-1))
        return torch.cat(out)

    def views(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        if flat.numel() != self.size:
            raise ValueError("flat vector does not match the parameter layout")
        return {name: flat[off:off + int(np.prod(shape))].view(shape)
                for name, (off, shape) in self.layout.items()}

    @torch.no_grad()
    def assign(self, flat: torch.Tensor) -> None:
        params = self._params()
        for name, view in self.views(flat).items():
            params[name].copy_(view)

    def zero_grad(self) -> None:
        for p in self._params().values():
            p.grad = None

    def slice(self, name: str) -> slice:
        off, shape = self.layout[name]
        return slice(off, off + int(np.prod(shape)))
