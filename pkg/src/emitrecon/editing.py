"""Re-lighting: select emitters through image masks, recolor them, update radiance."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .camera import Camera, project
from .colorspace import hsv_to_rgb, rgb_to_hsv
from .io import read_mask
from .renderer import (HEMISPHERE_SAMPLES, SECONDARY_SAMPLES, CounterSampler, RayBatch,
                       decompose_illumination, expected_surface_point, lhat_E_from, march,
                       reflection_integrals)


@dataclass
class EditSource:
    mask: np.ndarray   # (H, W), nonzero = selected
    hue: float
    saturation: float
    intensity: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not 0.0 <= self.hue < 1.0 or not 0.0 <= self.saturation <= 1.0:
            raise ValueError("hue must lie in [0, 1) and saturation in [0, 1]")
        if self.intensity < 0:
            raise ValueError("intensity must be nonnegative")


@dataclass
class EditSpec:
    sources: list[EditSource]
    K: np.ndarray      # (3, 3)
    Rt: np.ndarray     # (3, 4), world -> camera (x right, y down, z forward)
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.Rt = np.asarray(self.Rt, dtype=np.float64)
        for s in self.sources:
            if s.mask.shape != (self.height, self.width):
                raise ValueError("mask resolution does not match the camera")

    @classmethod
    def for_camera(cls, camera: Camera, sources: list[EditSource]) -> "EditSpec":
        return cls(sources, camera.intrinsics, camera.world_to_camera_cv, camera.width, camera.height)

    def scaled(self, factor: float) -> "EditSpec":
        return EditSpec([EditSource(s.mask, s.hue, s.saturation, s.intensity * factor)
                         for s in self.sources], self.K, self.Rt, self.width, self.height)


def load_edit_spec(path) -> EditSpec:
    """JSON: {camera: {K, R, t, width, height}, sources: [{mask_path, hue, saturation, intensity}]}."""
    path = Path(path)
    d = json.loads(path.read_text())
    cam = d["camera"]
    R = np.asarray(cam["R"], dtype=np.float64)
    t = np.asarray(cam["t"], dtype=np.float64).reshape(3, 1)
    sources = []
    for s in d["sources"]:
        mask_path = Path(s["mask_path"])
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        sources.append(EditSource(read_mask(mask_path), float(s["hue"]), float(s["saturation"]),
                                  float(s["intensity"])))
    return EditSpec(sources, cam["K"], np.concatenate([R, t], axis=1), int(cam["width"]), int(cam["height"]))


def bilinear(mask: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear mask lookup at pixel coordinates (pixel i covers [i, i + 1))."""
    h, w = mask.shape
    x = np.clip(uv[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(uv[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return ((1 - fx) * (1 - fy) * mask[y0, x0] + fx * (1 - fy) * mask[y0, x1]
            + (1 - fx) * fy * mask[y1, x0] + fx * fy * mask[y1, x1])


def hits_for_points(points: np.ndarray, spec: EditSpec) -> list[np.ndarray]:
    """Per source, whether each world point projects inside its mask."""
    uv, depth = project(points, spec.K, spec.Rt)
    inside = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < spec.width) & (uv[:, 1] >= 0) \
        & (uv[:, 1] < spec.height)
    out = []
    for s in spec.sources:
        hit = np.zeros(len(points), dtype=bool)
        if inside.any():
            hit[inside] = bilinear(s.mask, uv[inside]) > 0
        out.append(hit)
    return out


@dataclass
class MatchResult:
    ray_ids: np.ndarray        # (R,) ids of the candidate (uncertain) rays
    points: np.ndarray         # (R, 3) expected surface points
    hits: list[np.ndarray]     # per source, (R,) bool

    def hit_ids(self, j: int) -> np.ndarray:
        return self.ray_ids[self.hits[j]]


@torch.no_grad()
def match_rays(rays: RayBatch, fields, spec: EditSpec, *, n_samples: int = 100,
               chunk: int = 4096) -> MatchResult:
    """Project the expected surface point of every candidate ray into the masks."""
    pts = []
    for s in range(0, len(rays), chunk):
        m = march(rays.select(slice(s, s + chunk)), fields, n_samples, jitter=False)
        pts.append(expected_surface_point(m))
    points = torch.cat(pts).double().numpy() if pts else np.zeros((0, 3))
    return MatchResult(rays.ids.numpy().copy(), points, hits_for_points(points, spec))


def edit_emission(e, hue: float, saturation: float, intensity: float):
    """Replace hue and saturation of E, scale its value channel by ``intensity``."""
    t = torch.as_tensor(e)
    hsv = rgb_to_hsv(t.clamp_min(0.0))
    v = hsv[..., 2] * intensity
    new = torch.stack([torch.full_like(v, hue), torch.full_like(v, saturation), v], -1)
    return hsv_to_rgb(new)


@dataclass
class EditedEmission:
    """E(x) with replacements inside spheres around the matched surface points.

    A query point takes the edit of the first source whose sphere
    (radius one voxel) contains it; all other points keep E(x) untouched.
    """

    fields: object
    spec: EditSpec
    centers: list[torch.Tensor]   # per source, (C_j, 3)
    radius: float
    records: dict = field(default_factory=dict)
    _trees: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._trees = [cKDTree(c.detach().double().numpy()) if c.shape[0] else None for c in self.centers]

    @classmethod
    def from_match(cls, fields, spec: EditSpec, match: MatchResult, radius: float | None = None):
        radius = fields.voxel_size if radius is None else radius
        centers = []
        for hit in match.hits:
            c = match.points[hit]
            if len(c):
                # merge near-duplicates to keep the distance test cheap
                c = np.unique(np.round(c / (0.25 * radius)), axis=0) * (0.25 * radius)
            centers.append(torch.as_tensor(c, dtype=fields.dtype).reshape(-1, 3))
        records = {j: match.hit_ids(j) for j in range(len(spec.sources))}
        return cls(fields, spec, centers, float(radius), records)

    def source_index(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.detach().reshape(-1, 3).cpu().double().numpy()
        idx = np.full(flat.shape[0], -1, dtype=np.int64)
        for j in reversed(range(len(self.centers))):
            tree = self._trees[j]
            if tree is None:
                continue
            dist, _ = tree.query(flat, k=1, distance_upper_bound=self.radius * (1 + 1e-12))
            idx[dist <= self.radius] = j
        return torch.as_tensor(idx).reshape(x.shape[:-1])

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        e = self.fields.emission(x)
        idx = self.source_index(x.detach())
        if not bool((idx >= 0).any()):
            return e
        out = e.clone()
        for j, src in enumerate(self.spec.sources):
            sel = idx == j
            if bool(sel.any()):
                out[sel] = edit_emission(e[sel].detach(), src.hue, src.saturation, src.intensity).to(e.dtype)
        return out


class _EditedView:
    """Scene-protocol wrapper replacing E(x) and, optionally, L_o^E by edited emission."""

    def __init__(self, fields, emission_fn, emission_as_radiance: bool = False):
        self._f = fields
        self._e = emission_fn
        self._direct = emission_as_radiance

    def __getattr__(self, name):
        return getattr(self._f, name)

    def emission(self, x):
        return self._e(x)

    def radiance(self, x, w, which):
        if which == "E" and self._direct:
            return self._e(x)
        return self._f.radiance(x, w, which)


@dataclass
class FinetuneResult:
    losses: list[float]
    delta_norm: float


def finetune_radiance(fields, emission_fn, rays: RayBatch, *, steps: int = 200, batch_rays: int = 256,
                      points_per_step: int = 128, n_dirs: int = 32, n_secondary: int = SECONDARY_SAMPLES,
                      n_samples: int = 100, lr: float = 1e-2, seed: int = 0,
                      min_weight: float = 0.0) -> FinetuneResult:
    """Minimise sum ||L_o^E - sg(Lhat_o^E)||^2 with Lhat built from the edited emission.

    Only the parameters of ``fields.radiance_e`` change; everything else is
    frozen and is checked to receive no gradient.
    """
    from .training.losses import sample_lts_points

    trainable = list(fields.radiance_e.parameters())
    train_ids = {id(p) for p in trainable}
    frozen = [p for p in fields.parameters() if id(p) not in train_ids]
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
        p.grad = None
    before = torch.cat([p.detach().reshape(-1).clone() for p in trainable])
    opt = torch.optim.Adam(trainable, lr=lr)
    sampler = CounterSampler(seed)
    view = _EditedView(fields, emission_fn)
    rng = np.random.Generator(np.random.PCG64(seed))
    losses = []
    try:
        for step in range(steps):
            ids = rng.choice(len(rays), size=min(batch_rays, len(rays)), replace=False)
            sub = rays.select(torch.as_tensor(np.sort(ids)))
            with torch.no_grad():
                m = march(sub, fields, n_samples, sampler=sampler, step=step)
            pts = sample_lts_points(m, fields, sub, torch.zeros(len(sub), dtype=torch.bool),
                                    sampler=sampler, step=step)
            if len(pts) == 0:
                continue
            pts_x, pts_wo, keys = pts.x[:points_per_step], pts.wo[:points_per_step], pts.keys[:points_per_step]
            with torch.no_grad():
                refl = reflection_integrals(pts_x, pts_wo, view, n_dirs, n_samples=n_secondary,
                                            sampler=sampler, step=step, point_keys=keys, strict=False,
                                            want=("E",), min_weight=min_weight)
                target = lhat_E_from(refl, view.emission(pts_x), "full") * refl.valid[:, None]
            lo = fields.radiance(pts_x, pts_wo, "E")
            loss = ((lo - target.detach()) ** 2).sum(-1).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if any(p.grad is not None and bool(p.grad.ne(0).any()) for p in frozen):
                raise AssertionError("a frozen parameter received gradient")
            opt.step()
            losses.append(float(loss.detach()))
    finally:
        for p, f in zip(frozen, flags):
            p.requires_grad_(f)
    after = torch.cat([p.detach().reshape(-1) for p in trainable])
    return FinetuneResult(losses, float((after - before).norm()))


@torch.no_grad()
def direct_relight(fields, emission_fn, rays: RayBatch, n_dirs: int = HEMISPHERE_SAMPLES, **kw):
    """Re-lit color using only direct light from the edited emitters plus env terms.

    Returns ``(color, buffers)`` where the emission-reflection buffer
    integrates edited emission composited along secondary rays instead of the
    learned L_o^E field.
    """
    view = _EditedView(fields, emission_fn, emission_as_radiance=True)
    bufs = decompose_illumination(rays, view, n_dirs, emission_fn=emission_fn, **kw)
    color = bufs["env_direct"] + bufs["env_indirect"] + bufs["emission"] + bufs["emission_reflection"]
    return color, bufs


@torch.no_grad()
def relit_buffers(fields, emission_fn, rays: RayBatch, n_dirs: int = HEMISPHERE_SAMPLES, **kw):
    """Decomposition buffers after an edit (learned L_o^E, edited E on primary rays)."""
    return decompose_illumination(rays, _EditedView(fields, emission_fn), n_dirs, emission_fn=emission_fn, **kw)
