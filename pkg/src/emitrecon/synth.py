"""Synthetic on/off datasets rendered with the reference path tracer."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .camera import Camera, spiral_poses
from .colorspace import linear_to_srgb
from .io import Dataset, Frame, save_dataset, to_uint8
from .oracle import AnalyticScene, PathTraceConfig, coverage_and_emitter_mask, render_view

BOX_VIEW = dict(target=(0.0, 0.0, -0.3), radius=4.0, elevation=(20.0, 60.0),
                azimuth=(190.0, 260.0), fov=0.75)


def ldr_from_hdr(hdr: np.ndarray) -> np.ndarray:
    return linear_to_srgb(np.clip(hdr, 0.0, 1.0))


def _quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float32) / 255.0


def synthesize_dataset(scene: AnalyticScene, n_views: int, resolution: int | tuple = 64,
                       out_dir=None, *, cfg: PathTraceConfig | None = None,
                       emission_spp: int | None = None, target=BOX_VIEW["target"],
                       radius: float = BOX_VIEW["radius"], elevation=BOX_VIEW["elevation"],
                       azimuth=BOX_VIEW["azimuth"], fov: float = BOX_VIEW["fov"]) -> Dataset:
    """Render a lights-on and a lights-off image per view, plus HDR and emitter masks.

    The lights-on image is the environment-lit render plus the radiance
    contributed by the emitters, each estimated with its own sample budget
    (``emission_spp`` defaults to ``cfg.spp``).  Alpha is the primary-ray
    opacity; masks mark pixels whose primary weight falls mostly on emitters.
    """
    cfg = cfg or PathTraceConfig()
    w, h = (resolution, resolution) if isinstance(resolution, int) else resolution
    poses = spiral_poses(n_views, target, radius, elevation=elevation, azimuth=azimuth)
    em_cfg = replace(cfg, spp=emission_spp or cfg.spp, seed=cfg.seed + 1)
    frames, masks = [], {}
    for v, c2w in enumerate(poses):
        cam = Camera.from_fov(c2w, w, h, fov)
        off = render_view(scene, cam, cfg, view_index=v, emission=False, env=True, background=True)
        if scene.emission_regions:
            emit = render_view(scene, cam, em_cfg, view_index=v, emission=True, env=False)
        else:
            emit = np.zeros_like(off)
        on = off + emit
        alpha, mask = coverage_and_emitter_mask(scene, cam, cfg.n_samples)
        masks[v] = mask
        for flag, hdr in ((True, on), (False, off)):
            frames.append(Frame(image=_quantize(ldr_from_hdr(hdr)), c2w=c2w, on=flag, view=v,
                                alpha=_quantize(alpha), hdr=hdr.astype(np.float32)))
    ds = Dataset(frames, w, h, fov, (tuple(scene.bbox_min), tuple(scene.bbox_max)), masks)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds
