"""Color-space math: the clip+gamma tone curve, its inverse, and RGB/HSV.

All public functions accept numpy arrays or torch tensors with a trailing
channel axis of size 3 (scalars are accepted by the gamma curves) and return
the same kind of object they were given.  The ``tau`` helper is the
unvalidated, differentiable variant used inside the renderer.
"""
from __future__ import annotations

import numpy as np
import torch

SRGB_THRESHOLD = 0.0031308
SRGB_LINEAR_SLOPE = 12.92


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _restore(t: torch.Tensor, was_numpy: bool):
    return t.numpy() if was_numpy else t


def tau(c: torch.Tensor) -> torch.Tensor:
    """Clip to [0, 1] then apply the IEC 61966-2-1 curve (no validation)."""
    c = c.clamp(0.0, 1.0)
    # keep the pow branch away from 0 so its gradient stays finite
    high = 1.055 * c.clamp_min(SRGB_THRESHOLD) ** (1.0 / 2.4) - 0.055
    return torch.where(c <= SRGB_THRESHOLD, SRGB_LINEAR_SLOPE * c, high)


def linear_to_srgb(c):
    c, was_np = _as_tensor(c)
    if torch.isnan(c).any() or (c < 0).any():
        raise ValueError("linear_to_srgb expects finite, nonnegative input")
    return _restore(tau(c), was_np)


def srgb_to_linear(c):
    c, was_np = _as_tensor(c)
    if torch.isnan(c).any() or (c < 0).any() or (c > 1).any():
        raise ValueError("srgb_to_linear expects values in [0, 1]")
    low = c / SRGB_LINEAR_SLOPE
    high = ((c.clamp_min(0.04045) + 0.055) / 1.055) ** 2.4
    return _restore(torch.where(c <= SRGB_LINEAR_SLOPE * SRGB_THRESHOLD, low, high), was_np)


def _hsv_from_rgb(c: torch.Tensor) -> torch.Tensor:
    r, g, b = c.unbind(-1)
    v, _ = c.max(dim=-1)
    mn, _ = c.min(dim=-1)
    chroma = v - mn
    safe = torch.where(chroma > 0, chroma, torch.ones_like(chroma))
    # ties resolve in R, G, B order
    hp = torch.where(
        r == v,
        (g - b) / safe,
        torch.where(g == v, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hp = torch.where(chroma > 0, hp, torch.zeros_like(hp))
    h = torch.remainder(hp / 6.0, 1.0)
    # remainder can round up to exactly 1.0 for tiny negative inputs
    h = torch.where(h >= 1.0, torch.zeros_like(h), h)
    s = torch.where(v > 0, chroma / torch.where(v > 0, v, torch.ones_like(v)), torch.zeros_like(v))
    return torch.stack([h, s, v], dim=-1)


def _rgb_from_hsv(c: torch.Tensor) -> torch.Tensor:
    h, s, v = c.unbind(-1)
    chroma = s * v
    hp = h * 6.0
    x = chroma * (1.0 - torch.abs(torch.remainder(hp, 2.0) - 1.0))
    m = v - chroma
    zero = torch.zeros_like(chroma)
    sector = torch.floor(hp).clamp(0, 5).long()
    choices = torch.stack(
        [
            torch.stack([chroma, x, zero], -1),
            torch.stack([x, chroma, zero], -1),
            torch.stack([zero, chroma, x], -1),
            torch.stack([zero, x, chroma], -1),
            torch.stack([x, zero, chroma], -1),
            torch.stack([chroma, zero, x], -1),
        ],
        dim=-2,
    )
    idx = sector[..., None, None].expand(*sector.shape, 1, 3)
    rgb = torch.gather(choices, -2, idx).squeeze(-2)
    return rgb + m[..., None]


def rgb_to_hsv(c):
    """RGB (linear, unbounded) to HSV with an unbounded value channel."""
    c, was_np = _as_tensor(c)
    if c.shape[-1] != 3:
        raise ValueError("expected a trailing RGB axis of size 3")
    if torch.isnan(c).any() or (c < 0).any():
        raise ValueError("rgb_to_hsv expects finite, nonnegative input")
    return _restore(_hsv_from_rgb(c), was_np)


def hsv_to_rgb(c):
    c, was_np = _as_tensor(c)
    if c.shape[-1] != 3:
        raise ValueError("expected a trailing HSV axis of size 3")
    h, s, v = c.unbind(-1)
    if (h < 0).any() or (h >= 1).any() or (s < 0).any() or (s > 1).any() or (v < 0).any():
        raise ValueError("hsv_to_rgb expects h in [0,1), s in [0,1], v >= 0")
    return _restore(_rgb_from_hsv(c), was_np)
