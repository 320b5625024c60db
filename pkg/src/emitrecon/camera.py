"""Pinhole cameras with camera-to-world poses (OpenGL axes: right, up, backward)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    c2w: np.ndarray  # (4, 4)
    width: int
    height: int
    focal: float

    @classmethod
    def from_fov(cls, c2w, width: int, height: int, camera_angle_x: float) -> "Camera":
        return cls(np.asarray(c2w, dtype=np.float64), int(width), int(height),
                   0.5 * width / math.tan(0.5 * camera_angle_x))

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        """Pixel-space K for the computer-vision convention (x right, y down, z forward)."""
        return np.array([[self.focal, 0.0, 0.5 * self.width],
                         [0.0, self.focal, 0.5 * self.height],
                         [0.0, 0.0, 1.0]])

    @property
    def world_to_camera_cv(self) -> np.ndarray:
        """[R|t] mapping world points to the computer-vision camera frame."""
        flip = np.diag([1.0, -1.0, -1.0])
        rot = self.c2w[:3, :3]
        r = flip @ rot.T
        t = -r @ self.c2w[:3, 3]
        return np.concatenate([r, t[:, None]], axis=1)

    def pixel_rays(self):
        """Origins and unit directions *toward the camera* for every pixel, row-major."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        x = (i + 0.5 - 0.5 * self.width) / self.focal
        y = -(j + 0.5 - 0.5 * self.height) / self.focal
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
        d = d_cam @ self.c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.c2w[:3, 3], d.shape).copy()
        return origins, -d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
    return c2w


def spiral_poses(n_views: int, target, radius: float, *, elevation=(20.0, 60.0),
                 azimuth=(0.0, 360.0)) -> list[np.ndarray]:
    """Cameras on an upper-hemisphere spiral, all looking at ``target``."""
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n_views):
        f = (k + 0.5) / n_views
        el = math.radians(elevation[0] + f * (elevation[1] - elevation[0]))
        az = math.radians(azimuth[0] + f * (azimuth[1] - azimuth[0]))
        eye = target + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                                          math.sin(el)])
        poses.append(look_at(eye, target))
    return poses


def project(points, K, Rt):
    """Project world points; returns pixel coordinates (N, 2) and depth w' (N,)."""
    p = np.asarray(points, dtype=np.float64)
    ph = np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)
    q = (K @ Rt @ ph.T).T
    w = q[:, 2]
    safe = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return q[:, :2] / safe[:, None], w
