"""Cameras, depth maps, and lifting masked depth to a coloured partial cloud."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidArgument
from .geom import PointCloud


@dataclass
class Camera:
    """Pinhole or orthographic camera.

    ``pose`` is the world-from-camera rigid transform.  The camera looks
    along its +z axis, +x to the right, +y down the image.  Integer pixel
    coordinates map directly through the intrinsics (no half-pixel offset).
    """
    model: str = "pinhole"
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    pixel_size: float | None = None
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.model not in ("pinhole", "orthographic"):
            raise InvalidArgument(f"camera model must be pinhole or orthographic, got {self.model!r}")
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.model == "pinhole":
            if not (self.fx > 0 and self.fy > 0):
                raise InvalidArgument("pinhole focal lengths fx, fy must be positive")
        elif not (self.pixel_size is not None and self.pixel_size > 0):
            raise InvalidArgument("orthographic camera needs a positive pixel_size")
        R = self.pose[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8 or np.linalg.det(R) < 0:
            raise InvalidArgument("camera pose rotation must be orthonormal")
        if not np.allclose(self.pose[3], [0, 0, 0, 1]):
            raise InvalidArgument("camera pose must be a rigid 4x4 transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def view_dir(self) -> np.ndarray:
        return self.pose[:3, 2]

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.rotation

    def to_world(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        return p @ self.rotation.T + self.center

    def with_pose(self, pose) -> "Camera":
        return Camera(self.model, self.fx, self.fy, self.cx, self.cy, self.pixel_size, pose)

    def pixel_to_camera(self, u, v, z) -> np.ndarray:
        u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
        if self.model == "pinhole":
            x = (u - self.cx) * z / self.fx
            y = (v - self.cy) * z / self.fy
        else:
            x = (u - self.cx) * self.pixel_size
            y = (v - self.cy) * self.pixel_size
        return np.stack([x, y, z], axis=-1)

    def project_camera(self, pc: np.ndarray, check: bool = True):
        """Camera-frame points (N, 3) -> (u, v, depth) arrays."""
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        if self.model == "pinhole":
            if check and np.any(z <= 0):
                raise BehindCamera("point lies behind the pinhole camera")
            u = self.fx * x / z + self.cx
            v = self.fy * y / z + self.cy
        else:
            u = x / self.pixel_size + self.cx
            v = y / self.pixel_size + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "pixel_size": self.pixel_size,
            "pose": self.pose.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        if not isinstance(d, dict):
            raise InvalidArgument("camera JSON must be an object")
        model = d.get("model", "pinhole")
        kw = {"model": model}
        needed = ("fx", "fy", "cx", "cy") if model == "pinhole" else ("cx", "cy", "pixel_size")
        for key in ("fx", "fy", "cx", "cy", "pixel_size"):
            if key in d and d[key] is not None:
                try:
                    kw[key] = float(d[key])
                except (TypeError, ValueError):
                    raise InvalidArgument(f"camera field '{key}' must be a number") from None
            elif key in needed:
                raise InvalidArgument(f"camera field '{key}' is missing")
        if "pose" in d:
            try:
                kw["pose"] = np.asarray(d["pose"], dtype=np.float64).reshape(4, 4)
            except (TypeError, ValueError):
                raise InvalidArgument("camera field 'pose' must hold 16 numbers (4x4 row-major)") from None
        return cls(**kw)


def project(camera: Camera, p) -> tuple:
    """World point(s) -> (u, v, depth)."""
    return camera.project_camera(camera.to_camera(p))


@dataclass
class DepthMap:
    depth: np.ndarray
    mask: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.ndim != 2 or self.mask.shape != self.depth.shape:
            raise InvalidArgument("depth and mask must be matching 2D grids")
        d = self.depth[self.mask]
        if not np.all(np.isfinite(d)):
            raise InvalidArgument("masked-in depths must be finite")
        if np.any(d <= 0):
            raise InvalidArgument("masked-in depths must be positive")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def unproject(d: DepthMap, rgb=None) -> PointCloud:
    """One world-frame point per masked-in pixel, in row-major pixel order."""
    colors = None
    if rgb is not None:
        rgb = np.asarray(rgb)
        if rgb.shape[:2] != d.depth.shape or rgb.ndim != 3 or rgb.shape[2] < 3:
            raise InvalidArgument(f"rgb shape {rgb.shape} does not match depth {d.depth.shape}")
        rgb = rgb[..., :3]
        if np.issubdtype(rgb.dtype, np.integer):
            rgb = rgb.astype(np.float64) / np.iinfo(rgb.dtype).max
        colors = np.clip(rgb.astype(np.float64), 0.0, 1.0)[d.mask]
    v, u = np.nonzero(d.mask)
    pc = d.camera.pixel_to_camera(u, v, d.depth[v, u])
    return PointCloud(d.camera.to_world(pc), colors)
