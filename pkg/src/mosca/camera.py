"""Shared-intrinsics pinhole camera with per-frame world-from-camera poses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import se3
from .errors import BehindCamera, FormatError, NonPositiveDepth

MIN_Z = 1e-6


@dataclass
class CameraModel:
    """Intrinsics ``(fx, fy, cx, cy)`` in px; ``quats``/``trans`` give W_t (world-from-camera)."""

    intrinsics: np.ndarray
    quats: np.ndarray
    trans: np.ndarray
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float).reshape(4)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        self.trans = np.asarray(self.trans, dtype=float).reshape(-1, 3)
        if self.quats.shape[0] != self.trans.shape[0]:
            raise ValueError("pose arrays disagree on frame count")
        if self.intrinsics[0] <= 0 or self.intrinsics[1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def num_frames(self) -> int:
        return self.quats.shape[0]

    @property
    def K(self) -> np.ndarray:
        fx, fy, cx, cy = self.intrinsics
        return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])

    def pose(self, t: int) -> se3.RigidTransform:
        return se3.RigidTransform(self.quats[t], self.trans[t])

    def centers(self) -> np.ndarray:
        return self.trans.copy()

    def copy(self) -> "CameraModel":
        return CameraModel(self.intrinsics.copy(), self.quats.copy(), self.trans.copy(), self.width, self.height)

    @classmethod
    def identity_poses(cls, intrinsics, T: int, width: int = 0, height: int = 0) -> "CameraModel":
        q = np.zeros((T, 4))
        q[:, 0] = 1.0
        return cls(np.asarray(intrinsics, float), q, np.zeros((T, 3)), width, height)

    # -- json ------------------------------------------------------------

    def to_dict(self) -> dict:
        fx, fy, cx, cy = (float(v) for v in self.intrinsics)
        poses = []
        for t in range(self.num_frames):
            m = self.pose(t).as_matrix()[:3]
            poses.append([[float(v) for v in row] for row in m])
        return {"fx": fx, "fy": fy, "cx": cx, "cy": cy, "width": int(self.width), "height": int(self.height), "poses": poses}

    @classmethod
    def from_dict(cls, d: dict, T: int | None = None) -> "CameraModel":
        try:
            intr = np.array([d["fx"], d["fy"], d["cx"], d["cy"]], dtype=float)
        except KeyError as exc:
            raise FormatError(f"camera json missing intrinsic {exc}") from exc
        poses = d.get("poses")
        if poses is None:
            if T is None:
                raise FormatError("camera json has no poses and frame count is unknown")
            return cls.identity_poses(intr, T, d.get("width", 0), d.get("height", 0))
        mats = np.asarray(poses, dtype=float)
        if mats.ndim != 3 or mats.shape[1:] != (3, 4):
            raise FormatError("camera poses must be a list of 3x4 matrices")
        quats = se3.matrix_to_quat(mats[:, :, :3])
        return cls(intr, quats, mats[:, :, 3].copy(), d.get("width", 0), d.get("height", 0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, T: int | None = None) -> "CameraModel":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(d, T)


def project_cam(x_cam: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    fx, fy, cx, cy = intrinsics
    x_cam = np.asarray(x_cam, dtype=float)
    z = x_cam[..., 2]
    if np.any(z <= MIN_Z):
        raise BehindCamera("point at or behind the image plane")
    return np.stack([fx * x_cam[..., 0] / z + cx, fy * x_cam[..., 1] / z + cy], axis=-1)


def unproject_cam(p: np.ndarray, depth: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    fx, fy, cx, cy = intrinsics
    p = np.asarray(p, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(~(d > 0)):
        raise NonPositiveDepth("back-projection depth must be positive")
    return np.stack([(p[..., 0] - cx) / fx * d, (p[..., 1] - cy) / fy * d, d], axis=-1)


def world_to_cam(x_world: np.ndarray, t: int, cam: CameraModel) -> np.ndarray:
    qi = se3.quat_conj(cam.quats[t])
    return se3.quat_rotate(qi, np.asarray(x_world, dtype=float) - cam.trans[t])


def project(x_world: np.ndarray, t: int, cam: CameraModel) -> np.ndarray:
    """Pixel of a world point in frame ``t``."""
    return project_cam(world_to_cam(x_world, t, cam), cam.intrinsics)


def backproject(p: np.ndarray, d, t: int, cam: CameraModel) -> np.ndarray:
    """World point seen at pixel ``p`` with camera-frame depth ``d`` in frame ``t``."""
    x_cam = unproject_cam(p, d, cam.intrinsics)
    return se3.quat_rotate(cam.quats[t], x_cam) + cam.trans[t]
