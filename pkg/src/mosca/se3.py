"""SE(3)/SO(3) primitives and dual-quaternion blending.

Quaternions are stored scalar-first, ``(w, x, y, z)``, as float64 arrays.
All helpers broadcast over leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateBlend

_BLEND_EPS = 1e-12


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with non-negative scalar part."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    for i, r in enumerate(m):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(batch + (4,))


def axis_angle_to_quat(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 1e-12, theta, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] of (possibly non-canonical) unit quaternions."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def random_quat(rng: np.random.Generator, size: int | tuple | None = None) -> np.ndarray:
    shape = (() if size is None else (size if isinstance(size, tuple) else (size,))) + (4,)
    return quat_normalize(rng.normal(size=shape))


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): unit quaternion rotation followed by translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3].copy())

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_normalize(quat_mul(self.rotation, other.rotation))
        t = quat_rotate(self.rotation, other.translation) + self.translation
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.rotation)
        return RigidTransform(qi, -quat_rotate(qi, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


@dataclass(frozen=True)
class UnitDualQuaternion:
    real: np.ndarray
    dual: np.ndarray


def to_dual_quaternion(T: RigidTransform) -> UnitDualQuaternion:
    real = np.array(T.rotation, dtype=float)
    dual = 0.5 * quat_mul(np.concatenate([[0.0], T.translation]), real)
    return UnitDualQuaternion(real, dual)


def from_dual_quaternion(dq: UnitDualQuaternion) -> RigidTransform:
    real, dual = _normalize_dq(np.asarray(dq.real, float), np.asarray(dq.dual, float))
    t = 2.0 * quat_mul(dual, quat_conj(real))[1:]
    return RigidTransform(real, t)


def _normalize_dq(real: np.ndarray, dual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(real)
    if n < _BLEND_EPS:
        raise DegenerateBlend(f"dual quaternion real part has norm {n:.3e}")
    real = real / n
    dual = dual / n
    # project dual part onto the tangent of the unit sphere: <real, dual> = 0
    dual = dual - np.dot(real, dual) * real
    return real, dual


def dqb(pairs: Iterable[tuple[float, RigidTransform]]) -> RigidTransform:
    """Blend rigid transforms by normalised weighted dual-quaternion sum.

    Signs of the real parts are aligned with the first element before summing,
    so antipodal representations of nearby rotations do not cancel.
    """
    pairs = list(pairs)
    if not pairs:
        raise DegenerateBlend("empty blend")
    w = np.array([p[0] for p in pairs], dtype=float)
    if np.any(w < 0):
        raise ValueError("blend weights must be non-negative")
    real = np.array([p[1].rotation for p in pairs])
    trans = np.array([p[1].translation for p in pairs])
    dual = 0.5 * quat_mul(np.concatenate([np.zeros((len(w), 1)), trans], axis=1), real)
    sign = np.where(real @ real[0] < 0, -1.0, 1.0)
    ws = (w * sign)[:, None]
    return from_dual_quaternion(UnitDualQuaternion((ws * real).sum(0), (ws * dual).sum(0)))


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = math.acos(cos)
    if theta < 1e-12:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - theta < 1e-6:
        # sin(theta) ~ 0: the skew part vanishes, read the axis off R + I
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * w


def _as_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape == (3, 3):
        return matrix_to_quat(R)
    return quat_normalize(R)


def rotation_log_norm(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Frobenius norm of ``log(R_a R_b^-1)``, i.e. sqrt(2) times the relative angle.

    Accepts unit quaternions or 3x3 matrices.
    """
    qa, qb = _as_quat(R_a), _as_quat(R_b)
    rel = quat_mul(qa, quat_conj(qb))
    return math.sqrt(2.0) * float(quat_angle(rel))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
