"""Differentiable batched geometry (torch, float64).

Mirrors the numpy primitives in :mod:`mosca.se3` for use inside losses.
"""

from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def safe_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm with a zero (sub)gradient at the origin."""
    sq = (v * v).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.sqrt((q * q).sum(-1, keepdim=True))


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    shape = torch.broadcast_shapes(q.shape[:-1], v.shape[:-1])
    q = q.expand(shape + (4,))
    v = v.expand(shape + (3,))
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u, v, dim=-1)
    return v + 2.0 * (w * uv + torch.cross(u, uv, dim=-1))


def quat_angle(q: torch.Tensor) -> torch.Tensor:
    """Angle in [0, pi]; gradient is zero at the identity."""
    return 2.0 * torch.atan2(safe_norm(q[..., 1:]), q[..., 0].abs())


def rel_rotation_log_norm(qa: torch.Tensor, qb: torch.Tensor) -> torch.Tensor:
    """``||log(R_a R_b^-1)||_F`` for unit quaternions."""
    return np.sqrt(2.0) * quat_angle(quat_mul(qa, quat_conj(qb)))


def compose(qa, ta, qb, tb):
    """(qa, ta) ∘ (qb, tb)."""
    return quat_mul(qa, qb), quat_rotate(qa, tb) + ta


def inverse(q, t):
    qi = quat_conj(q)
    return qi, -quat_rotate(qi, t)


def dqb(weights: torch.Tensor, q: torch.Tensor, t: torch.Tensor, eps: float = 1e-12):
    """Batched dual-quaternion blending.

    weights: (..., K) non-negative, q: (..., K, 4) unit, t: (..., K, 3).
    Returns the blended (rotation (..., 4), translation (..., 3)).
    """
    zeros = torch.zeros_like(t[..., :1])
    dual = 0.5 * quat_mul(torch.cat([zeros, t], dim=-1), q)
    sign = torch.where((q * q[..., :1, :]).sum(-1) < 0, -1.0, 1.0).to(q.dtype)
    ws = (weights * sign).unsqueeze(-1)
    real = (ws * q).sum(-2)
    dsum = (ws * dual).sum(-2)
    n = torch.sqrt((real * real).sum(-1, keepdim=True))
    if bool((n < eps).any()):
        from .errors import DegenerateBlend

        raise DegenerateBlend("blended dual quaternion has vanishing real part")
    real = real / n
    dsum = dsum / n
    dsum = dsum - (real * dsum).sum(-1, keepdim=True) * real
    trans = 2.0 * quat_mul(dsum, quat_conj(real))[..., 1:]
    return real, trans
