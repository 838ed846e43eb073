"""Lift 2D foreground tracks to 3D, seed scaffold nodes and regularise their motion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import tgeom as tg
from .camera import CameraModel, backproject
from .errors import InsufficientNodes, NonPositiveDepth
from .optim import ConvergenceLog, ParamBlock, Schedule, minimize
from .priors import DepthStack, TrackSet, Tracklet2D
from .scaffold import MotionScaffold, resample_nodes


@dataclass
class LiftedTrajectory:
    positions: np.ndarray  # (T, 3)
    visibility: np.ndarray  # (T,)
    source: int = -1


def _fill_occluded(h: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """Time-proportional interpolation between visible anchors, clamped at the ends."""
    T = len(vis)
    idx = np.flatnonzero(vis)
    out = h.copy()
    t = np.arange(T)
    occ = ~vis
    if not occ.any():
        return out
    for d in range(3):
        out[occ, d] = np.interp(t[occ], idx, h[idx, d])
    # np.interp clamps outside [idx[0], idx[-1]]; make the clamp exact
    out[: idx[0]] = h[idx[0]]
    out[idx[-1] + 1 :] = h[idx[-1]]
    return out


def lift(tracklet: Tracklet2D, cam: CameraModel, depth: DepthStack, source: int = -1) -> LiftedTrajectory:
    vis = np.asarray(tracklet.visibility, dtype=bool)
    if not vis.any():
        raise ValueError("tracklet has no visible frame")
    T = len(vis)
    h = np.zeros((T, 3))
    for t in np.flatnonzero(vis):
        d = float(depth.sample(t, tracklet.points[t][None])[0])
        if not d > 0:
            raise NonPositiveDepth(f"non-positive depth {d} for track {source} at frame {t}")
        h[t] = backproject(tracklet.points[t], d, t, cam)
    return LiftedTrajectory(_fill_occluded(h, vis), vis.copy(), source)


def lift_tracks(tracks: TrackSet, cam: CameraModel, depth: DepthStack, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``lift`` over a track set: returns (positions (N, T, 3), visibility)."""
    ids = np.arange(tracks.num_tracks) if ids is None else np.asarray(ids, dtype=np.int64)
    sub = tracks.subset(ids)
    d = depth.sample_tracks(sub)
    bad = sub.vis & ~(d > 0)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise NonPositiveDepth(f"non-positive depth for track {ids[i]} at frame {t}")
    N, T = sub.vis.shape
    h = np.zeros((N, T, 3))
    for t in range(T):
        v = sub.vis[:, t]
        if v.any():
            h[v, t] = backproject(sub.points[v, t], d[v, t], t, cam)
    for i in range(N):
        h[i] = _fill_occluded(h[i], sub.vis[i])
    return h, sub.vis.copy()


def select_nodes(positions: np.ndarray, vis: np.ndarray, spacing: float) -> np.ndarray:
    """Curve-distance thinning that prefers the most visible trajectories."""
    order = np.argsort(-np.asarray(vis).sum(axis=1), kind="stable")
    kept = resample_nodes(np.asarray(positions)[order], spacing)
    return np.sort(order[kept])


def init_scaffold(
    lifted: list[LiftedTrajectory] | np.ndarray,
    r_init: float,
    spacing: float,
    K: int,
    levels: int = 3,
    factor: float = 0.5,
    K_coarse: int = 4,
    vis: np.ndarray | None = None,
) -> tuple[MotionScaffold, np.ndarray]:
    """Nodes with identity rotations on resampled lifted trajectories.

    Returns the scaffold and the indices of the kept trajectories.
    """
    if isinstance(lifted, np.ndarray):
        pos = lifted
        vis = np.ones(pos.shape[:2], dtype=bool) if vis is None else np.asarray(vis, bool)
    else:
        pos = np.stack([l.positions for l in lifted])
        vis = np.stack([l.visibility for l in lifted])
    kept = select_nodes(pos, vis, spacing)
    if len(kept) < K + 1:
        raise InsufficientNodes(f"{len(kept)} trajectories survive resampling; need at least {K + 1}")
    scaffold = MotionScaffold.from_translations(pos[kept], r_init).with_structure(K, levels, factor, K_coarse)
    return scaffold, kept


# ---------------------------------------------------------------------------
# regularisers (torch)


def arap_terms(q: torch.Tensor, tr: torch.Tensor, src: np.ndarray, dst: np.ndarray, deltas=(1, 4)):
    """Unweighted (distance, local-coordinate) ARAP sums over directed edges."""
    T = tr.shape[1]
    qn = tg.quat_normalize(q)
    zero = tr.sum() * 0.0
    l_dist, l_coord = zero, zero
    if len(src) == 0:
        return l_dist, l_coord
    rel = tr[src] - tr[dst]                                   # t^m - t^n, (E, T, 3)
    local = tg.quat_rotate(tg.quat_conj(qn[dst]), rel)        # R^(n)T (t^m - t^n)
    dist = tg.safe_norm(rel)
    for d in deltas:
        if d < 1:
            raise ValueError("frame interval must be >= 1")
        if d >= T:
            continue
        l_dist = l_dist + (dist[:, :-d] - dist[:, d:]).abs().sum()
        l_coord = l_coord + tg.safe_norm(local[:, :-d] - local[:, d:]).sum()
    return l_dist, l_coord


def smooth_terms(q: torch.Tensor, tr: torch.Tensor):
    """(L_vel, L_acc) summed over nodes and frames."""
    qn = tg.quat_normalize(q)
    zero = tr.sum() * 0.0
    if tr.shape[1] < 2:
        return zero, zero
    rl = tg.rel_rotation_log_norm(qn[:, :-1], qn[:, 1:])       # ||log(R_t R_{t+1}^-1)||_F
    vel = tg.safe_norm(tr[:, :-1] - tr[:, 1:]).sum() + rl.sum()
    if tr.shape[1] < 3:
        return vel, zero
    acc = tg.safe_norm(tr[:, :-2] - 2 * tr[:, 1:-1] + tr[:, 2:]).sum() + (rl[:, :-1] - rl[:, 1:]).abs().sum()
    return vel, acc


@dataclass
class GeoConfig:
    lambda_arap: float = 1.0
    lambda_l: float = 1.0
    lambda_c: float = 0.3
    lambda_vel: float = 0.1
    lambda_acc: float = 0.1
    deltas: tuple[int, ...] = (1, 4)
    iterations: int = 1500
    lr: float = 1e-2
    final_lr_ratio: float = 1e-3

    @property
    def null(self) -> bool:
        arap = self.lambda_arap * (self.lambda_l + self.lambda_c)
        return arap == 0 and self.lambda_vel == 0 and self.lambda_acc == 0


def geo_objective(q, tr, src, dst, cfg: GeoConfig):
    l_dist, l_coord = arap_terms(q, tr, src, dst, cfg.deltas)
    vel, acc = smooth_terms(q, tr)
    arap = cfg.lambda_l * l_dist + cfg.lambda_c * l_coord
    total = cfg.lambda_arap * arap + cfg.lambda_vel * vel + cfg.lambda_acc * acc
    return total, {"arap": arap, "vel": vel, "acc": acc}


def _grad_of(fn, scaffold: MotionScaffold):
    q = torch.tensor(scaffold.quats, dtype=tg.DTYPE, requires_grad=True)
    tr = torch.tensor(scaffold.trans, dtype=tg.DTYPE, requires_grad=True)
    val = fn(q, tr)
    val.backward()
    return float(val.detach()), {"quats": q.grad.numpy().copy(), "trans": tr.grad.numpy().copy()}


def loss_arap(scaffold: MotionScaffold, deltas=(1, 4), lambda_l: float = 1.0, lambda_c: float = 0.3):
    """ARAP value and gradients w.r.t. node quaternions and translations."""
    src, dst = scaffold.pyramid_edges()

    def fn(q, tr):
        a, b = arap_terms(q, tr, src, dst, deltas)
        return lambda_l * a + lambda_c * b

    return _grad_of(fn, scaffold)


def loss_smooth(scaffold: MotionScaffold, lambda_vel: float = 1.0, lambda_acc: float = 1.0):
    """``lambda_vel * L_vel + lambda_acc * L_acc`` and its gradients."""

    def fn(q, tr):
        vel, acc = smooth_terms(q, tr)
        return lambda_vel * vel + lambda_acc * acc

    return _grad_of(fn, scaffold)


def smooth_values(scaffold: MotionScaffold) -> tuple[float, float]:
    with torch.no_grad():
        vel, acc = smooth_terms(torch.as_tensor(scaffold.quats, dtype=tg.DTYPE), torch.as_tensor(scaffold.trans, dtype=tg.DTYPE))
    return float(vel), float(acc)


def geometric_optimize(
    scaffold: MotionScaffold,
    visibility: np.ndarray,
    config: GeoConfig | None = None,
    log: ConvergenceLog | None = None,
) -> MotionScaffold:
    """Optimise rotations and occluded translations; visible translations stay bit-identical."""
    cfg = config or GeoConfig()
    out = scaffold.copy()
    if cfg.null or cfg.iterations == 0:
        return out
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != scaffold.trans.shape[:2]:
        raise ValueError("visibility must be (nodes, frames)")
    src, dst = scaffold.pyramid_edges()
    extent = float(np.median(np.sqrt(scaffold.radius))) if scaffold.num_nodes else 1.0
    blocks = [
        ParamBlock("quats", scaffold.quats, "quaternion"),
        ParamBlock("trans", scaffold.trans, frozen=np.repeat(vis[..., None], 3, axis=-1), lr_scale=extent),
    ]

    def objective(vals):
        q = torch.tensor(vals["quats"], dtype=tg.DTYPE, requires_grad=True)
        tr = torch.tensor(vals["trans"], dtype=tg.DTYPE, requires_grad=True)
        total, terms = geo_objective(q, tr, src, dst, cfg)
        total.backward()
        return (
            float(total.detach()),
            {"quats": q.grad.numpy().copy(), "trans": tr.grad.numpy().copy()},
            {k: float(v.detach()) for k, v in terms.items()},
        )

    minimize(objective, blocks, Schedule(cfg.iterations, cfg.lr, final_lr_ratio=cfg.final_lr_ratio), log=log)
    out.quats = blocks[0].values / np.linalg.norm(blocks[0].values, axis=-1, keepdims=True)
    trans = blocks[1].values
    trans[vis] = scaffold.trans[vis]
    out.trans = trans
    return out
