"""Gaussians anchored to a motion scaffold: fusion, track supervision and node control."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import se3
from . import tgeom as tg
from .camera import MIN_Z, CameraModel, backproject
from .errors import FormatError
from .lift import GeoConfig, arap_terms, smooth_terms
from .optim import ConvergenceLog, MinimizeResult, ParamBlock, Schedule, minimize
from .priors import DepthStack, TrackSet
from .scaffold import WEIGHT_FLOOR, MotionScaffold, NodeLocator, read_msca, resample_nodes, write_msca, _curve_dist_rows

logger = logging.getLogger(__name__)

M4D_MAGIC = b"M4D1"
M4D_VERSION = 1


@dataclass
class StaticGaussianSet:
    mu: np.ndarray        # (G, 3)
    quats: np.ndarray     # (G, 4)
    scales: np.ndarray    # (G, 3)
    opacity: np.ndarray   # (G,)
    color: np.ndarray     # (G, 3)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float).reshape(-1, 3)
        G = len(self.mu)
        self.quats = np.asarray(self.quats, float).reshape(G, 4)
        self.scales = np.asarray(self.scales, float).reshape(G, 3)
        self.opacity = np.asarray(self.opacity, float).reshape(G)
        self.color = np.asarray(self.color, float).reshape(G, 3)
        if np.any(self.scales <= 0):
            raise ValueError("Gaussian scales must be positive")
        if np.any((self.opacity <= 0) | (self.opacity >= 1)):
            raise ValueError("opacity must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def empty(cls) -> "StaticGaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class DynGaussianSet(StaticGaussianSet):
    """Dynamic Gaussians; ``t_ref`` is the 0-based spawn frame.

    ``anchor`` is the nearest node at spawn (-1 before binding); the blend set is
    the anchor plus its topology neighbours, and ``dw`` holds one additive weight
    correction per blend-set entry. ``track`` links a Gaussian to the tracklet it
    was spawned from (-1 for depth-only Gaussians).
    """

    t_ref: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dw: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    track: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        super().__post_init__()
        G = len(self.mu)
        self.t_ref = np.asarray(self.t_ref, dtype=np.int64).reshape(G)
        self.anchor = np.broadcast_to(np.asarray(self.anchor, dtype=np.int64), (G,)).copy() if G else np.zeros(0, np.int64)
        self.track = np.broadcast_to(np.asarray(self.track, dtype=np.int64), (G,)).copy() if G else np.zeros(0, np.int64)
        dw = np.asarray(self.dw, float)
        self.dw = dw.reshape(G, -1) if dw.size else np.zeros((G, 0))
        if np.any(self.t_ref < 0):
            raise ValueError("t_ref must be a valid frame index")

    @classmethod
    def empty(cls) -> "DynGaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @property
    def tracked(self) -> np.ndarray:
        return np.flatnonzero(self.track >= 0)

    def copy(self) -> "DynGaussianSet":
        return DynGaussianSet(
            self.mu.copy(), self.quats.copy(), self.scales.copy(), self.opacity.copy(), self.color.copy(),
            self.t_ref.copy(), self.anchor.copy(), self.dw.copy(), self.track.copy(),
        )

    def subset(self, idx) -> "DynGaussianSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DynGaussianSet(
            self.mu[idx], self.quats[idx], self.scales[idx], self.opacity[idx], self.color[idx],
            self.t_ref[idx], self.anchor[idx], self.dw[idx], self.track[idx],
        )

    @staticmethod
    def concat(sets: list["DynGaussianSet"]) -> "DynGaussianSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return DynGaussianSet.empty()
        B = max(s.dw.shape[1] for s in sets)
        dws = [np.pad(s.dw, ((0, 0), (0, B - s.dw.shape[1]))) for s in sets]
        return DynGaussianSet(
            np.concatenate([s.mu for s in sets]), np.concatenate([s.quats for s in sets]),
            np.concatenate([s.scales for s in sets]), np.concatenate([s.opacity for s in sets]),
            np.concatenate([s.color for s in sets]), np.concatenate([s.t_ref for s in sets]),
            np.concatenate([s.anchor for s in sets]), np.concatenate(dws), np.concatenate([s.track for s in sets]),
        )


# ---------------------------------------------------------------------------
# initialisation


def _pixel_grid(mask: np.ndarray, stride: int) -> np.ndarray:
    H, W = mask.shape
    vv, uu = np.mgrid[0:H:stride, 0:W:stride]
    keep = mask[vv, uu]
    return np.column_stack([uu[keep], vv[keep]]).astype(float)


def _spawn(depth: DepthStack, cam: CameraModel, masks: np.ndarray, stride: int, rgb: np.ndarray | None):
    mus, scales, cols, tref = [], [], [], []
    f = float(cam.intrinsics[0])
    for t in range(depth.num_frames):
        mask = masks[t] & depth.valid_mask()[t]
        uv = _pixel_grid(mask, stride)
        if len(uv) == 0:
            continue
        ui, vi = uv[:, 0].astype(np.int64), uv[:, 1].astype(np.int64)
        z = depth.scale[t] * depth.maps[t][vi, ui]
        mus.append(backproject(uv, z, t, cam))
        scales.append(np.repeat((z / f * stride)[:, None], 3, axis=1))
        cols.append(rgb[t][vi, ui] if rgb is not None else np.full((len(uv), 3), 0.5))
        tref.append(np.full(len(uv), t))
    if not mus:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64)
    return np.concatenate(mus), np.concatenate(scales), np.concatenate(cols), np.concatenate(tref)


def init_gaussians(
    depth: DepthStack, cam: CameraModel, masks: np.ndarray, stride: int = 2, rgb: np.ndarray | None = None, opacity: float = 0.8
) -> DynGaussianSet:
    """One Gaussian per masked pixel on a ``stride`` grid per frame, unbound."""
    mu, sc, col, tref = _spawn(depth, cam, np.asarray(masks, bool), stride, rgb)
    G = len(mu)
    q = np.zeros((G, 4))
    q[:, 0] = 1.0
    return DynGaussianSet(mu, q, sc, np.full(G, opacity), np.clip(col, 0, 1), tref, -1, np.zeros((G, 0)), -1)


def init_static(
    depth: DepthStack, cam: CameraModel, masks: np.ndarray, stride: int = 4, rgb: np.ndarray | None = None, opacity: float = 0.8
) -> StaticGaussianSet:
    mu, sc, col, _ = _spawn(depth, cam, np.asarray(masks, bool), stride, rgb)
    G = len(mu)
    q = np.zeros((G, 4))
    q[:, 0] = 1.0
    return StaticGaussianSet(mu, q, sc, np.full(G, opacity), np.clip(col, 0, 1))


def track_gaussians(
    tracks: TrackSet, ids, cam: CameraModel, depth: DepthStack, stride: int = 1, rgb: np.ndarray | None = None, opacity: float = 0.8
) -> DynGaussianSet:
    """Spawn one Gaussian per track at its first visible frame, linked to the track."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        return DynGaussianSet.empty()
    first = np.argmax(tracks.vis[ids], axis=1)
    uv = tracks.points[ids, first]
    z = np.array([depth.sample(t, p[None])[0] for t, p in zip(first, uv)])
    mu = np.stack([backproject(p, d, t, cam) for p, d, t in zip(uv, z, first)])
    f = float(cam.intrinsics[0])
    sc = np.repeat((z / f * stride)[:, None], 3, axis=1)
    if rgb is not None:
        H, W = rgb.shape[1:3]
        ui = np.clip(np.round(uv[:, 0]).astype(np.int64), 0, W - 1)
        vi = np.clip(np.round(uv[:, 1]).astype(np.int64), 0, H - 1)
        col = rgb[first, vi, ui]
    else:
        col = np.full((len(ids), 3), 0.5)
    q = np.zeros((len(ids), 4))
    q[:, 0] = 1.0
    return DynGaussianSet(mu, q, sc, np.full(len(ids), opacity), np.clip(col, 0, 1), first, -1, np.zeros((len(ids), 0)), ids)


def bind(gaussians: DynGaussianSet, scaffold: MotionScaffold, only: np.ndarray | None = None) -> DynGaussianSet:
    """Attach Gaussians to their nearest node at spawn time; corrections reset to zero."""
    out = gaussians.copy()
    B = scaffold.K + 1
    idx = np.arange(len(out)) if only is None else np.asarray(only, dtype=np.int64)
    new_dw = np.zeros((len(out), B))
    keep = np.setdiff1d(np.arange(len(out)), idx)
    if out.dw.shape[1] == B:
        new_dw[keep] = out.dw[keep]
    out.dw = new_dw
    for t in np.unique(out.t_ref[idx]):
        sel = idx[out.t_ref[idx] == t]
        out.anchor[sel] = NodeLocator(scaffold, int(t)).query(out.mu[sel])
    return out


def blend_ids(gaussians: DynGaussianSet, scaffold: MotionScaffold) -> np.ndarray:
    if np.any(gaussians.anchor < 0):
        raise ValueError("Gaussians are not bound to the scaffold")
    return np.concatenate([gaussians.anchor[:, None], scaffold.topology[gaussians.anchor]], axis=1)


# ---------------------------------------------------------------------------
# fusion (torch)


def blend_weights(mu, t_ref, ids, dw, tr, radius):
    """Clamped ``w(mu, t_ref) + dw`` over each blend set, (G, B)."""
    p = tr[ids, t_ref[:, None]]                               # (G, B, 3)
    d = mu[:, None, :] - p
    sq = (d * d).sum(-1)
    w = torch.exp(-sq / (2.0 * radius[ids])) + dw
    return torch.clamp(w, min=WEIGHT_FLOOR)


def relative_motion(q, tr, ids, t_ref, t):
    """Per blend-set node motion from t_ref to t: (q (G, [T,] B, 4), t (..., 3))."""
    qs = tg.quat_normalize(q[ids, t_ref[:, None]])              # (G, B, 4)
    ts = tr[ids, t_ref[:, None]]
    if isinstance(t, int):
        qd_ = tg.quat_normalize(q[ids, t])
        td_ = tr[ids, t]
    else:                                                        # all frames: (G, T, B, .)
        qd_ = tg.quat_normalize(q[ids]).permute(0, 2, 1, 3)
        td_ = tr[ids].permute(0, 2, 1, 3)
        qs, ts = qs[:, None], ts[:, None]
    dq = tg.quat_mul(qd_, tg.quat_conj(qs))
    dt = td_ - tg.quat_rotate(dq, ts)
    return dq, dt


def fuse_tensors(mu, quats, t_ref, ids, dw, q, tr, radius, t):
    """Deformed centres and rotations; ``t`` an int or None for every frame."""
    w = blend_weights(mu, t_ref, ids, dw, tr, radius)
    dq, dt = relative_motion(q, tr, ids, t_ref, t)
    if t is None:
        w = w[:, None].expand(-1, dq.shape[1], -1)
        rq, rt = tg.dqb(w, dq, dt)
        return tg.quat_rotate(rq, mu[:, None]) + rt, tg.quat_mul(rq, quats[:, None])
    rq, rt = tg.dqb(w, dq, dt)
    return tg.quat_rotate(rq, mu) + rt, tg.quat_mul(rq, quats)


def _tensors(gaussians: DynGaussianSet, scaffold: MotionScaffold):
    T = lambda a: torch.as_tensor(np.asarray(a, float), dtype=tg.DTYPE)
    return (
        T(gaussians.mu), T(gaussians.quats), torch.as_tensor(gaussians.t_ref), torch.as_tensor(blend_ids(gaussians, scaffold)),
        T(gaussians.dw), T(scaffold.quats), T(scaffold.trans), T(scaffold.radius),
    )


@dataclass
class PosedGaussians:
    mu: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


def fuse_at(t: int, gaussians: DynGaussianSet, scaffold: MotionScaffold) -> PosedGaussians:
    """Every Gaussian deformed from its spawn frame to frame ``t``."""
    if len(gaussians) == 0:
        return PosedGaussians(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    if not 0 <= t < scaffold.num_frames:
        raise ValueError(f"frame {t} outside the scaffold's time range")
    with torch.no_grad():
        mu, q = fuse_tensors(*_tensors(gaussians, scaffold), int(t))
    return PosedGaussians(mu.numpy(), q.numpy(), gaussians.scales.copy(), gaussians.opacity.copy(), gaussians.color.copy())


def fused_trajectories(gaussians: DynGaussianSet, scaffold: MotionScaffold) -> np.ndarray:
    """Centres of every Gaussian at every frame, (G, T, 3)."""
    if len(gaussians) == 0:
        return np.zeros((0, scaffold.num_frames, 3))
    with torch.no_grad():
        mu, _ = fuse_tensors(*_tensors(gaussians, scaffold), None)
    return mu.numpy()


# ---------------------------------------------------------------------------
# track supervision


def project_tensor(x, qc, tc, intr):
    """Pixel coordinates of world points ``x`` (..., T, 3) under per-frame poses."""
    xc = tg.quat_rotate(tg.quat_conj(qc), x - tc)
    z = torch.clamp(xc[..., 2], min=MIN_Z)
    return torch.stack([intr[0] * xc[..., 0] / z + intr[2], intr[1] * xc[..., 1] / z + intr[3]], dim=-1)


class TrackTerm:
    """Reprojection residuals of tracked Gaussians against their source tracks."""

    def __init__(self, gaussians: DynGaussianSet, tracks: TrackSet, cam: CameraModel):
        self.idx = gaussians.tracked
        tid = gaussians.track[self.idx]
        self.obs = torch.as_tensor(tracks.points[tid], dtype=tg.DTYPE)
        self.vis = torch.as_tensor(tracks.vis[tid], dtype=tg.DTYPE)
        self.qc = torch.as_tensor(cam.quats, dtype=tg.DTYPE)
        self.tc = torch.as_tensor(cam.trans, dtype=tg.DTYPE)
        self.intr = torch.as_tensor(cam.intrinsics, dtype=tg.DTYPE)

    def residuals(self, mu, quats, t_ref, ids, dw, q, tr, radius):
        i = torch.as_tensor(self.idx)
        x, _ = fuse_tensors(mu[i], quats[i], t_ref[i], ids[i], dw[i], q, tr, radius, None)
        p = project_tensor(x, self.qc, self.tc, self.intr)
        return tg.safe_norm(p - self.obs) * self.vis      # (G_tracked, T)

    def value(self, *args):
        if len(self.idx) == 0:
            return args[0].sum() * 0.0
        return self.residuals(*args).sum()


def loss_track(gaussians: DynGaussianSet, scaffold: MotionScaffold, tracks: TrackSet, cam: CameraModel):
    """Sum of pixel distances between tracked Gaussians and their tracks.

    Gradients are returned for ``quats``/``trans`` (scaffold), ``dw`` and ``mu``.
    """
    term = TrackTerm(gaussians, tracks, cam)
    mu, quats, t_ref, ids, dw, q, tr, radius = _tensors(gaussians, scaffold)
    for x in (mu, dw, q, tr):
        x.requires_grad_(True)
    val = term.value(mu, quats, t_ref, ids, dw, q, tr, radius)
    val.backward()
    g = lambda x: x.grad.numpy().copy() if x.grad is not None else np.zeros(tuple(x.shape))
    return float(val.detach()), {"quats": g(q), "trans": g(tr), "dw": g(dw), "mu": g(mu)}


def track_residuals(gaussians: DynGaussianSet, scaffold: MotionScaffold, tracks: TrackSet, cam: CameraModel) -> np.ndarray:
    """Mean visible-frame residual (px) per Gaussian; NaN for untracked ones."""
    out = np.full(len(gaussians), np.nan)
    term = TrackTerm(gaussians, tracks, cam)
    if len(term.idx) == 0:
        return out
    with torch.no_grad():
        r = term.residuals(*_tensors(gaussians, scaffold)).numpy()
    vis = term.vis.numpy()
    out[term.idx] = r.sum(1) / np.maximum(vis.sum(1), 1)
    return out


def induced_tracks(gaussians: DynGaussianSet, scaffold: MotionScaffold, cam: CameraModel) -> np.ndarray:
    """Projection of every Gaussian's fused centre at every frame, (G, T, 2)."""
    x = torch.as_tensor(fused_trajectories(gaussians, scaffold), dtype=tg.DTYPE)
    with torch.no_grad():
        p = project_tensor(x, torch.as_tensor(cam.quats, dtype=tg.DTYPE), torch.as_tensor(cam.trans, dtype=tg.DTYPE),
                           torch.as_tensor(cam.intrinsics, dtype=tg.DTYPE))
    return p.numpy()


# ---------------------------------------------------------------------------
# node control


def _restructure(scaffold: MotionScaffold, quats, trans, radius) -> MotionScaffold:
    K = scaffold.K
    levels = max(1, len(scaffold.pyramid))
    k_coarse = scaffold.pyramid[1].neighbors.shape[1] if len(scaffold.pyramid) > 1 else 4
    out = MotionScaffold(quats, trans, radius)
    return out.with_structure(K, levels, 0.5, k_coarse)


def rebind(gaussians: DynGaussianSet, old: MotionScaffold, new: MotionScaffold, index_map: np.ndarray) -> DynGaussianSet:
    """Carry bindings across a node edit.

    ``index_map[i]`` is the new index of old node i (-1 if removed). Gaussians
    keep their anchor when it survives and are re-anchored otherwise. Corrections
    follow their node id; nodes that newly enter a blend set start at zero.
    """
    out = gaussians.copy()
    out.dw = np.zeros((len(out), new.K + 1))
    if len(out) == 0:
        return out
    old_ids = blend_ids(gaussians, old)
    new_anchor = index_map[gaussians.anchor]
    lost = new_anchor < 0
    out.anchor = np.where(lost, 0, new_anchor)
    if lost.any():
        out = bind(out, new, np.flatnonzero(lost))
    ids_new = blend_ids(out, new)
    old_in_new = index_map[old_ids]
    eq = (old_in_new[:, None, :] == ids_new[:, :, None]) & (old_in_new[:, None, :] >= 0)
    out.dw = (eq * gaussians.dw[:, None, :]).sum(-1)
    out.dw[lost] = 0.0
    return out


@dataclass
class NodeEdit:
    scaffold: MotionScaffold
    gaussians: DynGaussianSet
    added: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    removed: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def densify_nodes(
    gaussians: DynGaussianSet,
    scaffold: MotionScaffold,
    tracks: TrackSet,
    cam: CameraModel,
    threshold: float = 2.0,
    spacing: float = 0.1,
    cap: int = 10_000,
    trajectories: dict[int, np.ndarray] | None = None,
    residuals: np.ndarray | None = None,
) -> NodeEdit:
    """Insert nodes on the trajectories of badly tracked Gaussians.

    A candidate's trajectory is its lifted source track when ``trajectories``
    provides one (keyed by track id), otherwise its fused centres. Candidates
    closer than ``spacing`` (curve distance) to an existing node or to an
    earlier candidate are dropped.
    """
    if residuals is None:
        residuals = track_residuals(gaussians, scaffold, tracks, cam)
    cand = np.flatnonzero(np.nan_to_num(residuals, nan=-1.0) > threshold)
    room = int(cap) - scaffold.num_nodes
    if len(cand) == 0 or room <= 0:
        return NodeEdit(scaffold, gaussians)
    cand = cand[np.argsort(-residuals[cand], kind="stable")]
    fused = fused_trajectories(gaussians.subset(cand), scaffold)
    traj = np.stack([
        trajectories[int(gaussians.track[g])] if trajectories is not None and int(gaussians.track[g]) in trajectories else fused[k]
        for k, g in enumerate(cand)
    ])
    M0 = scaffold.num_nodes
    stacked = np.concatenate([scaffold.trans, traj])
    keep = resample_nodes(stacked, spacing)
    new = keep[keep >= scaffold.num_nodes] - scaffold.num_nodes
    # existing nodes always survive the greedy pass because they come first,
    # except when two of them are themselves closer than ``spacing``
    if len(new) == 0:
        return NodeEdit(scaffold, gaussians)
    new = new[:room]
    # new nodes inherit the rotations of their closest existing node
    nearest = _curve_dist_rows(stacked, M0 + new, np.arange(M0)).argmin(axis=1)
    q_new = scaffold.quats[nearest].copy()
    r_new = np.full(len(new), float(np.median(scaffold.radius)))
    out = _restructure(
        scaffold,
        np.concatenate([scaffold.quats, q_new]),
        np.concatenate([scaffold.trans, traj[new]]),
        np.concatenate([scaffold.radius, r_new]),
    )
    g = rebind(gaussians, scaffold, out, np.arange(M0))
    # Gaussians whose nearest node is now a new one switch anchors
    moved = []
    for t in np.unique(g.t_ref):
        sel = np.flatnonzero(g.t_ref == t)
        near = NodeLocator(out, int(t)).query(g.mu[sel])
        moved.append(sel[near != g.anchor[sel]])
    moved = np.concatenate(moved) if moved else np.zeros(0, np.int64)
    if len(moved):
        g = bind(g, out, moved)
    return NodeEdit(out, g, np.arange(M0, M0 + len(new)))


def max_node_weights(gaussians: DynGaussianSet, scaffold: MotionScaffold, chunk: int = 4096) -> np.ndarray:
    """Max over Gaussians of each node's clamped (base + correction) weight."""
    M = scaffold.num_nodes
    best = np.zeros(M)
    if len(gaussians) == 0:
        return best
    ids = blend_ids(gaussians, scaffold) if np.all(gaussians.anchor >= 0) and gaussians.dw.shape[1] == scaffold.K + 1 else None
    for s in range(0, len(gaussians), chunk):
        sl = slice(s, min(len(gaussians), s + chunk))
        mu = gaussians.mu[sl]
        p = scaffold.trans[:, gaussians.t_ref[sl]].transpose(1, 0, 2)          # (g, M, 3)
        d = mu[:, None] - p
        w = np.exp(-(d * d).sum(-1) / (2.0 * scaffold.radius[None]))
        if ids is not None:
            rows = np.repeat(np.arange(w.shape[0]), ids.shape[1])
            np.add.at(w, (rows, ids[sl].reshape(-1)), gaussians.dw[sl].reshape(-1))
        best = np.maximum(best, np.maximum(w, 0.0).max(axis=0))
    return best


def prune_nodes(gaussians: DynGaussianSet, scaffold: MotionScaffold, threshold: float) -> NodeEdit:
    """Remove nodes whose weight toward every Gaussian is below ``threshold``."""
    drop = np.flatnonzero(max_node_weights(gaussians, scaffold) < threshold)
    if len(drop) == 0:
        return NodeEdit(scaffold, gaussians)
    keep = np.setdiff1d(np.arange(scaffold.num_nodes), drop)
    if len(keep) < scaffold.K + 1:
        logger.warning("pruning %d nodes would leave %d < K+1; skipped", len(drop), len(keep))
        return NodeEdit(scaffold, gaussians)
    index_map = np.full(scaffold.num_nodes, -1)
    index_map[keep] = np.arange(len(keep))
    out = _restructure(scaffold, scaffold.quats[keep], scaffold.trans[keep], scaffold.radius[keep])
    return NodeEdit(out, rebind(gaussians, scaffold, out, index_map), removed=drop)


# ---------------------------------------------------------------------------
# joint track-consistency optimisation


@dataclass
class PhotoConfig:
    lambda_track: float = 1.0
    geo: GeoConfig = field(default_factory=GeoConfig)
    iterations: int = 600
    lr: float = 5e-3
    final_lr_ratio: float = 1e-2
    control_every: int = 200
    densify_threshold: float = 2.0
    densify_relative: float = 0.0     # also require residual > this x median residual (noise floor)
    densify_spacing: float = 0.1
    prune_threshold: float = 1e-4
    node_cap: int = 10_000
    optimize_mu: bool = True
    optimize_dw: bool = True


@dataclass
class PhotoResult:
    gaussians: DynGaussianSet
    scaffold: MotionScaffold
    result: MinimizeResult
    node_visibility: np.ndarray | None = None


def photometric_stage(
    gaussians: DynGaussianSet,
    scaffold: MotionScaffold,
    tracks: TrackSet,
    cam: CameraModel,
    config: PhotoConfig | None = None,
    freeze_visible: np.ndarray | None = None,
    trajectories: dict[int, np.ndarray] | None = None,
    node_visibility: np.ndarray | None = None,
    log: ConvergenceLog | None = None,
) -> PhotoResult:
    """Minimise lambda_track L_track + geometric regularisers over scaffold, dw and mu.

    ``freeze_visible`` (nodes x frames) holds those node translations fixed,
    which with ``lambda_track = 0`` reproduces ``geometric_optimize``. Node
    control runs every ``control_every`` iterations when ``control_every > 0``.
    """
    cfg = config or PhotoConfig()
    geo = cfg.geo
    state = {"g": gaussians.copy(), "s": scaffold.copy(), "vis": None if node_visibility is None else np.asarray(node_visibility, bool).copy()}
    term = TrackTerm(state["g"], tracks, cam)
    extent = float(np.median(np.sqrt(scaffold.radius))) if scaffold.num_nodes else 1.0

    def make_blocks():
        s, g = state["s"], state["g"]
        fr = None if freeze_visible is None else np.repeat(np.asarray(freeze_visible, bool)[..., None], 3, axis=-1)
        return [
            ParamBlock("quats", s.quats, "quaternion"),
            ParamBlock("trans", s.trans, frozen=fr, lr_scale=extent),
            ParamBlock("dw", g.dw, frozen=None if cfg.optimize_dw else np.ones_like(g.dw, bool), lr_scale=0.1),
            ParamBlock("mu", g.mu, frozen=None if cfg.optimize_mu else np.ones_like(g.mu, bool), lr_scale=extent),
        ]

    blocks = make_blocks()
    struct_ = {}

    def refresh():
        s, g = state["s"], state["g"]
        struct_["edges"] = s.pyramid_edges()
        struct_["ids"] = torch.as_tensor(blend_ids(g, s)) if len(g) else None
        struct_["t_ref"] = torch.as_tensor(g.t_ref)
        struct_["quats_g"] = torch.as_tensor(g.quats, dtype=tg.DTYPE)
        struct_["radius"] = torch.as_tensor(s.radius, dtype=tg.DTYPE)

    refresh()

    def objective(vals):
        q = torch.tensor(vals["quats"], dtype=tg.DTYPE, requires_grad=True)
        tr = torch.tensor(vals["trans"], dtype=tg.DTYPE, requires_grad=True)
        dw = torch.tensor(vals["dw"], dtype=tg.DTYPE, requires_grad=True)
        mu = torch.tensor(vals["mu"], dtype=tg.DTYPE, requires_grad=True)
        src, dst = struct_["edges"]
        l_dist, l_coord = arap_terms(q, tr, src, dst, geo.deltas)
        vel, acc = smooth_terms(q, tr)
        arap = geo.lambda_l * l_dist + geo.lambda_c * l_coord
        total = geo.lambda_arap * arap + geo.lambda_vel * vel + geo.lambda_acc * acc
        l_track = total * 0.0
        if cfg.lambda_track != 0 and struct_["ids"] is not None:
            l_track = term.value(mu, struct_["quats_g"], struct_["t_ref"], struct_["ids"], dw, q, tr, struct_["radius"])
            total = total + cfg.lambda_track * l_track
        total.backward()
        grads = {k: (x.grad.numpy().copy() if x.grad is not None else np.zeros(tuple(x.shape))) for k, x in
                 (("quats", q), ("trans", tr), ("dw", dw), ("mu", mu))}
        return float(total.detach()), grads, {"track": float(l_track.detach()), "arap": float(arap.detach()),
                                              "vel": float(vel.detach()), "acc": float(acc.detach())}

    def sync_from(blocks_):
        vals = {b.name: b.values for b in blocks_}
        state["s"].quats = vals["quats"] / np.linalg.norm(vals["quats"], axis=-1, keepdims=True)
        state["s"].trans = vals["trans"].copy()
        state["g"].dw = vals["dw"].copy()
        state["g"].mu = vals["mu"].copy()

    def callback(it, blocks_):
        if cfg.control_every <= 0 or cfg.lambda_track == 0 or freeze_visible is not None:
            return False
        if (it + 1) % cfg.control_every or it + 1 >= cfg.iterations:
            return False
        sync_from(blocks_)
        M0 = state["s"].num_nodes
        thr = cfg.densify_threshold
        res_ = None
        if cfg.densify_relative > 0:
            res_ = track_residuals(state["g"], state["s"], tracks, cam)
            fin = res_[np.isfinite(res_)]
            if len(fin):
                thr = max(thr, cfg.densify_relative * float(np.median(fin)))
        edit = densify_nodes(state["g"], state["s"], tracks, cam, thr, cfg.densify_spacing,
                             cfg.node_cap, trajectories, res_)
        edit2 = prune_nodes(edit.gaussians, edit.scaffold, cfg.prune_threshold)
        if edit.scaffold is state["s"] and edit2.scaffold is edit.scaffold:
            return False
        if state["vis"] is not None:
            vis = state["vis"]
            if len(edit.added):
                add = np.ones((len(edit.added), vis.shape[1]), bool)
                vis = np.concatenate([vis, add])
            if len(edit2.removed):
                vis = np.delete(vis, edit2.removed, axis=0)
            state["vis"] = vis
        state["s"], state["g"] = edit2.scaffold, edit2.gaussians
        logger.info("node control at iteration %d: %d -> %d nodes", it + 1, M0, state["s"].num_nodes)
        refresh()
        fresh = make_blocks()
        for b, f in zip(blocks_, fresh):
            b.values, b.frozen = f.values, f.frozen
        # optimiser moments follow surviving nodes; new nodes start from zero
        rows = np.concatenate([np.arange(M0), np.full(len(edit.added), -1)])
        rows = np.delete(rows, edit2.removed)
        return {"quats": rows, "trans": rows}

    res = minimize(objective, blocks, Schedule(cfg.iterations, cfg.lr, final_lr_ratio=cfg.final_lr_ratio), log=log, callback=callback)
    sync_from(blocks)
    if freeze_visible is not None:
        fv = np.asarray(freeze_visible, bool)
        state["s"].trans[fv] = scaffold.trans[fv]
    return PhotoResult(state["g"], state["s"], res, state["vis"])


# ---------------------------------------------------------------------------
# preview splatting


def preview_render(
    t: int,
    gaussians: DynGaussianSet | None,
    static: StaticGaussianSet | None,
    cam: CameraModel,
    scaffold: MotionScaffold | None = None,
    size: tuple[int, int] | None = None,
    background=(0.0, 0.0, 0.0),
    pose: se3.RigidTransform | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back alpha composite of isotropic splats; returns (rgb, depth).

    Depth is the alpha-weighted expected z, +inf where nothing was drawn.
    """
    W, H = size if size is not None else (cam.width, cam.height)
    mus, cols, ops, scs = [], [], [], []
    if gaussians is not None and len(gaussians):
        if scaffold is None:
            raise ValueError("dynamic Gaussians need a scaffold to render")
        posed = fuse_at(t, gaussians, scaffold)
        mus.append(posed.mu); cols.append(posed.color); ops.append(posed.opacity); scs.append(posed.scales.mean(1))
    if static is not None and len(static):
        mus.append(static.mu); cols.append(static.color); ops.append(static.opacity); scs.append(static.scales.mean(1))
    rgb = np.empty((H, W, 3))
    rgb[:] = np.asarray(background, float)
    depth = np.full((H, W), np.inf)
    if not mus:
        return rgb, depth
    mu = np.concatenate(mus)
    P = pose if pose is not None else cam.pose(t)
    xc = se3.quat_rotate(se3.quat_conj(P.rotation), mu - P.translation)
    z = xc[:, 2]
    front = z > MIN_Z
    fx, fy, cx, cy = cam.intrinsics
    order = np.flatnonzero(front)[np.argsort(z[front], kind="stable")]
    col = np.concatenate(cols)
    op = np.concatenate(ops)
    sc = np.concatenate(scs)
    trans_ = np.ones((H, W))
    acc_c = np.zeros((H, W, 3))
    acc_z = np.zeros((H, W))
    for j in order:
        u = fx * xc[j, 0] / z[j] + cx
        v = fy * xc[j, 1] / z[j] + cy
        sig = max(fx * sc[j] / z[j], 0.3)
        r = int(np.ceil(3 * sig))
        u0, u1 = max(int(np.floor(u)) - r, 0), min(int(np.ceil(u)) + r, W - 1)
        v0, v1 = max(int(np.floor(v)) - r, 0), min(int(np.ceil(v)) + r, H - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        a = op[j] * np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2 * sig * sig))
        tw = trans_[v0 : v1 + 1, u0 : u1 + 1]
        contrib = tw * a
        acc_c[v0 : v1 + 1, u0 : u1 + 1] += contrib[..., None] * col[j]
        acc_z[v0 : v1 + 1, u0 : u1 + 1] += contrib * z[j]
        trans_[v0 : v1 + 1, u0 : u1 + 1] = tw * (1 - a)
    alpha = 1.0 - trans_
    rgb = acc_c + trans_[..., None] * np.asarray(background, float)
    drawn = alpha > 1e-12
    depth[drawn] = acc_z[drawn] / alpha[drawn]
    return rgb, depth


# ---------------------------------------------------------------------------
# scene file


@dataclass
class FusedScene:
    dynamic: DynGaussianSet
    static: StaticGaussianSet
    scaffold: MotionScaffold | None
    camera: CameraModel | None


def _dyn_dtype(B: int) -> np.dtype:
    return np.dtype([("mu", "<f8", 3), ("q", "<f8", 4), ("s", "<f8", 3), ("o", "<f8"), ("c", "<f8", 3),
                     ("t_ref", "<i4"), ("anchor", "<i4"), ("track", "<i4"), ("dw", "<f8", (B,))])


_STATIC_DTYPE = np.dtype([("mu", "<f8", 3), ("q", "<f8", 4), ("s", "<f8", 3), ("o", "<f8"), ("c", "<f8", 3)])


def write_m4d(scene: FusedScene, path: str | Path) -> None:
    """Versioned binary scene: Gaussian tables, camera JSON and embedded scaffold."""
    d, s = scene.dynamic, scene.static
    B = d.dw.shape[1]
    buf = io.BytesIO()
    buf.write(M4D_MAGIC)
    buf.write(struct.pack("<4I", M4D_VERSION, len(d), len(s), B))
    rec = np.zeros(len(d), _dyn_dtype(B))
    rec["mu"], rec["q"], rec["s"], rec["o"], rec["c"] = d.mu, d.quats, d.scales, d.opacity, d.color
    rec["t_ref"], rec["anchor"], rec["track"] = d.t_ref, d.anchor, d.track
    if B:
        rec["dw"] = d.dw
    buf.write(rec.tobytes())
    srec = np.zeros(len(s), _STATIC_DTYPE)
    srec["mu"], srec["q"], srec["s"], srec["o"], srec["c"] = s.mu, s.quats, s.scales, s.opacity, s.color
    buf.write(srec.tobytes())
    cam = b"" if scene.camera is None else json.dumps(scene.camera.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cam)))
    buf.write(cam)
    sc = io.BytesIO()
    if scene.scaffold is not None:
        write_msca(scene.scaffold, sc)
    buf.write(struct.pack("<Q", len(sc.getvalue())))
    buf.write(sc.getvalue())
    Path(path).write_bytes(buf.getvalue())


def read_m4d(path: str | Path) -> FusedScene:
    data = Path(path).read_bytes()
    if data[:4] != M4D_MAGIC:
        raise FormatError("not a scene file (bad magic)")
    try:
        version, nd, ns, B = struct.unpack_from("<4I", data, 4)
        if version != M4D_VERSION:
            raise FormatError(f"unsupported scene version {version}")
        off = 20
        dt = _dyn_dtype(B)
        rec = np.frombuffer(data, dt, nd, off)
        off += dt.itemsize * nd
        srec = np.frombuffer(data, _STATIC_DTYPE, ns, off)
        off += _STATIC_DTYPE.itemsize * ns
        (nc,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + nc > len(data):
            raise FormatError("truncated camera block")
        cam_raw = data[off : off + nc]
        off += nc
        (nm,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + nm > len(data):
            raise FormatError("truncated scaffold block")
        scaffold = read_msca(data[off : off + nm]) if nm else None
        off += nm
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated scene file: {exc}") from exc
    if off != len(data):
        raise FormatError("trailing bytes in scene file")
    dyn = DynGaussianSet(
        rec["mu"].copy(), rec["q"].copy(), rec["s"].copy(), rec["o"].copy(), rec["c"].copy(),
        rec["t_ref"].astype(np.int64), rec["anchor"].astype(np.int64), rec["dw"].reshape(nd, B).copy(), rec["track"].astype(np.int64),
    )
    static = StaticGaussianSet(srec["mu"].copy(), srec["q"].copy(), srec["s"].copy(), srec["o"].copy(), srec["c"].copy())
    cam = CameraModel.from_dict(json.loads(cam_raw.decode())) if nc else None
    return FusedScene(dyn, static, scaffold, cam)


def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII point cloud with optional 8-bit colours."""
    pts = np.asarray(points, float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors, float).reshape(-1, 3) * 255), 0, 255).astype(int)
        lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {q[0]} {q[1]} {q[2]}" for p, q in zip(pts, c)]
    else:
        lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise FormatError("not an ASCII ply file")
    end = text.index("end_header")
    n = next(int(l.split()[2]) for l in text[:end] if l.startswith("element vertex"))
    has_color = any("red" in l for l in text[:end])
    rows = np.array([[float(v) for v in l.split()] for l in text[end + 1 : end + 1 + n]]).reshape(n, -1)
    return rows[:, :3], (rows[:, 3:6] / 255.0 if has_color else None)
