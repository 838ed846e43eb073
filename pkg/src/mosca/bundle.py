"""Tracklet-based bundle adjustment: focal, poses and depth corrections from static tracks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from . import se3
from . import tgeom as tg
from .camera import MIN_Z, CameraModel, unproject_cam
from .errors import DegenerateGeometry, NonPositiveDepth
from .metrics import umeyama
from .optim import ConvergenceLog, ParamBlock, Schedule, minimize
from .priors import DepthStack, TrackSet

logger = logging.getLogger(__name__)


def frame_pairs(T: int, all_pairs: bool = False) -> np.ndarray:
    """Ordered frame pairs (a, b), a != b.

    By default only offsets 1, 2, 4, 8, ... are used, in both directions.
    """
    if all_pairs:
        return np.array([(a, b) for a in range(T) for b in range(T) if a != b], dtype=np.int64).reshape(-1, 2)
    out = []
    k = 1
    while k < T:
        for a in range(T - k):
            out.append((a, a + k))
            out.append((a + k, a))
        k *= 2
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def scale_invariant_depth_error(x, y):
    """``|x/y - 1| + |y/x - 1|``."""
    return abs(x / y - 1.0) + abs(y / x - 1.0)


@dataclass
class BAProblem:
    """Observations gathered for every co-visible (track, a, b) triple."""

    points: np.ndarray   # (N, T, 2)
    vis: np.ndarray      # (N, T)
    depth_raw: np.ndarray  # (N, T) raw sampled depth, 1.0 where invisible
    pairs: np.ndarray    # (P, 2)
    ii: np.ndarray = field(init=False)
    aa: np.ndarray = field(init=False)
    bb: np.ndarray = field(init=False)

    def __post_init__(self):
        co = self.vis[:, self.pairs[:, 0]] & self.vis[:, self.pairs[:, 1]]
        ii, pp = np.nonzero(co)
        self.ii, self.aa, self.bb = ii, self.pairs[pp, 0], self.pairs[pp, 1]
        self._t_pts = torch.as_tensor(self.points, dtype=tg.DTYPE)
        self._t_draw = torch.as_tensor(self.depth_raw, dtype=tg.DTYPE)

    @classmethod
    def build(cls, tracks: TrackSet, depth: DepthStack, pairs: np.ndarray | None = None, all_pairs: bool = False):
        raw = depth.sample_tracks(tracks)
        if np.any(tracks.vis & ~(raw > 0)):
            raise NonPositiveDepth("non-positive raw depth at a visible track pixel")
        raw = np.where(tracks.vis, raw, 1.0)
        if pairs is None:
            pairs = frame_pairs(tracks.num_frames, all_pairs)
        return cls(tracks.points.copy(), tracks.vis.copy(), raw, np.asarray(pairs, dtype=np.int64).reshape(-1, 2))

    @property
    def num_terms(self) -> int:
        return len(self.ii)

    def terms(self, intr, quats, trans, log_scale, corr):
        """Differentiable (L_proj, L_z) for torch parameter tensors."""
        if self.num_terms == 0:
            zero = (intr.sum() + quats.sum() + trans.sum() + log_scale.sum() + corr.sum()) * 0.0
            return zero, zero
        q = tg.quat_normalize(quats)
        d = torch.exp(log_scale)[None, :] * (self._t_draw + corr)
        ii, aa, bb = self.ii, self.aa, self.bb
        fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
        pa = self._t_pts[ii, aa]
        pb = self._t_pts[ii, bb]
        da = d[ii, aa]
        xa = torch.stack([(pa[:, 0] - cx) / fx * da, (pa[:, 1] - cy) / fy * da, da], dim=-1)
        xw = tg.quat_rotate(q[aa], xa) + trans[aa]
        xb = tg.quat_rotate(tg.quat_conj(q[bb]), xw - trans[bb])
        z = torch.clamp(xb[:, 2], min=MIN_Z)
        proj = torch.stack([fx * xb[:, 0] / z + cx, fy * xb[:, 1] / z + cy], dim=-1)
        l_proj = tg.safe_norm(proj - pb).sum()
        db = d[ii, bb]
        l_z = ((z / db - 1.0).abs() + (db / z - 1.0).abs()).sum()
        return l_proj, l_z


_STATE_KEYS = ("intrinsics", "quats", "trans", "log_scale", "corrections")


def _state(cam: CameraModel, depth: DepthStack, corrections: np.ndarray | None, n_tracks: int) -> dict:
    T = cam.num_frames
    return {
        "intrinsics": cam.intrinsics.copy(),
        "quats": cam.quats.copy(),
        "trans": cam.trans.copy(),
        "log_scale": np.log(depth.scale),
        "corrections": np.zeros((n_tracks, T)) if corrections is None else np.asarray(corrections, float),
    }


def _eval_terms(prob: BAProblem, state: dict, which: str):
    ts = {k: torch.tensor(np.asarray(state[k], float), dtype=tg.DTYPE, requires_grad=True) for k in _STATE_KEYS}
    l_proj, l_z = prob.terms(*(ts[k] for k in _STATE_KEYS))
    loss = l_proj if which == "proj" else l_z
    loss.backward()
    return float(loss.detach()), {k: ts[k].grad.numpy().copy() for k in _STATE_KEYS}


def loss_proj(tracks: TrackSet, cam: CameraModel, depth: DepthStack, corrections=None, pairs=None, all_pairs=False):
    """Reprojection loss over co-visible static track pairs.

    Returns ``(value, grads)`` with gradients for ``intrinsics``, ``quats``,
    ``trans``, ``log_scale`` and ``corrections``.
    """
    prob = BAProblem.build(tracks, depth, pairs, all_pairs)
    return _eval_terms(prob, _state(cam, depth, corrections, tracks.num_tracks), "proj")


def loss_depth_align(tracks: TrackSet, cam: CameraModel, depth: DepthStack, corrections=None, pairs=None, all_pairs=False):
    """Scale-invariant depth agreement between transferred and observed depths."""
    prob = BAProblem.build(tracks, depth, pairs, all_pairs)
    corr = np.zeros(tracks.vis.shape) if corrections is None else np.asarray(corrections, float)
    corrected = depth.scale[None, :] * (prob.depth_raw + corr)
    if np.any(tracks.vis & ~(corrected > 0)):
        raise NonPositiveDepth("corrected depth is not positive at a visible track pixel")
    return _eval_terms(prob, _state(cam, depth, corrections, tracks.num_tracks), "z")


# ---------------------------------------------------------------------------
# solver


@dataclass
class BAConfig:
    iterations: int = 300
    lr: float = 1e-2
    final_lr_ratio: float = 1e-3
    lambda_proj: float = 1.0
    lambda_z: float = 0.1
    lambda_small: float = 1.0
    max_correction: float = 0.05  # fraction of the frame median depth
    all_pairs: bool = False
    polish_evals: int = 40        # Gauss-Newton refinement budget (0 disables)
    polish_loss: str = "soft_l1"  # scipy robust loss for the refinement
    polish_scale: float = 1.0     # px; residuals beyond this are down-weighted


@dataclass
class BundleResult:
    camera: CameraModel
    depth: DepthStack
    corrections: np.ndarray
    value: float
    initial_value: float
    degenerate: bool = False


def initial_poses(prob: BAProblem, intrinsics: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain frame-to-frame similarity fits of back-projected static points."""
    N, T = prob.vis.shape
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (T, 1))
    trans = np.zeros((T, 3))
    log_scale = np.zeros(T)
    xcam = unproject_cam(prob.points, prob.depth_raw, intrinsics)
    for t in range(1, T):
        for r in range(t - 1, -1, -1):
            co = prob.vis[:, t] & prob.vis[:, r]
            if co.sum() >= 4:
                break
        else:
            quats[t], trans[t], log_scale[t] = quats[t - 1], trans[t - 1], log_scale[t - 1]
            continue
        s, R, tr = umeyama(xcam[co, t], np.exp(log_scale[r]) * xcam[co, r])
        rel = se3.RigidTransform(se3.matrix_to_quat(R), tr)
        W = se3.RigidTransform(quats[r], trans[r]) @ rel
        quats[t], trans[t], log_scale[t] = W.rotation, W.translation, np.log(s)
    return quats, trans, log_scale


def _polish(prob: BAProblem, vals: dict, intr0: np.ndarray, free_focal: bool, med: np.ndarray, cfg: BAConfig) -> dict:
    """Sparse Gauss-Newton refinement on the squared BA residuals.

    The first-order stage lands in the right basin; this step removes the
    residual drift along the poorly conditioned focal/translation direction.
    """
    N, T = prob.vis.shape
    vis_idx = np.flatnonzero(prob.vis.reshape(-1))
    nf = 1 if free_focal else 0
    off_rot = nf
    off_tr = off_rot + 3 * (T - 1)
    off_s = off_tr + 3 * (T - 1)
    off_c = off_s + (T - 1)
    n_par = off_c + len(vis_idx)
    q0 = se3.quat_normalize(vals["quats"])
    bound = cfg.max_correction * med
    col_of_entry = np.full(N * T, -1)
    col_of_entry[vis_idx] = off_c + np.arange(len(vis_idx))
    ii, aa, bb = prob.ii, prob.aa, prob.bb
    pa, pb = prob.points[ii, aa], prob.points[ii, bb]
    w_p, w_z, w_s = np.sqrt(cfg.lambda_proj), np.sqrt(cfg.lambda_z), np.sqrt(cfg.lambda_small)

    x0 = np.zeros(n_par)
    if free_focal:
        x0[0] = vals["log_f"][0]
    x0[off_tr:off_s] = vals["trans"][1:].reshape(-1)
    x0[off_s:off_c] = vals["log_scale"][1:]
    x0[off_c:] = vals["corrections"].reshape(-1)[vis_idx]

    def unpack(x):
        f = np.exp(x[0]) if free_focal else intr0[0]
        fy = f if free_focal else intr0[1]
        q = q0.copy()
        q[1:] = se3.quat_mul(se3.rotvec_to_quat(x[off_rot:off_tr].reshape(T - 1, 3)), q0[1:])
        tr = vals["trans"].copy()
        tr[1:] = x[off_tr:off_s].reshape(T - 1, 3)
        ls = np.concatenate([vals["log_scale"][:1], x[off_s:off_c]])
        corr = np.zeros(N * T)
        corr[vis_idx] = x[off_c:]
        return f, fy, q, tr, ls, corr.reshape(N, T)

    def fun(x):
        fx, fy, q, tr, ls, corr = unpack(x)
        cx, cy = intr0[2], intr0[3]
        d = np.exp(ls)[None, :] * (prob.depth_raw + corr)
        da, db = d[ii, aa], d[ii, bb]
        xa = np.stack([(pa[:, 0] - cx) / fx * da, (pa[:, 1] - cy) / fy * da, da], axis=-1)
        xw = se3.quat_rotate(q[aa], xa) + tr[aa]
        xb = se3.quat_rotate(se3.quat_conj(q[bb]), xw - tr[bb])
        z = np.maximum(xb[:, 2], MIN_Z)
        proj = np.stack([fx * xb[:, 0] / z + cx, fy * xb[:, 1] / z + cy], axis=-1)
        c = corr.reshape(-1)[vis_idx]
        hinge = np.maximum(np.abs(corr) - bound[None, :], 0.0).reshape(-1)[vis_idx]
        return np.concatenate([w_p * (proj - pb).reshape(-1), w_z * np.log(z / np.maximum(db, MIN_Z)), w_s * c, np.sqrt(1e3) * hinge])

    # sparsity: a term touches focal, the poses/scales of frames a and b and two corrections
    rows, cols = [], []
    K = len(ii)
    term_rows = [2 * np.arange(K), 2 * np.arange(K) + 1, 2 * K + np.arange(K)]
    for r in term_rows:
        if free_focal:
            rows.append(r); cols.append(np.zeros(K, dtype=np.int64))
        for fr in (aa, bb):
            has = fr > 0
            for j in range(3):
                rows += [r[has], r[has]]
                cols += [off_rot + 3 * (fr[has] - 1) + j, off_tr + 3 * (fr[has] - 1) + j]
            rows.append(r[has]); cols.append(off_s + fr[has] - 1)
            rows.append(r); cols.append(col_of_entry[ii * T + fr])
    n_c = len(vis_idx)
    for base in (3 * K, 3 * K + n_c):
        rows.append(base + np.arange(n_c)); cols.append(off_c + np.arange(n_c))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    sparsity = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * K + 2 * n_c, n_par)).tocsr()
    sparsity.data[:] = 1.0

    sol = least_squares(fun, x0, jac_sparsity=sparsity, method="trf", tr_solver="lsmr", x_scale="jac",
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=cfg.polish_evals,
                        loss=cfg.polish_loss, f_scale=cfg.polish_scale)
    fx, fy, q, tr, ls, corr = unpack(sol.x)
    out = dict(vals)
    out["quats"], out["trans"], out["log_scale"], out["corrections"] = q, tr, ls, corr
    if free_focal:
        out["log_f"] = np.array([sol.x[0]])
    return out


def solve_bundle(
    tracks: TrackSet,
    depth: DepthStack,
    init_focal: float | None = None,
    image_size: tuple[int, int] | None = None,
    known: CameraModel | None = None,
    config: BAConfig | None = None,
    log: ConvergenceLog | None = None,
    strict: bool = False,
) -> BundleResult:
    """Jointly optimise focal, poses, per-frame depth scales and per-track corrections.

    Gauge: frame 0 pose is the identity and its depth scale is 1. With ``known``
    intrinsics the focal/principal point stay frozen ("with focal" mode).
    """
    cfg = config or BAConfig()
    if tracks.num_tracks == 0:
        raise DegenerateGeometry("no static tracks for bundle adjustment")
    H, W = depth.shape if image_size is None else (image_size[1], image_size[0])
    if known is not None:
        intr0 = known.intrinsics.copy()
    else:
        if init_focal is None:
            raise ValueError("init_focal is required without known intrinsics")
        intr0 = np.array([init_focal, init_focal, (W - 1) / 2.0, (H - 1) / 2.0])
    prob = BAProblem.build(tracks, depth, all_pairs=cfg.all_pairs)
    if prob.num_terms == 0:
        raise DegenerateGeometry("static tracks share no co-visible frame pair")
    T = tracks.num_frames
    quats, trans, log_scale = initial_poses(prob, intr0)

    raw_vis = np.where(tracks.vis, prob.depth_raw, np.nan)
    med = np.nanmedian(raw_vis, axis=0)
    med = np.where(np.isfinite(med), med, np.nanmedian(raw_vis))
    scene_scale = float(np.nanmedian(raw_vis))
    t_med = torch.as_tensor(med, dtype=tg.DTYPE)
    t_vis = torch.as_tensor(tracks.vis, dtype=tg.DTYPE)
    t_cxcy = torch.as_tensor(intr0[2:], dtype=tg.DTYPE)

    frozen_first = np.zeros((T, 1), dtype=bool)
    frozen_first[0] = True
    blocks = [
        ParamBlock("quats", quats, "quaternion", frozen=frozen_first),
        ParamBlock("trans", trans, frozen=frozen_first, lr_scale=scene_scale),
        ParamBlock("log_scale", log_scale, frozen=frozen_first[:, 0]),
        ParamBlock("corrections", np.zeros((tracks.num_tracks, T)), frozen=~tracks.vis, lr_scale=0.1 * scene_scale),
    ]
    if known is None:
        blocks.append(ParamBlock("log_f", np.array([np.log(init_focal)])))

    def objective(vals):
        ts = {k: torch.tensor(v, dtype=tg.DTYPE, requires_grad=True) for k, v in vals.items()}
        if known is None:
            f = torch.exp(ts["log_f"])
            intr = torch.cat([f, f, t_cxcy])
        else:
            intr = torch.as_tensor(intr0, dtype=tg.DTYPE)
        corr = ts["corrections"]
        l_proj, l_z = prob.terms(intr, ts["quats"], ts["trans"], ts["log_scale"], corr)
        bound = cfg.max_correction * t_med[None, :]
        over = torch.relu(corr.abs() - bound) * t_vis
        small = (corr * corr * t_vis).sum()
        loss = cfg.lambda_proj * l_proj + cfg.lambda_z * l_z + cfg.lambda_small * small + 1e3 * (over * over).sum()
        loss.backward()
        grads = {k: t.grad.numpy().copy() for k, t in ts.items()}
        return float(loss.detach()), grads, {"proj": float(l_proj.detach()), "z": float(l_z.detach()), "small": float(small.detach())}

    sched = Schedule(iterations=cfg.iterations, lr=cfg.lr, final_lr_ratio=cfg.final_lr_ratio)
    res = minimize(objective, blocks, sched, log=log)
    vals = {b.name: b.values for b in blocks}
    if cfg.polish_evals > 0:
        vals = _polish(prob, vals, intr0, known is None, med, cfg)
        res.value = float(objective(vals)[0])
    intr = intr0.copy()
    if known is None:
        intr[:2] = np.exp(vals["log_f"][0])
    cam = CameraModel(intr, se3.quat_normalize(vals["quats"]), vals["trans"], W, H)
    out_depth = DepthStack(depth.maps, np.exp(vals["log_scale"]))
    baseline = float(np.max(np.linalg.norm(cam.trans - cam.trans[0], axis=1)))
    degenerate = baseline < 1e-3 * scene_scale
    if degenerate:
        msg = f"camera baseline {baseline:.2e} is below 1e-3 of scene depth; translation is unobservable"
        if strict:
            raise DegenerateGeometry(msg)
        logger.warning(msg)
    return BundleResult(cam, out_depth, vals["corrections"] * tracks.vis, res.value, res.initial_value, degenerate)
