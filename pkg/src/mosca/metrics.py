"""Camera, correspondence and geometry metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .camera import CameraModel


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity (s, R, t) with dst ~ s R src + t."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = (xs * xs).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def align_trajectory(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align predicted camera centres onto ground truth."""
    if len(pred) < 3 or np.allclose(pred, pred[0]):
        return pred - pred.mean(0) + gt.mean(0)
    s, R, t = umeyama(pred, gt)
    return s * pred @ R.T + t


def ate(pred: CameraModel | np.ndarray, gt: CameraModel | np.ndarray) -> float:
    """RMSE of camera centres after similarity alignment."""
    p = pred.trans if isinstance(pred, CameraModel) else np.asarray(pred, float)
    g = gt.trans if isinstance(gt, CameraModel) else np.asarray(gt, float)
    if p.shape != g.shape:
        raise ValueError("trajectories differ in length")
    a = align_trajectory(p, g)
    return float(np.sqrt(np.mean(np.sum((a - g) ** 2, axis=1))))


def rpe(pred: CameraModel, gt: CameraModel) -> tuple[float, float]:
    """Mean translational (scale-aligned) and rotational (deg) error of consecutive relative poses."""
    if pred.num_frames != gt.num_frames:
        raise ValueError("trajectories differ in length")
    T = gt.num_frames
    if T < 2:
        return 0.0, 0.0
    s = 1.0
    if T >= 3 and not np.allclose(pred.trans, pred.trans[0]):
        s = umeyama(pred.trans, gt.trans)[0]
    et, er = [], []
    for t in range(T - 1):
        rp = pred.pose(t).inverse() @ pred.pose(t + 1)
        rg = gt.pose(t).inverse() @ gt.pose(t + 1)
        et.append(np.linalg.norm(s * rp.translation - rg.translation))
        dq = se3.quat_mul(se3.quat_conj(rg.rotation), rp.rotation)
        er.append(math.degrees(float(se3.quat_angle(dq))))
    return float(np.mean(et)), float(np.mean(er))


def eval_camera(pred: CameraModel, gt: CameraModel) -> tuple[float, float, float]:
    return (ate(pred, gt), *rpe(pred, gt))


def eval_pck_t(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, tau: float | None = None, image_size=None) -> float:
    """Fraction of predicted 2D points within ``tau`` px of ground truth.

    ``tau`` defaults to 0.05 of the image diagonal (``image_size`` = (W, H)).
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if tau is None:
        if image_size is None:
            raise ValueError("need tau or image_size")
        tau = 0.05 * math.hypot(*image_size)
    ok = np.ones(gt.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, bool)
    if not ok.any():
        return 0.0
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err[ok] <= tau))


def query_mask(vis: np.ndarray) -> np.ndarray:
    """All frames except each track's first visible frame (the query anchor)."""
    vis = np.asarray(vis, bool)
    m = np.ones_like(vis)
    first = np.argmax(vis, axis=1)
    m[np.arange(len(vis)), first] = False
    return m


def trajectory_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    d = np.sum((np.asarray(pred, float) - np.asarray(gt, float)) ** 2, axis=-1)
    if mask is not None:
        d = d[np.asarray(mask, bool)]
    return float(np.sqrt(np.mean(d))) if d.size else 0.0


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance."""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return math.inf
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


@dataclass
class EvalReport:
    ate: float = math.nan
    rpe_trans: float = math.nan
    rpe_rot_deg: float = math.nan
    pck_t: float = math.nan
    pck_t_input: float = math.nan
    trajectory_rmse: float = math.nan
    chamfer: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{f.name}\t{_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def to_json(self) -> str:
        return json.dumps({k: _fmt(v) for k, v in self.to_dict().items()}, indent=1, sort_keys=True) + "\n"

    def save(self, folder: str | Path) -> None:
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        (folder / "report.txt").write_text(self.to_text(), encoding="utf-8")
        (folder / "report.json").write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        d = json.loads(p.read_text(encoding="utf-8"))
        return cls(**{k: float(v) for k, v in d.items()})


def _fmt(v: float) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.9g}"
