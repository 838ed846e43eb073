"""Figures and delimited tables for a pipeline run."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402


def read_log(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def pck_curve(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, taus: np.ndarray) -> np.ndarray:
    return np.array([metrics.eval_pck_t(pred, gt, mask, float(t)) for t in taus])


def write_figures(out: Path, scene, pred: np.ndarray, tracks, gt_dir: Path, size) -> list[Path]:
    """Camera trajectory, convergence and PCK figures plus per-frame CSV."""
    from .synth import load_ground_truth

    out = Path(out)
    gt = load_ground_truth(gt_dir)
    made = []
    cam = scene.camera

    fig, ax = plt.subplots(figsize=(4.5, 4))
    g = gt.camera.trans
    ax.plot(g[:, 0], g[:, 2], "k-", label="ground truth")
    if cam is not None:
        a = metrics.align_trajectory(cam.trans, g)
        ax.plot(a[:, 0], a[:, 2], "o--", ms=3, label="solved (aligned)")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.set_title("camera centres, top view")
    fig.tight_layout()
    made.append(out / "camera_trajectory.png")
    fig.savefig(made[-1], dpi=100)
    plt.close(fig)

    logs = {name: read_log(out / f"{name}_log.jsonl") for name in ("ba", "geo", "photo")}
    logs = {k: v for k, v in logs.items() if v}
    if logs:
        fig, axes = plt.subplots(1, len(logs), figsize=(4 * len(logs), 3), squeeze=False)
        for ax, (name, recs) in zip(axes[0], logs.items()):
            ax.semilogy([r["iteration"] for r in recs], [max(r["loss"], 1e-300) for r in recs])
            ax.set_title(f"{name} objective")
            ax.set_xlabel("iteration")
        fig.tight_layout()
        made.append(out / "convergence.png")
        fig.savefig(made[-1], dpi=100)
        plt.close(fig)

    qm = metrics.query_mask(tracks.vis)
    diag = math.hypot(*size)
    fracs = np.linspace(0.0, 0.1, 21)
    taus = fracs * diag
    p_pred = pck_curve(pred, gt.tracks2d, qm, taus)
    p_in = pck_curve(tracks.points, gt.tracks2d, qm, taus)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(fracs, p_in, "s-", ms=3, label="input tracks")
    ax.plot(fracs, p_pred, "o-", ms=3, label="fused Gaussians")
    ax.axvline(0.05, color="gray", lw=0.8)
    ax.set_xlabel("threshold / image diagonal")
    ax.set_ylabel("PCK-T")
    ax.legend(fontsize=8)
    fig.tight_layout()
    made.append(out / "pck.png")
    fig.savefig(made[-1], dpi=100)
    plt.close(fig)

    with open(out / "pck_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_fraction", "threshold_px", "pck_input", "pck_pred"])
        for f, t, a, b in zip(fracs, taus, p_in, p_pred):
            w.writerow([f"{f:.4f}", f"{t:.6g}", f"{a:.9g}", f"{b:.9g}"])
    made.append(out / "pck_curve.csv")

    if cam is not None:
        a = metrics.align_trajectory(cam.trans, g)
        err = np.linalg.norm(a - g, axis=1)
        tau = 0.05 * diag
        with open(out / "per_frame.tsv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["frame", "cx", "cy", "cz", "center_error", "pck_t"])
            for t in range(cam.num_frames):
                m = qm[:, t]
                pk = metrics.eval_pck_t(pred[:, t], gt.tracks2d[:, t], m, tau) if m.any() else float("nan")
                c = cam.trans[t]
                w.writerow([t, f"{c[0]:.9g}", f"{c[1]:.9g}", f"{c[2]:.9g}", f"{err[t]:.9g}", f"{pk:.9g}"])
        made.append(out / "per_frame.tsv")
    return made
