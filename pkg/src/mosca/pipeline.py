"""End-to-end driver: priors -> cameras -> scaffold -> fused Gaussians -> evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .bundle import solve_bundle
from .camera import CameraModel, backproject
from .config import PipelineConfig
from .errors import InsufficientNodes, MoscaError
from .gaussians import (
    DynGaussianSet,
    FusedScene,
    StaticGaussianSet,
    bind,
    fuse_at,
    induced_tracks,
    init_gaussians,
    init_static,
    photometric_stage,
    read_m4d,
    track_gaussians,
    write_m4d,
)
from .lift import geometric_optimize, init_scaffold, lift_tracks
from .optim import ConvergenceLog
from .priors import DepthStack, Priors, default_threshold, epipolar_classify, foreground_masks, load_priors
from .scaffold import read_msca, write_msca

logger = logging.getLogger(__name__)

STAGES = ("load", "classify", "camera", "lift", "geometry", "fuse", "optimize", "evaluate")


class StageError(MoscaError):
    def __init__(self, stage: str, artifact: Path, cause: Exception):
        super().__init__(f"stage {stage!r} failed ({type(cause).__name__}: {cause}); artifacts in {artifact}")
        self.stage = stage
        self.artifact = artifact
        self.cause = cause


class UsageError(MoscaError):
    pass


@dataclass
class RunResult:
    out: Path
    report: metrics.EvalReport | None
    scene: FusedScene
    skipped: list[str] = field(default_factory=list)


def _save_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _done(out: Path) -> dict:
    p = out / "stages.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


def _mark(out: Path, stage: str, artifacts: list[str]) -> None:
    d = _done(out)
    d[stage] = sorted(artifacts)
    _save_json(out / "stages.json", d)


def _complete(out: Path, stage: str) -> bool:
    arts = _done(out).get(stage)
    return arts is not None and all((out / a).exists() for a in arts)


def static_points(tracks, ids, cam: CameraModel, depth: DepthStack) -> np.ndarray:
    """Per static track, the median of its back-projections over visible frames."""
    out = np.zeros((len(ids), 3))
    d = depth.sample_tracks(tracks.subset(ids)) if len(ids) else np.zeros((0, tracks.num_frames))
    for k, i in enumerate(ids):
        ts = np.flatnonzero(tracks.vis[i] & (d[k] > 0))
        pts = np.stack([backproject(tracks.points[i, t], depth.scale[t] * d[k, t], t, cam) for t in ts])
        out[k] = np.median(pts, axis=0)
    return out


def _project_all(x: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Project fixed world points into every frame, (N, T, 2); points behind map far away."""
    T = cam.num_frames
    out = np.zeros((len(x), T, 2))
    fx, fy, cx, cy = cam.intrinsics
    from . import se3

    for t in range(T):
        xc = se3.quat_rotate(se3.quat_conj(cam.quats[t]), x - cam.trans[t])
        z = np.maximum(xc[:, 2], 1e-6)
        out[:, t] = np.column_stack([fx * xc[:, 0] / z + cx, fy * xc[:, 1] / z + cy])
    return out


def run_pipeline(
    data: str | Path,
    out: str | Path,
    config: PipelineConfig | None = None,
    resume: bool = False,
    gt: str | Path | None = None,
    figures: bool = True,
) -> RunResult:
    """Run every stage, persisting artifacts under ``out``.

    With ``resume`` a stage whose recorded artifacts all exist is loaded instead
    of recomputed. Ground truth is read from ``gt`` or ``data/gt`` when present.
    """
    cfg = config or PipelineConfig()
    data = Path(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not resume and (out / "stages.json").exists():
        (out / "stages.json").unlink()
    skipped: list[str] = []
    ctx: dict = {}

    def stage(name: str):
        def wrap(fn):
            if resume and _complete(out, name) and hasattr(fn, "load"):
                fn.load()
                skipped.append(name)
                return fn
            t0 = time.perf_counter()
            try:
                arts = fn()
            except MoscaError as exc:
                if isinstance(exc, (StageError, UsageError)):
                    raise
                raise StageError(name, out, exc) from exc
            logger.info("stage %s: %.1f s", name, time.perf_counter() - t0)
            _mark(out, name, arts or [])
            return fn
        return wrap

    # -- load ---------------------------------------------------------------
    try:
        pri: Priors = load_priors(data)
    except MoscaError as exc:
        raise StageError("load", data, exc) from exc
    _save_json(out / "manifest.json", pri.manifest())
    _mark(out, "load", ["manifest.json"])
    tracks, depth0 = pri.tracks, pri.depth
    H, W = depth0.shape
    known = pri.camera
    has_poses = known is not None and pri.camera_has_poses
    if known is None and cfg.init_focal is None:
        raise UsageError("no camera.json in the data directory; pass --init-focal")

    # -- classify -----------------------------------------------------------
    def classify():
        thr = cfg.epipolar.threshold if cfg.epipolar.threshold is not None else default_threshold(H, cfg.epipolar.base_px)
        st, dy, stats = epipolar_classify(tracks, thr, cfg.seed, cfg.epipolar.iterations, cfg.epipolar.inlier_px)
        ctx["static"], ctx["dynamic"] = st, dy
        _save_json(out / "epipolar.json", {
            "threshold": thr, "static": st.tolist(), "dynamic": dy.tolist(),
            "track_error": [None if not math.isfinite(e) else float(e) for e in stats.track_error],
        })
        return ["epipolar.json"]

    def classify_load():
        d = json.loads((out / "epipolar.json").read_text())
        ctx["static"], ctx["dynamic"] = np.array(d["static"], np.int64), np.array(d["dynamic"], np.int64)

    classify.load = classify_load
    stage("classify")(classify)

    # -- camera -------------------------------------------------------------
    def camera():
        if has_poses:
            cam = known.copy()
            cam.width, cam.height = W, H
            ctx["cam"], ctx["depth"] = cam, depth0.copy()
        else:
            with ConvergenceLog(out / "ba_log.jsonl") as log:
                res = solve_bundle(
                    tracks.subset(ctx["static"]), depth0, cfg.init_focal, (W, H),
                    known=known, config=cfg.ba, log=log,
                )
            ctx["cam"], ctx["depth"] = res.camera, res.depth
        ctx["cam"].save(out / "camera_solved.json")
        _save_json(out / "depth_scales.json", [float(s) for s in ctx["depth"].scale])
        # continue from the stored camera so a resumed run sees identical inputs
        camera_load()
        return ["camera_solved.json", "depth_scales.json"]

    def camera_load():
        ctx["cam"] = CameraModel.load(out / "camera_solved.json")
        ctx["depth"] = DepthStack(depth0.maps, json.loads((out / "depth_scales.json").read_text()))

    camera.load = camera_load
    stage("camera")(camera)
    cam, depth = ctx["cam"], ctx["depth"]
    dyn = ctx["dynamic"]

    # -- lift ---------------------------------------------------------------
    def lift():
        ctx["scaffold"] = None
        ctx["node_tracks"] = np.zeros(0, np.int64)
        if len(dyn) > 0:
            h, vis = lift_tracks(tracks, cam, depth, dyn)
            spacing = cfg.lift.spacing
            if spacing is None:
                spacing = cfg.lift.spacing_rel * float(np.median(np.linalg.norm(h - cam.trans[None], axis=-1)))
            r = cfg.lift.r_init if cfg.lift.r_init is not None else spacing * spacing
            try:
                sc, kept = init_scaffold(h, r, spacing, cfg.lift.K, cfg.lift.levels, cfg.lift.factor, cfg.lift.K_coarse, vis=vis)
                ctx["scaffold"], ctx["node_tracks"] = sc, dyn[kept]
                ctx["node_vis"] = vis[kept]
                ctx["lifted"] = {int(dyn[i]): h[i] for i in range(len(dyn))}
            except InsufficientNodes as exc:
                logger.warning("too few foreground trajectories for a scaffold (%s); static-only scene", exc)
        if ctx["scaffold"] is None:
            return []
        write_msca(ctx["scaffold"], out / "scaffold_init.msca")
        np.save(out / "node_tracks.npy", ctx["node_tracks"])
        return ["scaffold_init.msca", "node_tracks.npy"]

    def lift_load():
        ctx["scaffold"] = None
        if (out / "scaffold_init.msca").exists() and _done(out)["lift"]:
            ctx["scaffold"] = read_msca(out / "scaffold_init.msca")
            ctx["node_tracks"] = np.load(out / "node_tracks.npy")
            ctx["node_vis"] = tracks.vis[ctx["node_tracks"]]
            h, _ = lift_tracks(tracks, cam, depth, dyn)
            ctx["lifted"] = {int(dyn[i]): h[i] for i in range(len(dyn))}

    lift.load = lift_load
    stage("lift")(lift)

    # -- geometry -------------------------------------------------------------
    def geometry():
        if ctx["scaffold"] is None:
            return []
        with ConvergenceLog(out / "geo_log.jsonl") as log:
            ctx["scaffold"] = geometric_optimize(ctx["scaffold"], ctx["node_vis"], cfg.geo, log)
        write_msca(ctx["scaffold"], out / "scaffold.msca")
        return ["scaffold.msca", "geo_log.jsonl"]

    def geometry_load():
        if ctx["scaffold"] is not None:
            ctx["scaffold"] = read_msca(out / "scaffold.msca")

    geometry.load = geometry_load
    stage("geometry")(geometry)

    # -- fuse -----------------------------------------------------------------
    def fuse():
        st = ctx["static"]
        rgb = pri.rgb
        masks = foreground_masks(tracks, dyn, (H, W), cfg.epipolar.fg_radius)
        static_g = init_static(depth, cam, ~masks, cfg.gaussians.static_stride, rgb, cfg.gaussians.opacity)
        ctx["static_points"] = static_points(tracks, st, cam, depth)
        sc = ctx["scaffold"]
        if sc is not None:
            dense = init_gaussians(depth, cam, masks, cfg.gaussians.stride, rgb, cfg.gaussians.opacity)
            tracked = track_gaussians(tracks, dyn, cam, depth, 1, rgb, cfg.gaussians.opacity)
            g = bind(DynGaussianSet.concat([tracked, dense]), sc)
        else:
            g = DynGaussianSet.empty()
        ctx["gaussians"], ctx["static_g"] = g, static_g
        write_m4d(FusedScene(g, static_g, sc, cam), out / "scene_init.m4d")
        np.save(out / "static_points.npy", ctx["static_points"])
        return ["scene_init.m4d", "static_points.npy"]

    def fuse_load():
        sc = read_m4d(out / "scene_init.m4d")
        ctx["gaussians"], ctx["static_g"] = sc.dynamic, sc.static
        ctx["static_points"] = np.load(out / "static_points.npy")

    fuse.load = fuse_load
    stage("fuse")(fuse)

    # -- optimize -------------------------------------------------------------
    def optimize():
        sc = ctx["scaffold"]
        if sc is not None:
            with ConvergenceLog(out / "photo_log.jsonl") as log:
                res = photometric_stage(ctx["gaussians"], sc, tracks, cam, cfg.photo, trajectories=ctx.get("lifted"), log=log)
            ctx["gaussians"], ctx["scaffold"] = res.gaussians, res.scaffold
        write_m4d(FusedScene(ctx["gaussians"], ctx["static_g"], ctx["scaffold"], cam), out / "scene.m4d")
        return ["scene.m4d"]

    def optimize_load():
        sc = read_m4d(out / "scene.m4d")
        ctx["gaussians"], ctx["scaffold"] = sc.dynamic, sc.scaffold

    optimize.load = optimize_load
    stage("optimize")(optimize)
    # score the persisted scene so `mosca eval` on this directory reproduces the report exactly
    scene = read_m4d(out / "scene.m4d")

    # -- evaluate -------------------------------------------------------------
    pred = np.array(tracks.points, copy=True)
    st = ctx["static"]
    if len(st):
        pred[st] = _project_all(ctx["static_points"], cam)
    g = scene.dynamic
    if len(g) and scene.scaffold is not None:
        tr = g.tracked
        pred[g.track[tr]] = induced_tracks(g.subset(tr), scene.scaffold, cam)
    np.save(out / "tracks_pred.npy", pred)

    gt_dir = Path(gt) if gt is not None else data / "gt"
    report = None
    if (gt_dir / "spec.json").exists():
        report = evaluate(scene, pred, tracks, gt_dir, cfg.eval.pck_fraction, (W, H))
        report.save(out)
        if figures:
            from .report import write_figures

            write_figures(out, scene, pred, tracks, gt_dir, (W, H))
    _mark(out, "evaluate", ["tracks_pred.npy"] + (["report.json", "report.txt"] if report else []))
    return RunResult(out, report, scene, skipped)


def evaluate(scene: FusedScene, pred: np.ndarray, tracks, gt_dir: Path, pck_fraction: float, size) -> metrics.EvalReport:
    from .synth import load_ground_truth

    gt = load_ground_truth(gt_dir)
    cam = scene.camera
    tau = pck_fraction * math.hypot(*size)
    qm = metrics.query_mask(tracks.vis)
    rep = metrics.EvalReport()
    if cam is not None and cam.num_frames == gt.camera.num_frames:
        rep.ate, rep.rpe_trans, rep.rpe_rot_deg = metrics.eval_camera(cam, gt.camera)
    n = min(len(pred), len(gt.tracks2d))
    if n == len(gt.tracks2d):
        rep.pck_t = metrics.eval_pck_t(pred, gt.tracks2d, qm, tau)
        rep.pck_t_input = metrics.eval_pck_t(tracks.points, gt.tracks2d, qm, tau)
    # 3D quantities compared in the ground-truth frame via the camera similarity
    s, R, t = 1.0, np.eye(3), np.zeros(3)
    if cam is not None and not np.allclose(cam.trans, gt.camera.trans):
        s, R, t = metrics.umeyama(cam.trans, gt.camera.trans)
    to_gt = lambda x: s * x @ R.T + t
    g = scene.dynamic
    if len(g) and scene.scaffold is not None and len(g.tracked):
        from .gaussians import fused_trajectories

        tr = g.tracked
        traj = to_gt(fused_trajectories(g.subset(tr), scene.scaffold))
        rep.trajectory_rmse = metrics.trajectory_rmse(traj, gt.tracks3d[g.track[tr]])
        if gt.surface.shape[1] > 0:
            dense = np.setdiff1d(np.arange(len(g)), tr)
            src = g.subset(dense) if len(dense) else g
            ds = [metrics.chamfer(to_gt(fuse_at(k, src, scene.scaffold).mu), gt.surface[k]) for k in range(cam.num_frames)]
            rep.chamfer = float(np.mean(ds))
    return rep


def load_run(out: str | Path) -> FusedScene:
    return read_m4d(Path(out) / "scene.m4d")
