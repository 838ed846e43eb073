"""Command-line entry point ``mosca``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import MoscaError

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _classify(pri, cfg, seed: int):
    from .priors import default_threshold, epipolar_classify

    H = pri.depth.shape[0]
    thr = cfg.epipolar.threshold if cfg.epipolar.threshold is not None else default_threshold(H, cfg.epipolar.base_px)
    st, dy, _ = epipolar_classify(pri.tracks, thr, seed, cfg.epipolar.iterations, cfg.epipolar.inlier_px)
    return st, dy


def _camera_arg(path: str | None, data: Path, T: int):
    from .camera import CameraModel

    p = Path(path) if path else data / "camera.json"
    if not p.exists():
        raise UsageError(f"camera file {p} not found")
    if "poses" not in json.loads(p.read_text(encoding="utf-8")):
        raise UsageError(f"{p} has no per-frame poses; run `mosca ba` first")
    cam = CameraModel.load(p)
    if cam.num_frames != T:
        raise UsageError(f"{p} has {cam.num_frames} poses, data has {T} frames")
    return cam


class UsageError(MoscaError):
    pass


def cmd_synth(a) -> int:
    from .synth import SceneSpec, generate

    spec = SceneSpec.load(a.spec)
    if a.seed is not None:
        spec.seed = a.seed
    data = generate(spec, a.out)
    print(f"wrote {spec.kind} scene: {data.tracks.num_tracks} tracks, {spec.frames} frames -> {a.out}")
    return 0


def cmd_inspect(a) -> int:
    from .priors import load_priors

    pri = load_priors(a.data)
    print(json.dumps(pri.manifest(), indent=1))
    return 0


def cmd_config(a) -> int:
    from .config import dump_config, load_config

    sys.stdout.write(dump_config(load_config(a.config)))
    return 0


def cmd_run(a) -> int:
    from .config import load_config
    from .pipeline import UsageError as PipelineUsage
    from .pipeline import run_pipeline

    cfg = load_config(a.config)
    if a.seed is not None:
        cfg.seed = a.seed
    if a.init_focal is not None:
        cfg.init_focal = a.init_focal
    try:
        res = run_pipeline(a.data, a.out, cfg, resume=a.resume, gt=a.gt, figures=not a.no_figures)
    except PipelineUsage as exc:
        raise UsageError(str(exc)) from exc
    if res.skipped:
        print("resumed stages: " + ", ".join(res.skipped))
    if res.report is not None:
        sys.stdout.write(res.report.to_text())
    print(f"artifacts in {res.out}")
    return 0


def cmd_eval(a) -> int:
    from .pipeline import evaluate, load_run
    from .priors import load_priors

    pred_dir, gt_dir = Path(a.pred), Path(a.gt)
    data = gt_dir if (gt_dir / "gt").is_dir() else gt_dir.parent
    if not (data / "tracks.bin").exists():
        raise UsageError(f"no input tracks next to {gt_dir}")
    pri = load_priors(data, load_rgb=False)
    scene = load_run(pred_dir)
    pred = np.load(pred_dir / "tracks_pred.npy")
    H, W = pri.depth.shape
    rep = evaluate(scene, pred, pri.tracks, gt_dir, a.pck_fraction, (W, H))
    if a.out:
        rep.save(a.out)
    sys.stdout.write(rep.to_text())
    return 0


def cmd_ba(a) -> int:
    from .bundle import BAConfig, solve_bundle
    from .camera import CameraModel
    from .optim import ConvergenceLog
    from .priors import load_priors
    from .config import load_config

    data, out = Path(a.data), Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    pri = load_priors(data, load_rgb=False)
    cfg = load_config(a.config)
    known = None
    if a.known_intrinsics:
        if not (data / "camera.json").exists():
            raise UsageError("--known-intrinsics needs camera.json in the data directory")
        known = CameraModel.load(data / "camera.json", T=pri.num_frames)
    elif a.init_focal is None:
        raise UsageError("pass --init-focal or --known-intrinsics")
    st, _ = _classify(pri, cfg, cfg.seed)
    bcfg = BAConfig(**{**cfg.ba.__dict__, "all_pairs": a.ba_all_pairs or cfg.ba.all_pairs})
    H, W = pri.depth.shape
    with ConvergenceLog(out / "ba_log.txt") as log:
        res = solve_bundle(pri.tracks.subset(st), pri.depth, a.init_focal, (W, H), known=known, config=bcfg, log=log)
    res.camera.save(out / "camera_solved.json")
    (out / "depth_scales.json").write_text(json.dumps([float(s) for s in res.depth.scale]) + "\n", encoding="utf-8")
    print(f"focal {res.camera.intrinsics[0]:.6g}  objective {res.initial_value:.6g} -> {res.value:.6g}")
    print(f"wrote {out / 'camera_solved.json'}")
    return 0


def _depth_with_scales(pri, cam_path: Path):
    from .priors import DepthStack

    sp = cam_path.parent / "depth_scales.json"
    if sp.exists():
        return DepthStack(pri.depth.maps, json.loads(sp.read_text(encoding="utf-8")))
    return pri.depth


def cmd_lift(a) -> int:
    from .config import load_config
    from .lift import init_scaffold, lift_tracks
    from .priors import load_priors
    from .scaffold import write_msca

    data = Path(a.data)
    pri = load_priors(data, load_rgb=False)
    cfg = load_config(a.config)
    cam = _camera_arg(a.camera, data, pri.num_frames)
    depth = _depth_with_scales(pri, Path(a.camera) if a.camera else data / "camera.json")
    _, dy = _classify(pri, cfg, cfg.seed)
    if len(dy) == 0:
        raise UsageError("no dynamic tracks found; nothing to lift")
    h, vis = lift_tracks(pri.tracks, cam, depth, dy)
    sc, kept = init_scaffold(h, a.r_init, a.spacing, a.K, cfg.lift.levels, cfg.lift.factor, cfg.lift.K_coarse, vis=vis)
    write_msca(sc, a.out)
    np.save(Path(a.out).with_suffix(".tracks.npy"), dy[kept])
    print(f"{sc.num_nodes} nodes from {len(dy)} dynamic tracks -> {a.out}")
    return 0


def cmd_fuse(a) -> int:
    from .config import load_config
    from .gaussians import DynGaussianSet, FusedScene, bind, init_gaussians, init_static, track_gaussians, write_m4d
    from .priors import foreground_masks, load_priors
    from .scaffold import read_msca

    data = Path(a.data)
    pri = load_priors(data)
    cfg = load_config(a.config)
    cam = _camera_arg(a.camera, data, pri.num_frames)
    depth = _depth_with_scales(pri, Path(a.camera) if a.camera else data / "camera.json")
    sc = read_msca(a.scaffold)
    if sc.num_frames != pri.num_frames:
        raise UsageError(f"scaffold has {sc.num_frames} frames, data has {pri.num_frames}")
    _, dy = _classify(pri, cfg, cfg.seed)
    H, W = depth.shape
    masks = foreground_masks(pri.tracks, dy, (H, W), cfg.epipolar.fg_radius)
    gc = cfg.gaussians
    static_g = init_static(depth, cam, ~masks, gc.static_stride, pri.rgb, gc.opacity)
    dense = init_gaussians(depth, cam, masks, gc.stride, pri.rgb, gc.opacity)
    tracked = track_gaussians(pri.tracks, dy, cam, depth, 1, pri.rgb, gc.opacity)
    g = bind(DynGaussianSet.concat([tracked, dense]), sc)
    write_m4d(FusedScene(g, static_g, sc, cam), a.out)
    print(f"{len(g)} dynamic + {len(static_g)} static Gaussians -> {a.out}")
    return 0


def cmd_render(a) -> int:
    from PIL import Image

    from . import se3
    from .gaussians import fuse_at, preview_render, read_m4d, write_ply

    scene = read_m4d(a.scene)
    cam = scene.camera
    if cam is None:
        raise UsageError(f"{a.scene} carries no camera")
    if not 0 <= a.frame < cam.num_frames:
        raise UsageError(f"frame {a.frame} outside [0, {cam.num_frames})")
    pose = None
    if a.pose:
        m = np.asarray(json.loads(Path(a.pose).read_text(encoding="utf-8")), float)
        if m.shape not in ((3, 4), (4, 4)):
            raise UsageError("--pose expects a 3x4 or 4x4 world-from-camera matrix")
        pose = se3.RigidTransform.from_matrix(m[:3])
    rgb, _ = preview_render(a.frame, scene.dynamic, scene.static, cam, scene.scaffold, pose=pose)
    Image.fromarray((np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)).save(a.out)
    if a.ply:
        pts = [scene.static.mu]
        cols = [scene.static.color]
        if len(scene.dynamic) and scene.scaffold is not None:
            pts.append(fuse_at(a.frame, scene.dynamic, scene.scaffold).mu)
            cols.append(scene.dynamic.color)
        write_ply(a.ply, np.concatenate(pts), np.concatenate(cols))
    print(f"wrote {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mosca", description="Motion-scaffold 4D reconstruction from tracks and depth.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("--spec", required=True, help="scene spec (yaml)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("inspect", help="validate a dataset directory and print its manifest")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("config", help="print the configuration")
    s.add_argument("--dump", action="store_true", help="print every key with its default")
    s.add_argument("--config", help="overlay this file on the defaults")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("run", help="run the full pipeline")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--resume", action="store_true", help="reuse completed stages in --out")
    s.add_argument("--init-focal", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--gt", help="ground-truth directory (default: <data>/gt)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="score a run directory against ground truth")
    s.add_argument("--pred", required=True, help="run output directory")
    s.add_argument("--gt", required=True, help="dataset directory or its gt/ folder")
    s.add_argument("--pck-fraction", type=float, default=0.05)
    s.add_argument("--out", help="write report.txt and report.json here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ba", help="solve cameras and depth scales from static tracks")
    s.add_argument("--data", required=True)
    s.add_argument("--init-focal", type=float)
    s.add_argument("--known-intrinsics", action="store_true")
    s.add_argument("--ba-all-pairs", action="store_true")
    s.add_argument("--config")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_ba)

    s = sub.add_parser("lift", help="lift dynamic tracks into a motion scaffold")
    s.add_argument("--data", required=True)
    s.add_argument("--camera", help="solved camera (default: <data>/camera.json)")
    s.add_argument("--r-init", type=float, required=True, help="skinning radius (squared length)")
    s.add_argument("--spacing", type=float, required=True, help="node resampling distance")
    s.add_argument("-K", type=int, default=8, help="topology neighbours")
    s.add_argument("--config")
    s.add_argument("--out", default="scaffold.msca")
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("fuse", help="spawn and bind Gaussians to a scaffold")
    s.add_argument("--data", required=True)
    s.add_argument("--scaffold", required=True)
    s.add_argument("--camera")
    s.add_argument("--config")
    s.add_argument("--out", default="scene.m4d")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("render", help="preview-render one frame of a fused scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--pose", help="json 3x4 world-from-camera matrix")
    s.add_argument("--out", required=True)
    s.add_argument("--ply", help="also export the frame's points as ASCII PLY")
    s.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"mosca {a.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MoscaError as exc:
        print(f"mosca {a.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
