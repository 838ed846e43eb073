import json

import numpy as np
import pytest
import yaml

from mosca import metrics
from mosca.cli import EXIT_FAILURE, EXIT_USAGE, main
from mosca.config import PipelineConfig, to_dict
from mosca.gaussians import read_m4d
from mosca.scaffold import read_msca

FAST = "geo:\n  iterations: 60\nphoto:\n  iterations: 40\n  control_every: 20\nba:\n  iterations: 60\n"


def _synth(tmp_path, name, **spec):
    p = tmp_path / f"{name}.yaml"
    p.write_text(yaml.safe_dump(spec))
    assert main(["synth", "--spec", str(p), "--out", str(tmp_path / name)]) == 0
    return tmp_path / name


@pytest.fixture(scope="module")
def two_body(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = _synth(root, "data", kind="two-body", frames=8, dynamic_tracks=30, static_tracks=60, camera_json="full", seed=1)
    cfg = root / "fast.yaml"
    cfg.write_text(FAST)
    return root, data, cfg


def test_missing_subcommand_is_argparse_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_config_dump(capsys, tmp_path):
    assert main(["config", "--dump"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == to_dict(PipelineConfig())
    bad = tmp_path / "bad.yaml"
    bad.write_text("nope: 1\n")
    with pytest.raises(ValueError):
        main(["config", "--config", str(bad)])


def test_inspect(two_body, capsys):
    _, data, _ = two_body
    assert main(["inspect", "--data", str(data)]) == 0
    man = json.loads(capsys.readouterr().out)
    assert man  # manifest is a non-empty mapping
    assert main(["inspect", "--data", str(data / "missing")]) == EXIT_FAILURE


def test_run_requires_focal_without_camera(tmp_path, capsys):
    data = _synth(tmp_path, "nocam", kind="rigid-orbit", frames=4, static_tracks=20, camera_json="none")
    assert main(["run", "--data", str(data), "--out", str(tmp_path / "o"), "--no-figures"]) == EXIT_USAGE
    assert "init-focal" in capsys.readouterr().err
    assert main(["ba", "--data", str(data), "--out", str(tmp_path / "b")]) == EXIT_USAGE


def test_run_resume_and_eval(two_body, capsys):
    root, data, cfg = two_body
    out = root / "run"
    assert main(["run", "--data", str(data), "--out", str(out), "--config", str(cfg)]) == 0
    for name in ("report.txt", "report.json", "scene.m4d", "scaffold.msca", "tracks_pred.npy",
                 "pck.png", "pck_curve.csv", "per_frame.tsv", "camera_trajectory.png"):
        assert (out / name).exists(), name
    rep = metrics.EvalReport.load(out)
    assert rep.ate < 1e-6 and 0.0 <= rep.pck_t <= 1.0
    first = (out / "report.json").read_bytes()
    capsys.readouterr()

    assert main(["run", "--data", str(data), "--out", str(out), "--config", str(cfg), "--resume", "--no-figures"]) == 0
    text = capsys.readouterr().out
    assert "resumed stages: classify, camera, lift, geometry, fuse, optimize" in text
    assert (out / "report.json").read_bytes() == first

    ev = root / "eval"
    assert main(["eval", "--pred", str(out), "--gt", str(data), "--out", str(ev)]) == 0
    assert (ev / "report.json").read_bytes() == first


def test_stage_commands(two_body, tmp_path, capsys):
    _, data, cfg = two_body
    sc_path = tmp_path / "s.msca"
    assert main(["lift", "--data", str(data), "--r-init", "0.01", "--spacing", "0.1", "-K", "4",
                 "--config", str(cfg), "--out", str(sc_path)]) == 0
    sc = read_msca(sc_path)
    assert sc.num_frames == 8 and sc.K == 4
    assert len(np.load(tmp_path / "s.tracks.npy")) == sc.num_nodes

    m4d = tmp_path / "scene.m4d"
    assert main(["fuse", "--data", str(data), "--scaffold", str(sc_path), "--config", str(cfg), "--out", str(m4d)]) == 0
    scene = read_m4d(m4d)
    assert len(scene.dynamic) > 0 and len(scene.static) > 0

    png, ply = tmp_path / "f.png", tmp_path / "f.ply"
    assert main(["render", "--scene", str(m4d), "--frame", "3", "--out", str(png), "--ply", str(ply)]) == 0
    assert png.stat().st_size > 0 and ply.read_text().startswith("ply")
    assert main(["render", "--scene", str(m4d), "--frame", "99", "--out", str(png)]) == EXIT_USAGE
    pose = tmp_path / "pose.json"
    pose.write_text("[[1, 0]]")
    assert main(["render", "--scene", str(m4d), "--frame", "0", "--pose", str(pose), "--out", str(png)]) == EXIT_USAGE
    pose.write_text(json.dumps(np.eye(4)[:3].tolist()))
    assert main(["render", "--scene", str(m4d), "--frame", "0", "--pose", str(pose), "--out", str(png)]) == 0
    assert "usage error" in capsys.readouterr().err


def test_ba_known_intrinsics(tmp_path, capsys):
    data = _synth(tmp_path, "orbit", kind="rigid-orbit", frames=5, static_tracks=60, camera_json="intrinsics",
                  depth_scales={2: 1.25})
    cfg = tmp_path / "c.yaml"
    cfg.write_text("ba:\n  iterations: 60\n")
    out = tmp_path / "ba"
    assert main(["ba", "--data", str(data), "--known-intrinsics", "--config", str(cfg), "--out", str(out)]) == 0
    scales = json.loads((out / "depth_scales.json").read_text())
    assert scales[2] == pytest.approx(1 / 1.25, rel=1e-5)
    assert (out / "camera_solved.json").exists() and (out / "ba_log.txt").exists()
    # a scaffold needs per-frame poses; an intrinsics-only camera is refused
    assert main(["lift", "--data", str(data), "--r-init", "0.01", "--spacing", "0.1"]) == EXIT_USAGE
