import numpy as np
import pytest
from helpers import scene

from mosca import metrics, se3
from mosca.bundle import (
    BAConfig,
    BAProblem,
    frame_pairs,
    initial_poses,
    loss_depth_align,
    loss_proj,
    scale_invariant_depth_error,
    solve_bundle,
)
from mosca.camera import CameraModel
from mosca.errors import DegenerateGeometry, NonPositiveDepth
from mosca.priors import DepthStack, TrackSet


def _static(d):
    ids = np.flatnonzero(~d.dynamic)
    return d.tracks.subset(ids)


def small_orbit(**kw):
    return scene(kind="rigid-orbit", frames=6, static_tracks=80, **kw)


def test_frame_pairs():
    p = frame_pairs(5)
    offsets = sorted({abs(int(a - b)) for a, b in p})
    assert offsets == [1, 2, 4]
    assert len(p) == 2 * (4 + 3 + 1)
    assert {(int(a), int(b)) for a, b in p} == {(int(b), int(a)) for a, b in p}
    assert len(frame_pairs(5, all_pairs=True)) == 20
    assert len(frame_pairs(1)) == 0


def test_scale_invariant_depth_error():
    assert scale_invariant_depth_error(2.0, 2.0) == 0.0
    assert scale_invariant_depth_error(2.0, 1.0) == pytest.approx(1.5)
    assert scale_invariant_depth_error(1.0, 2.0) == pytest.approx(1.5)


def test_losses_vanish_at_ground_truth():
    d = small_orbit()
    tr = _static(d)
    depth = DepthStack(d.depth)
    lp, g = loss_proj(tr, d.camera, depth)
    lz, _ = loss_depth_align(tr, d.camera, depth)
    n = BAProblem.build(tr, depth).num_terms
    assert lp / n < 1e-6 and lz / n < 1e-9
    assert set(g) == {"intrinsics", "quats", "trans", "log_scale", "corrections"}


def test_losses_grow_under_perturbation():
    d = small_orbit()
    tr, depth = _static(d), DepthStack(d.depth)
    cam = d.camera.copy()
    cam.trans[3] += 0.05
    assert loss_proj(tr, cam, depth)[0] > loss_proj(tr, d.camera, depth)[0] + 1.0


def test_non_positive_corrected_depth_rejected():
    d = small_orbit()
    tr, depth = _static(d), DepthStack(d.depth)
    corr = np.zeros(tr.vis.shape)
    corr[0, np.flatnonzero(tr.vis[0])[0]] = -1e3
    with pytest.raises(NonPositiveDepth):
        loss_depth_align(tr, d.camera, depth, corr)


def test_initial_poses_exact_without_noise():
    d = small_orbit()
    tr, depth = _static(d), DepthStack(d.depth)
    prob = BAProblem.build(tr, depth)
    q, t, ls = initial_poses(prob, d.camera.intrinsics)
    # relative to frame 0: identical up to the gauge fixed by frame 0
    W0 = d.camera.pose(0).inverse()
    for k in range(6):
        ref = W0 @ d.camera.pose(k)
        assert np.allclose(se3.RigidTransform(q[k], t[k]).as_matrix(), ref.as_matrix(), atol=1e-8)
    assert np.allclose(ls, 0.0, atol=1e-9)


def test_known_intrinsics_mode():
    d = small_orbit(depth_scales={2: 1.2})
    res = solve_bundle(_static(d), DepthStack(d.depth), known=d.camera, config=BAConfig(iterations=60))
    assert np.array_equal(res.camera.intrinsics, d.camera.intrinsics)
    assert metrics.ate(res.camera, d.camera) < 1e-6
    assert res.depth.scale[2] == pytest.approx(1 / 1.2, rel=1e-6)
    assert res.value <= res.initial_value and not res.degenerate


def test_solver_argument_errors():
    d = small_orbit()
    tr, depth = _static(d), DepthStack(d.depth)
    with pytest.raises(ValueError):
        solve_bundle(tr, depth)
    with pytest.raises(DegenerateGeometry):
        solve_bundle(tr.subset([]), depth, init_focal=50.0)
    lonely = TrackSet(tr.points[:3], np.eye(3, 6, dtype=bool))
    with pytest.raises(DegenerateGeometry):
        solve_bundle(lonely, depth, init_focal=50.0)


def test_zero_baseline_is_flagged():
    rng = np.random.default_rng(0)
    T, N = 4, 30
    pts = np.repeat(rng.uniform(5, 55, size=(N, 1, 2)), T, axis=1)
    tracks = TrackSet(pts, np.ones((N, T), bool))
    depth = DepthStack(np.full((T, 48, 64), 3.0))
    cam = CameraModel.identity_poses([50, 50, 31.5, 23.5], T, 64, 48)
    cfg = BAConfig(iterations=20, polish_evals=0)
    res = solve_bundle(tracks, depth, known=cam, config=cfg)
    assert res.degenerate
    with pytest.raises(DegenerateGeometry, match="baseline"):
        solve_bundle(tracks, depth, known=cam, config=cfg, strict=True)
