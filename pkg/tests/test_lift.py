import math

import numpy as np
import pytest
from helpers import linear_fill, random_scaffold, scene
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mosca import se3
from mosca.camera import project
from mosca.errors import InsufficientNodes, NonPositiveDepth
from mosca.lift import (
    GeoConfig,
    _fill_occluded,
    geometric_optimize,
    init_scaffold,
    lift,
    lift_tracks,
    loss_arap,
    loss_smooth,
    select_nodes,
)
from mosca.priors import DepthStack, TrackSet


@settings(max_examples=60)
@given(st.integers(2, 12).flatmap(lambda T: st.tuples(
    arrays(float, (T, 3), elements=st.floats(-5, 5)),
    arrays(bool, T).filter(lambda v: v.any()),
)))
def test_fill_matches_linear_interpolation(case):
    h, vis = case
    out = _fill_occluded(h, vis)
    assert np.allclose(out, linear_fill(h[None], vis[None])[0], atol=1e-12)
    assert np.array_equal(out[vis], h[vis])


def _arm():
    return scene(kind="articulated-arm", frames=8, dynamic_tracks=40, static_tracks=20, occlusion_rate=0.2, seed=1)


def test_lift_recovers_ground_truth_points():
    d = _arm()
    dyn = np.flatnonzero(d.dynamic)
    h, vis = lift_tracks(d.tracks, d.camera, DepthStack(d.depth), dyn)
    gt = d.points3d[dyn]
    assert np.abs(h[vis] - gt[vis]).max() < 1e-6
    # single-track path agrees with the vectorised one
    one = lift(d.tracks[dyn[3]], d.camera, DepthStack(d.depth), source=int(dyn[3]))
    assert np.allclose(one.positions, h[3]) and np.array_equal(one.visibility, vis[3])
    # lifted points reproject onto their tracks
    for t in range(d.tracks.num_frames):
        m = vis[:, t]
        assert np.allclose(project(h[m, t], t, d.camera), d.tracks.points[dyn[m], t], atol=1e-6)


def test_lift_rejects_bad_depth():
    d = _arm()
    maps = d.depth.copy()
    maps[:] = -1.0
    with pytest.raises(NonPositiveDepth):
        lift_tracks(d.tracks, d.camera, DepthStack(maps))
    with pytest.raises(NonPositiveDepth):
        lift(d.tracks[0], d.camera, DepthStack(maps))


def test_select_nodes_prefers_visible_trajectories():
    pos = np.zeros((3, 4, 3))
    vis = np.array([[1, 0, 0, 1], [1, 1, 1, 1], [1, 1, 0, 0]], bool)
    assert list(select_nodes(pos, vis, 0.5)) == [1]


def test_init_scaffold():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(30, 5, 3)) * 3
    sc, kept = init_scaffold(pos, 0.1, 0.5, 4)
    assert sc.num_nodes == len(kept) and sc.K == 4
    assert np.array_equal(sc.trans, pos[kept]) and np.all(sc.quats[..., 0] == 1)
    assert np.all(sc.radius == 0.1)
    with pytest.raises(InsufficientNodes):
        init_scaffold(pos[:3], 0.1, 0.0, 4)


def _arap_oracle(sc, deltas, lambda_l, lambda_c):
    src, dst = sc.pyramid_edges()
    T = sc.num_frames
    total = 0.0
    for m, n in zip(src, dst):
        for d in deltas:
            for t in range(T - d):
                rel = lambda s: sc.trans[m, s] - sc.trans[n, s]
                total += lambda_l * abs(np.linalg.norm(rel(t)) - np.linalg.norm(rel(t + d)))
                Rt = se3.quat_to_matrix(sc.quats[n, t])
                Rd = se3.quat_to_matrix(sc.quats[n, t + d])
                total += lambda_c * np.linalg.norm(Rt.T @ rel(t) - Rd.T @ rel(t + d))
    return total


def _smooth_oracle(sc, lv, la):
    vel = acc = 0.0
    T = sc.num_frames
    ang = lambda m, t: se3.rotation_log_norm(se3.quat_to_matrix(sc.quats[m, t]), se3.quat_to_matrix(sc.quats[m, t + 1]))
    for m in range(sc.num_nodes):
        for t in range(T - 1):
            vel += np.linalg.norm(sc.trans[m, t] - sc.trans[m, t + 1]) + ang(m, t)
        for t in range(T - 2):
            acc += np.linalg.norm(sc.trans[m, t] - 2 * sc.trans[m, t + 1] + sc.trans[m, t + 2])
            acc += abs(ang(m, t) - ang(m, t + 1))
    return lv * vel + la * acc


def test_regulariser_values_match_loops():
    rng = np.random.default_rng(1)
    for _ in range(5):
        sc = random_scaffold(rng, M=7, T=6, K=3)
        assert math.isclose(loss_arap(sc, (1, 2), 0.7, 0.4)[0], _arap_oracle(sc, (1, 2), 0.7, 0.4), rel_tol=1e-9)
        assert math.isclose(loss_smooth(sc, 0.3, 1.1)[0], _smooth_oracle(sc, 0.3, 1.1), rel_tol=1e-7)


def test_arap_rejects_bad_interval():
    with pytest.raises(ValueError):
        loss_arap(random_scaffold(np.random.default_rng(2)), deltas=(0,))


def test_geometric_optimize_contracts():
    rng = np.random.default_rng(3)
    sc = random_scaffold(rng, M=10, T=6, K=3)
    vis = rng.random((10, 6)) < 0.6
    assert geometric_optimize(sc, vis, GeoConfig(lambda_arap=0, lambda_vel=0, lambda_acc=0)).trans is not sc.trans
    with pytest.raises(ValueError):
        geometric_optimize(sc, vis[:, :3], GeoConfig(iterations=5))
    cfg = GeoConfig(iterations=100)
    out = geometric_optimize(sc, vis, cfg)
    assert np.array_equal(out.trans[vis], sc.trans[vis])
    assert np.allclose(np.linalg.norm(out.quats, axis=-1), 1.0)
    before = loss_arap(sc, cfg.deltas, cfg.lambda_l, cfg.lambda_c)[0]
    after = loss_arap(out, cfg.deltas, cfg.lambda_l, cfg.lambda_c)[0]
    assert after < before
