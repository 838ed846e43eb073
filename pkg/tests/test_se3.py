import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from mosca import se3, tgeom
from mosca.errors import DegenerateBlend

quat_raw = arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = arrays(float, 3, elements=st.floats(-10, 10))
weights = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=9)


def as_scipy(q):
    return Rotation.from_quat(np.roll(q, -1))  # scipy is scalar-last


def transform(q, t):
    return se3.RigidTransform(se3.quat_normalize(q), t)


@given(quat_raw, quat_raw)
def test_quat_mul_matches_scipy(a, b):
    a, b = se3.quat_normalize(a), se3.quat_normalize(b)
    ours = se3.quat_to_matrix(se3.quat_mul(a, b))
    ref = (as_scipy(a) * as_scipy(b)).as_matrix()
    assert np.allclose(ours, ref, atol=1e-12)


@given(quat_raw, vec3)
def test_quat_rotate_matches_matrix(q, v):
    q = se3.quat_normalize(q)
    assert np.allclose(se3.quat_rotate(q, v), as_scipy(q).apply(v), atol=1e-10)


@given(quat_raw)
def test_matrix_quat_round_trip(q):
    q = se3.quat_normalize(q)
    back = se3.matrix_to_quat(se3.quat_to_matrix(q))
    assert back[0] >= 0
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-10


def test_matrix_to_quat_all_branches():
    # trace > 0 and each dominant-diagonal branch
    for axis, angle in [((0, 0, 1), 0.3), ((1, 0, 0), 3.0), ((0, 1, 0), 3.0), ((0, 0, 1), 3.0)]:
        q = se3.axis_angle_to_quat(axis, angle)
        assert np.allclose(se3.matrix_to_quat(se3.quat_to_matrix(q)), q, atol=1e-12)


@given(vec3)
def test_rotvec_matches_scipy(rv):
    q = se3.rotvec_to_quat(rv)
    assert np.allclose(se3.quat_to_matrix(q), Rotation.from_rotvec(rv).as_matrix(), atol=1e-10)


def test_rotvec_small_angle():
    assert np.allclose(se3.rotvec_to_quat(np.zeros(3)), [1, 0, 0, 0])


@given(quat_raw, vec3, quat_raw, vec3, vec3)
def test_compose_and_inverse(q1, t1, q2, t2, x):
    a, b = transform(q1, t1), transform(q2, t2)
    assert np.allclose((a @ b).apply(x), a.apply(b.apply(x)), atol=1e-9)
    assert np.allclose(a.inverse().apply(a.apply(x)), x, atol=1e-9)
    assert np.allclose((a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-9)


@given(quat_raw, vec3)
def test_from_matrix_round_trip(q, t):
    a = transform(q, t)
    b = se3.RigidTransform.from_matrix(a.as_matrix())
    assert np.allclose(b.as_matrix(), a.as_matrix(), atol=1e-12)


@given(quat_raw, vec3)
def test_dual_quaternion_round_trip(q, t):
    a = transform(q, t)
    dq = se3.to_dual_quaternion(a)
    assert abs(np.linalg.norm(dq.real) - 1) < 1e-12
    assert abs(np.dot(dq.real, dq.dual)) < 1e-9
    b = se3.from_dual_quaternion(dq)
    assert np.allclose(b.as_matrix(), a.as_matrix(), atol=1e-9)


@settings(max_examples=60)
@given(st.data(), weights)
def test_dqb_output_is_unit(data, ws):
    ws = [max(ws[0], 0.1)] + ws[1:]  # aligned signs keep the sum away from zero
    pairs = [(w, transform(data.draw(quat_raw), data.draw(vec3))) for w in ws]
    dq = se3.to_dual_quaternion(se3.dqb(pairs))
    assert abs(np.linalg.norm(dq.real) - 1) < 1e-9
    assert abs(np.dot(dq.real, dq.dual)) < 1e-9


@given(quat_raw, vec3, st.integers(1, 6), st.floats(0.01, 5.0))
def test_dqb_idempotent(q, t, n, w):
    a = transform(q, t)
    b = se3.dqb([(w, a)] * n)
    assert np.allclose(b.as_matrix(), a.as_matrix(), atol=1e-12)


def test_dqb_antipodal_representations_agree():
    a = se3.RigidTransform(se3.axis_angle_to_quat((0, 0, 1), 0.4), [1.0, 0, 0])
    flipped = se3.RigidTransform(-a.rotation, a.translation)
    b = se3.dqb([(0.5, a), (0.5, flipped)])
    assert np.allclose(b.as_matrix(), a.as_matrix(), atol=1e-12)


def test_dqb_midpoint_of_pure_translations():
    a = se3.RigidTransform(translation=[0, 0, 0])
    b = se3.RigidTransform(translation=[2, 4, 0])
    assert np.allclose(se3.dqb([(1, a), (1, b)]).translation, [1, 2, 0])


def test_dqb_midpoint_rotation_about_axis():
    a = se3.RigidTransform(se3.axis_angle_to_quat((0, 0, 1), 0.0))
    b = se3.RigidTransform(se3.axis_angle_to_quat((0, 0, 1), 1.0))
    m = se3.dqb([(1, a), (1, b)])
    assert math.isclose(float(se3.quat_angle(m.rotation)), 0.5, abs_tol=1e-12)


def test_dqb_errors():
    with pytest.raises(DegenerateBlend):
        se3.dqb([])
    with pytest.raises(DegenerateBlend):
        se3.dqb([(0.0, se3.RigidTransform())])
    with pytest.raises(ValueError):
        se3.dqb([(-1.0, se3.RigidTransform())])


@given(quat_raw, quat_raw)
def test_rotation_log_norm_is_sqrt2_angle(a, b):
    a, b = se3.quat_normalize(a), se3.quat_normalize(b)
    ang = (as_scipy(a) * as_scipy(b).inv()).magnitude()
    assert math.isclose(se3.rotation_log_norm(a, b), math.sqrt(2) * ang, abs_tol=1e-7)
    Ra, Rb = se3.quat_to_matrix(a), se3.quat_to_matrix(b)
    assert math.isclose(se3.rotation_log_norm(Ra, Rb), math.sqrt(2) * ang, abs_tol=1e-6)


@given(vec3.filter(lambda v: np.linalg.norm(v) < 3.1))
def test_rotation_log_inverts_exp(rv):
    R = Rotation.from_rotvec(rv).as_matrix()
    assert np.allclose(se3.rotation_log(R), rv, atol=1e-7)


def test_rotation_log_near_pi():
    rv = np.array([0.0, 0.6, 0.8]) * (math.pi - 1e-8)
    out = se3.rotation_log(Rotation.from_rotvec(rv).as_matrix())
    assert min(np.abs(out - rv).max(), np.abs(out + rv).max()) < 1e-6


def test_skew_is_cross_product():
    v, w = np.array([1.0, -2, 3]), np.array([0.5, 4, -1])
    assert np.allclose(se3.skew(v) @ w, np.cross(v, w))


@given(st.data())
def test_torch_kernels_match_numpy(data):
    a = se3.quat_normalize(data.draw(quat_raw))
    b = se3.quat_normalize(data.draw(quat_raw))
    v = data.draw(vec3)
    ta, tb = torch.tensor(a), torch.tensor(b)
    assert np.allclose(tgeom.quat_mul(ta, tb).numpy(), se3.quat_mul(a, b), atol=1e-12)
    assert np.allclose(tgeom.quat_rotate(ta, torch.tensor(v)).numpy(), se3.quat_rotate(a, v), atol=1e-9)


def test_torch_dqb_matches_numpy():
    rng = np.random.default_rng(0)
    q = se3.random_quat(rng, 4)
    t = rng.normal(size=(4, 3))
    w = rng.random(4)
    ref = se3.dqb([(w[i], se3.RigidTransform(q[i], t[i])) for i in range(4)])
    out = tgeom.dqb(torch.tensor(w), torch.tensor(q), torch.tensor(t))
    qo, to = (o.detach().numpy() for o in out)
    assert min(np.abs(qo - ref.rotation).max(), np.abs(qo + ref.rotation).max()) < 1e-12
    assert np.allclose(to, ref.translation, atol=1e-12)
