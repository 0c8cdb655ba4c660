import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangevio.rotations import (
    Quaternion,
    apply_attitude_error,
    quat_to_rotation,
    renormalization_count,
    skew,
    so3_exp,
    so3_right_jacobian,
)


def random_unit_quaternion(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Quaternion(*q)


def test_identity_quaternion_gives_identity_matrix():
    assert np.allclose(quat_to_rotation(Quaternion.identity()), np.eye(3), atol=1e-15)


def test_90deg_about_z_maps_x_to_minus_y():
    q = Quaternion.from_axis_angle([0, 0, 1], np.pi / 2)
    v = quat_to_rotation(q) @ np.array([1.0, 0.0, 0.0])
    assert np.allclose(v, [0.0, -1.0, 0.0], atol=1e-12)


def test_orthonormality_over_random_samples():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        C = quat_to_rotation(random_unit_quaternion(rng))
        assert np.allclose(C @ C.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(C) - 1.0) < 1e-12


def test_normalization_flagged_for_drifted_input():
    before = renormalization_count()
    C = quat_to_rotation(Quaternion(1.0, 0.0, 0.01, 0.0))
    assert renormalization_count() == before + 1
    assert np.allclose(C @ C.T, np.eye(3), atol=1e-12)


def test_multiplication_matches_matrix_composition():
    rng = np.random.default_rng(2)
    for _ in range(50):
        q1 = random_unit_quaternion(rng)
        q2 = random_unit_quaternion(rng)
        C12 = quat_to_rotation(q1 * q2)
        assert np.allclose(C12, quat_to_rotation(q2) @ quat_to_rotation(q1), atol=1e-12)


def test_from_rotation_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(200):
        q = random_unit_quaternion(rng)
        C = quat_to_rotation(q)
        q2 = Quaternion.from_rotation(C)
        assert np.allclose(quat_to_rotation(q2), C, atol=1e-9)


def test_attitude_error_first_order():
    rng = np.random.default_rng(4)
    q = random_unit_quaternion(rng)
    d = np.array([1e-4, -2e-4, 0.5e-4])
    C_pert = quat_to_rotation(apply_attitude_error(q, d))
    C_lin = (np.eye(3) - skew(d)) @ quat_to_rotation(q)
    assert np.allclose(C_pert, C_lin, atol=1e-7)


def test_rotvec_to_inverts_apply():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = random_unit_quaternion(rng)
        d = rng.normal(0, 0.3, 3)
        q2 = apply_attitude_error(q, d)
        assert np.allclose(q.rotvec_to(q2), d, atol=1e-9)


def test_so3_exp_matches_right_jacobian_definition():
    rng = np.random.default_rng(6)
    for _ in range(30):
        u = rng.normal(0, 1.0, 3)
        d = rng.normal(0, 1, 3) * 1e-6
        lhs = so3_exp(u + d)
        rhs = so3_exp(u) @ so3_exp(so3_right_jacobian(u) @ d)
        assert np.allclose(lhs, rhs, atol=1e-11)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_normalized_quaternion_is_unit(vals):
    q = Quaternion(*vals)
    if q.norm() < 1e-12:
        with pytest.raises(ValueError):
            q.normalized()
        return
    assert abs(q.normalized().norm() - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_from_rotvec_rotation_angle(u):
    u = np.array(u)
    angle = np.linalg.norm(u)
    if angle < 1e-8 or angle > np.pi - 1e-6:
        return
    C = quat_to_rotation(Quaternion.from_rotvec(u))
    tr = np.trace(C)
    recovered = np.arccos(np.clip((tr - 1) / 2, -1, 1))
    assert abs(recovered - angle) < 1e-7
