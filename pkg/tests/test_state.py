import numpy as np
import pytest

from rangevio.errors import FeatureAtInfinityError, NonMonotonicStampError
from rangevio.rotations import Quaternion, quat_to_rotation
from rangevio.state import (
    CameraMount,
    CameraPoseClone,
    FilterState,
    InertialState,
    InverseDepthFeature,
    WorldConstants,
    feature_world_point,
    inverse_depth_to_cartesian,
)


def identity_clone(stamp=0.0, p=(0, 0, 0)):
    return CameraPoseClone(np.array(p, dtype=float), Quaternion.identity(), stamp)


class TestInverseDepth:
    def test_on_axis(self):
        f = InverseDepthFeature(0.0, 0.0, 0.5, 0)
        p = inverse_depth_to_cartesian(f, identity_clone(), identity_clone())
        assert np.allclose(p, [0.0, 0.0, 2.0], atol=1e-15)

    def test_componentwise(self):
        f = InverseDepthFeature(0.1, -0.2, 0.25, 0)
        p = inverse_depth_to_cartesian(f, identity_clone(), identity_clone())
        assert np.allclose(p, [0.4, -0.8, 4.0], atol=1e-12)

    def test_translated_camera(self):
        # anchor at origin; camera translated one meter along x
        f = InverseDepthFeature(0.0, 0.0, 0.5, 0)
        cam = identity_clone(p=(1.0, 0.0, 0.0))
        p = inverse_depth_to_cartesian(f, identity_clone(), cam)
        assert np.allclose(p, [-1.0, 0.0, 2.0], atol=1e-12)

    def test_feature_at_infinity(self):
        f = InverseDepthFeature(0.0, 0.0, 1e-12, 0)
        with pytest.raises(FeatureAtInfinityError):
            inverse_depth_to_cartesian(f, identity_clone(), identity_clone())


class TestWorldConstants:
    def test_earthlike_ok(self):
        WorldConstants()

    def test_rejects_nonstandard_gravity(self):
        with pytest.raises(ValueError):
            WorldConstants(gravity_w=np.array([0, 0, -3.7]))

    def test_override(self):
        WorldConstants(gravity_w=np.array([0, 0, -3.7]), allow_nonstandard_gravity=True)


def make_state():
    return FilterState(InertialState.at_rest(p=(1.0, 2.0, 11.0)), np.eye(15) * 1e-4, 0.0)


class TestCloneWindow:
    def test_clone_grows_dimension(self):
        st = make_state()
        st.clone_pose(0.1, CameraMount.nadir(), 4)
        assert len(st.clones) == 1
        assert st.cov.shape == (21, 21)
        assert st.error_dim() == 21

    def test_clone_pose_matches_mount_composition(self):
        st = make_state()
        mount = CameraMount.nadir()
        st.clone_pose(0.1, mount, 4)
        c = st.clones[-1]
        C_i = quat_to_rotation(st.inertial.q_w_i)
        assert np.allclose(c.p_w_c, st.inertial.p_w_i + C_i.T @ mount.p_ic, atol=1e-12)
        assert np.allclose(
            quat_to_rotation(c.q_w_c), mount.rotation() @ C_i, atol=1e-12
        )

    def test_window_capped_at_max(self):
        st = make_state()
        for k in range(6):
            st.clone_pose(0.1 * (k + 1), CameraMount.nadir(), 4)
        assert len(st.clones) == 4
        assert np.allclose([c.stamp for c in st.clones], [0.3, 0.4, 0.5, 0.6])

    def test_stale_stamp_rejected(self):
        st = make_state()
        st.clone_pose(0.1, CameraMount.nadir(), 4)
        with pytest.raises(NonMonotonicStampError):
            st.clone_pose(0.1, CameraMount.nadir(), 4)

    def test_stamps_strictly_increase(self):
        st = make_state()
        for k in range(8):
            st.clone_pose(0.05 * (k + 1), CameraMount.nadir(), 4)
        stamps = [c.stamp for c in st.clones]
        assert all(a < b for a, b in zip(stamps, stamps[1:]))

    def test_covariance_stays_symmetric(self):
        st = make_state()
        for k in range(6):
            st.clone_pose(0.1 * (k + 1), CameraMount.nadir(), 4)
        assert np.allclose(st.cov, st.cov.T, atol=1e-9)


class TestReanchor:
    def setup_state(self):
        st = make_state()
        rng = np.random.default_rng(11)
        mount = CameraMount.nadir()
        for k in range(4):
            st.inertial.p_w_i = st.inertial.p_w_i + np.array([0.2, 0.01, 0.0])
            st.clone_pose(0.1 * (k + 1), mount, 4)
        # feature 3 m below the first clone
        anchor = 0
        p_w = st.clones[anchor].p_w_c + quat_to_rotation(st.clones[anchor].q_w_c).T @ np.array(
            [0.1, -0.05, 3.0]
        )
        q = quat_to_rotation(st.clones[anchor].q_w_c) @ (p_w - st.clones[anchor].p_w_c)
        feat = InverseDepthFeature(q[0] / q[2], q[1] / q[2], 1.0 / q[2], anchor, track_id=7)
        st.add_feature(feat, np.diag([1e-5, 1e-5, 1e-3]))
        st.cov += 1e-6 * np.eye(st.error_dim())  # generic cross terms
        st.symmetrize()
        return st, p_w

    def test_world_point_preserved(self):
        st, p_w = self.setup_state()
        st.reanchor_feature(0, 3)
        f = st.features[0]
        assert f.anchor_index == 3
        p_w2 = feature_world_point(f, st.clones[3])
        assert np.allclose(p_w, p_w2, atol=1e-10)

    def test_anchor_alive_after_window_slide(self):
        st, _ = self.setup_state()
        for k in range(4, 8):
            st.clone_pose(0.1 * (k + 1), CameraMount.nadir(), 4)
            assert st.features[0].anchor_index < len(st.clones)
            # anchor must reference a live clone holding the same world point
            feature_world_point(st.features[0], st.clones[st.features[0].anchor_index])

    def test_covariance_transform_matches_monte_carlo(self):
        # sampled errors pushed through the nonlinear re-anchor map should
        # have the covariance predicted by the linear transform
        st, _ = self.setup_state()
        before = st.copy()
        st.reanchor_feature(0, 3)
        rng = np.random.default_rng(12)
        n = before.error_dim()
        L = np.linalg.cholesky(before.cov + 1e-12 * np.eye(n))
        fs = before.feature_slice(0)
        samples = []
        for _ in range(4000):
            delta = L @ rng.standard_normal(n)
            pert = before.copy()
            pert.apply_correction(delta)
            try:
                pert.reanchor_feature(0, 3)
            except FeatureAtInfinityError:
                continue  # far-tail draw pushed the feature behind the anchor
            f = pert.features[0]
            g = st.features[0]
            samples.append([f.alpha - g.alpha, f.beta - g.beta, f.rho - g.rho])
        emp = np.cov(np.array(samples).T)
        pred = st.cov[fs, fs]
        assert np.allclose(emp, pred, rtol=0.15, atol=2e-7)


class TestCorrections:
    def test_dimension_checked(self):
        st = make_state()
        with pytest.raises(ValueError):
            st.apply_correction(np.zeros(14))

    def test_first_order_consistency_ratio(self):
        # residual between nonlinear perturbation and linear prediction decays
        # quadratically: halving the error shrinks it by >= 1.9x per halving
        st = make_state()
        st.clone_pose(0.1, CameraMount.nadir(), 4)
        st.inertial.p_w_i = st.inertial.p_w_i + np.array([0.8, 0.1, 0.0])
        st.clone_pose(0.2, CameraMount.nadir(), 4)
        f = InverseDepthFeature(0.05, -0.02, 1.0 / 9.0, 0, track_id=1)
        st.add_feature(f, np.diag([1e-5, 1e-5, 1e-2]))

        def measure(s: FilterState) -> np.ndarray:
            p_cam = inverse_depth_to_cartesian(s.features[0], s.clones[0], s.clones[1])
            return np.array([p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]])

        from rangevio.vision import slam_feature_jacobian

        z0, H, _ = slam_feature_jacobian(st, 0, 1)
        rng = np.random.default_rng(13)
        direction = rng.standard_normal(st.error_dim())
        direction /= np.linalg.norm(direction)

        residuals = []
        for eps in (1e-2, 5e-3):
            pert = st.copy()
            pert.apply_correction(eps * direction)
            z1 = measure(pert)
            lin = z0 + H @ (eps * direction)
            residuals.append(np.linalg.norm(z1 - lin))
        assert residuals[1] > 1e-12
        assert residuals[0] / residuals[1] >= 1.9


def test_feature_add_remove_bookkeeping():
    st = make_state()
    st.clone_pose(0.1, CameraMount.nadir(), 4)
    st.add_feature(InverseDepthFeature(0, 0, 0.5, 0, track_id=1), np.eye(3) * 1e-4)
    st.add_feature(InverseDepthFeature(0, 0, 0.2, 0, track_id=2), np.eye(3) * 1e-4)
    assert st.error_dim() == 15 + 6 + 6
    st.remove_feature(0)
    assert [f.track_id for f in st.features] == [2]
    assert st.cov.shape == (24, 24)
    assert st.feature_index(2) == 0
