"""Filter state containers and covariance bookkeeping.

Error-state layout (minimal attitude errors, 3 per quaternion):

    [ dp(3) dv(3) dtheta(3) dbg(3) dba(3) |
      clone_0: dp_c(3) dtheta_c(3) | ... |
      feature_0: da db drho | ... ]

so the error dimension is ``15 + 6 * n_clones + 3 * n_features``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureAtInfinityError, NonMonotonicStampError
from .rotations import Quaternion, apply_attitude_error, quat_to_rotation, skew

logger = logging.getLogger(__name__)

IMU_DIM = 15
CLONE_DIM = 6
FEATURE_DIM = 3

POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)

COV_FLOOR = 1e-12
GRAVITY_MAG = 9.81


@dataclass
class WorldConstants:
    gravity_w: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY_MAG]))
    dt_nominal: float = 1.0 / 250.0
    allow_nonstandard_gravity: bool = False

    def __post_init__(self):
        self.gravity_w = np.asarray(self.gravity_w, dtype=float)
        mag = float(np.linalg.norm(self.gravity_w))
        if not self.allow_nonstandard_gravity and abs(mag - GRAVITY_MAG) > 0.5:
            raise ValueError(f"gravity magnitude {mag:.3f} is not Earth-like; set allow_nonstandard_gravity")


@dataclass
class InertialState:
    p_w_i: np.ndarray
    v_w_i: np.ndarray
    q_w_i: Quaternion
    b_g: np.ndarray
    b_a: np.ndarray

    def __post_init__(self):
        self.p_w_i = np.asarray(self.p_w_i, dtype=float)
        self.v_w_i = np.asarray(self.v_w_i, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)

    @staticmethod
    def at_rest(p=(0.0, 0.0, 0.0), q: Quaternion | None = None) -> "InertialState":
        return InertialState(
            np.asarray(p, dtype=float),
            np.zeros(3),
            q if q is not None else Quaternion.identity(),
            np.zeros(3),
            np.zeros(3),
        )

    def copy(self) -> "InertialState":
        return InertialState(
            self.p_w_i.copy(),
            self.v_w_i.copy(),
            Quaternion(self.q_w_i.w, self.q_w_i.x, self.q_w_i.y, self.q_w_i.z),
            self.b_g.copy(),
            self.b_a.copy(),
        )

    def is_finite(self) -> bool:
        vals = np.concatenate([self.p_w_i, self.v_w_i, self.q_w_i.as_array(), self.b_g, self.b_a])
        return bool(np.all(np.isfinite(vals)))


@dataclass
class CameraPoseClone:
    p_w_c: np.ndarray
    q_w_c: Quaternion
    stamp: float

    def __post_init__(self):
        self.p_w_c = np.asarray(self.p_w_c, dtype=float)

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q_w_c)


@dataclass
class InverseDepthFeature:
    alpha: float
    beta: float
    rho: float
    anchor_index: int
    track_id: int = -1


@dataclass
class CameraMount:
    """Rigid camera pose in the IMU frame.

    ``q_ic`` satisfies C(q_ic) = C_ci, the IMU-to-camera axis rotation;
    ``p_ic`` is the camera origin expressed in IMU coordinates.
    """

    q_ic: Quaternion
    p_ic: np.ndarray

    def __post_init__(self):
        self.p_ic = np.asarray(self.p_ic, dtype=float)

    @staticmethod
    def identity() -> "CameraMount":
        return CameraMount(Quaternion.identity(), np.zeros(3))

    @staticmethod
    def nadir() -> "CameraMount":
        """Camera looking straight down from a level platform.

        Camera axes in IMU coordinates: x_cam = +x, y_cam = -y, z_cam = -z
        (right-handed, optical axis along -z_imu).
        """
        C_ci = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        return CameraMount(Quaternion.from_rotation(C_ci), np.zeros(3))

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q_ic)

    def camera_pose(self, p_w_i: np.ndarray, q_w_i: Quaternion) -> tuple[np.ndarray, Quaternion]:
        C_i = quat_to_rotation(q_w_i)
        p_c = p_w_i + C_i.T @ self.p_ic
        q_c = q_w_i * self.q_ic
        return p_c, q_c


def inverse_depth_to_cartesian(
    f: InverseDepthFeature,
    anchor: CameraPoseClone,
    cam: CameraPoseClone,
    eps: float = 1e-8,
) -> np.ndarray:
    """Feature position in the ``cam`` frame from its inverse-depth triplet."""
    if abs(f.rho) < eps:
        raise FeatureAtInfinityError(f"rho={f.rho} below {eps}")
    m = np.array([f.alpha, f.beta, 1.0])
    C_a = quat_to_rotation(anchor.q_w_c)
    C_c = quat_to_rotation(cam.q_w_c)
    return C_c @ (anchor.p_w_c + (1.0 / f.rho) * (C_a.T @ m) - cam.p_w_c)


def feature_world_point(f: InverseDepthFeature, anchor: CameraPoseClone, eps: float = 1e-8) -> np.ndarray:
    if abs(f.rho) < eps:
        raise FeatureAtInfinityError(f"rho={f.rho} below {eps}")
    m = np.array([f.alpha, f.beta, 1.0])
    C_a = quat_to_rotation(anchor.q_w_c)
    return anchor.p_w_c + (1.0 / f.rho) * (C_a.T @ m)


class FilterState:
    """Full filter state: inertial block, clone window, SLAM features, covariance."""

    def __init__(
        self,
        inertial: InertialState,
        cov: np.ndarray | None = None,
        stamp: float = 0.0,
    ):
        self.inertial = inertial
        self.clones: list[CameraPoseClone] = []
        self.features: list[InverseDepthFeature] = []
        self.cov = np.asarray(cov, dtype=float) if cov is not None else np.eye(IMU_DIM) * 1e-6
        self.stamp = stamp
        if self.cov.shape != (IMU_DIM, IMU_DIM):
            raise ValueError("initial covariance must be 15x15")

    # ---- layout helpers -------------------------------------------------
    def error_dim(self) -> int:
        return IMU_DIM + CLONE_DIM * len(self.clones) + FEATURE_DIM * len(self.features)

    def clone_start(self, i: int) -> int:
        return IMU_DIM + CLONE_DIM * i

    def feature_start(self, j: int) -> int:
        return IMU_DIM + CLONE_DIM * len(self.clones) + FEATURE_DIM * j

    def clone_pos_slice(self, i: int) -> slice:
        s = self.clone_start(i)
        return slice(s, s + 3)

    def clone_att_slice(self, i: int) -> slice:
        s = self.clone_start(i)
        return slice(s + 3, s + 6)

    def feature_slice(self, j: int) -> slice:
        s = self.feature_start(j)
        return slice(s, s + 3)

    def feature_index(self, track_id: int) -> int | None:
        for j, f in enumerate(self.features):
            if f.track_id == track_id:
                return j
        return None

    # ---- covariance hygiene ---------------------------------------------
    def symmetrize(self):
        self.cov = 0.5 * (self.cov + self.cov.T)

    def floor_diagonal(self, floor: float = COV_FLOOR):
        d = np.diag(self.cov).copy()
        bad = d < floor
        if np.any(bad):
            d[bad] = floor
            np.fill_diagonal(self.cov, d)

    def is_finite(self) -> bool:
        return self.inertial.is_finite() and bool(np.all(np.isfinite(self.cov)))

    # ---- window management ----------------------------------------------
    def clone_pose(self, stamp: float, mount: CameraMount, max_clones: int):
        """Append the current camera pose to the window.

        The covariance is augmented with the exact Jacobian of the clone with
        respect to the inertial error state. If the window is full, the oldest
        clone not anchoring a live feature is marginalized first; when every
        clone anchors features, the oldest clone's features are re-anchored to
        the newest clone and the oldest is then dropped.
        """
        if self.clones and stamp <= self.clones[-1].stamp:
            raise NonMonotonicStampError(f"clone stamp {stamp} not newer than {self.clones[-1].stamp}")
        if len(self.clones) >= max_clones:
            self._drop_one_clone()

        p_c, q_c = mount.camera_pose(self.inertial.p_w_i, self.inertial.q_w_i)
        C_i = quat_to_rotation(self.inertial.q_w_i)
        C_ci = mount.rotation()

        n = self.error_dim()
        J = np.zeros((CLONE_DIM, n))
        J[0:3, POS] = np.eye(3)
        J[0:3, ATT] = -C_i.T @ skew(mount.p_ic)
        J[3:6, ATT] = C_ci

        n_feat = len(self.features)
        ins = IMU_DIM + CLONE_DIM * len(self.clones)
        end = ins + CLONE_DIM
        new_n = n + CLONE_DIM
        P = np.empty((new_n, new_n))
        # existing blocks, with feature rows/cols shifted past the new clone
        P[:ins, :ins] = self.cov[:ins, :ins]
        P[:ins, end:] = self.cov[:ins, ins:]
        P[end:, :ins] = self.cov[ins:, :ins]
        P[end:, end:] = self.cov[ins:, ins:]
        cross = J @ self.cov  # (6, n)
        P[ins:end, :ins] = cross[:, :ins]
        P[ins:end, end:] = cross[:, ins:]
        P[:ins, ins:end] = cross[:, :ins].T
        P[end:, ins:end] = cross[:, ins:].T
        P[ins:end, ins:end] = cross @ J.T

        self.cov = P
        self.clones.append(CameraPoseClone(p_c, Quaternion(q_c.w, q_c.x, q_c.y, q_c.z), stamp))
        self.symmetrize()
        if n_feat != len(self.features):
            raise AssertionError("cloning must not alter features")

    def _drop_one_clone(self):
        # Always marginalize the oldest clone so the window tracks the most
        # recent frames; features anchored there migrate to the newest clone
        # first (one batched covariance transform). Preferring a non-anchor
        # victim instead lets long-lived anchors pin stale clones and starves
        # the window of fresh poses.
        newest = len(self.clones) - 1
        movers = [j for j, f in enumerate(self.features) if f.anchor_index == 0]
        if movers:
            self.reanchor_features(movers, newest)
        self._remove_clone(0)

    def _remove_clone(self, idx: int):
        if any(f.anchor_index == idx for f in self.features):
            raise AssertionError("cannot remove a clone that anchors features")
        sl = slice(self.clone_start(idx), self.clone_start(idx) + CLONE_DIM)
        keep = np.r_[np.arange(0, sl.start), np.arange(sl.stop, self.error_dim())]
        self.cov = self.cov[np.ix_(keep, keep)]
        del self.clones[idx]
        for f in self.features:
            if f.anchor_index > idx:
                f.anchor_index -= 1

    def reanchor_feature(self, j: int, new_anchor: int, eps: float = 1e-8):
        """Re-express feature j relative to another clone, covariance-consistently."""
        self.reanchor_features([j], new_anchor, eps)

    def reanchor_features(self, js: list[int], new_anchor: int, eps: float = 1e-8):
        """Batched re-anchoring: one linear error-state transform for all features.

        The transform T is identity except on the re-anchored feature rows, so
        the covariance map T P T^T only rewrites those rows/columns.
        """
        n = self.error_dim()
        T = np.eye(n)
        updates = []
        for j in js:
            f = self.features[j]
            old = f.anchor_index
            if old == new_anchor:
                continue
            a = self.clones[old]
            b = self.clones[new_anchor]
            if abs(f.rho) < eps:
                raise FeatureAtInfinityError("cannot re-anchor a feature at infinity")
            m = np.array([f.alpha, f.beta, 1.0])
            C_a = quat_to_rotation(a.q_w_c)
            C_b = quat_to_rotation(b.q_w_c)
            p_w = a.p_w_c + (1.0 / f.rho) * (C_a.T @ m)
            q = C_b @ (p_w - b.p_w_c)
            if q[2] <= eps:
                raise FeatureAtInfinityError("feature behind the new anchor")

            # g(q) = (q1/q3, q2/q3, 1/q3)
            dg_dq = np.array(
                [
                    [1.0 / q[2], 0.0, -q[0] / q[2] ** 2],
                    [0.0, 1.0 / q[2], -q[1] / q[2] ** 2],
                    [0.0, 0.0, -1.0 / q[2] ** 2],
                ]
            )
            dq_dpa = C_b
            dq_dthetaa = -(1.0 / f.rho) * C_b @ C_a.T @ skew(m)
            dq_dpb = -C_b
            dq_dthetab = skew(q)
            dq_df = np.column_stack(
                [
                    (1.0 / f.rho) * (C_b @ C_a.T[:, 0]),
                    (1.0 / f.rho) * (C_b @ C_a.T[:, 1]),
                    -(1.0 / f.rho**2) * (C_b @ C_a.T @ m),
                ]
            )

            fs = self.feature_slice(j)
            T[fs, fs] = dg_dq @ dq_df
            T[fs, self.clone_pos_slice(old)] = dg_dq @ dq_dpa
            T[fs, self.clone_att_slice(old)] = dg_dq @ dq_dthetaa
            T[fs, self.clone_pos_slice(new_anchor)] = dg_dq @ dq_dpb
            T[fs, self.clone_att_slice(new_anchor)] = dg_dq @ dq_dthetab
            updates.append((f, q, fs))
        if not updates:
            return
        rows = np.concatenate([np.arange(fs.start, fs.stop) for _, _, fs in updates])
        T_rows = T[rows, :]
        B = T_rows @ self.cov  # (r, n)
        C = B @ T_rows.T
        self.cov[rows, :] = B
        self.cov[:, rows] = B.T
        self.cov[np.ix_(rows, rows)] = 0.5 * (C + C.T)
        for f, q, _ in updates:
            f.alpha = q[0] / q[2]
            f.beta = q[1] / q[2]
            f.rho = 1.0 / q[2]
            f.anchor_index = new_anchor

    def add_feature(
        self,
        feat: InverseDepthFeature,
        cov_ff: np.ndarray,
        cov_fx: np.ndarray | None = None,
    ):
        """Append a feature block; cov_fx carries cross-covariance with the existing error state."""
        n = self.error_dim()
        P = np.zeros((n + FEATURE_DIM, n + FEATURE_DIM))
        P[:n, :n] = self.cov
        P[n:, n:] = cov_ff
        if cov_fx is not None:
            P[n:, :n] = cov_fx
            P[:n, n:] = cov_fx.T
        self.cov = P
        self.features.append(feat)
        self.symmetrize()

    def remove_feature(self, j: int):
        sl = self.feature_slice(j)
        keep = np.r_[np.arange(0, sl.start), np.arange(sl.stop, self.error_dim())]
        self.cov = self.cov[np.ix_(keep, keep)]
        del self.features[j]

    # ---- corrections ------------------------------------------------------
    def apply_correction(self, delta: np.ndarray):
        """Apply an error-state correction to the nominal state."""
        if delta.shape != (self.error_dim(),):
            raise ValueError("correction dimension mismatch")
        self.inertial.p_w_i += delta[POS]
        self.inertial.v_w_i += delta[VEL]
        self.inertial.q_w_i = apply_attitude_error(self.inertial.q_w_i, delta[ATT])
        self.inertial.b_g += delta[BG]
        self.inertial.b_a += delta[BA]
        for i, c in enumerate(self.clones):
            c.p_w_c = c.p_w_c + delta[self.clone_pos_slice(i)]
            c.q_w_c = apply_attitude_error(c.q_w_c, delta[self.clone_att_slice(i)])
        for j, f in enumerate(self.features):
            d = delta[self.feature_slice(j)]
            f.alpha += d[0]
            f.beta += d[1]
            f.rho += d[2]

    def copy(self) -> "FilterState":
        out = FilterState(self.inertial.copy(), np.eye(IMU_DIM), self.stamp)
        out.cov = self.cov.copy()
        out.clones = [CameraPoseClone(c.p_w_c.copy(), Quaternion(c.q_w_c.w, c.q_w_c.x, c.q_w_c.y, c.q_w_c.z), c.stamp) for c in self.clones]
        out.features = [InverseDepthFeature(f.alpha, f.beta, f.rho, f.anchor_index, f.track_id) for f in self.features]
        return out
