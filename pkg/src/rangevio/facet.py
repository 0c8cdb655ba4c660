"""Ranged-facet measurement model.

A facet is the triangle of three SLAM features selected by triangulating the
current feature projections in image space and picking the triangle pierced
by the laser ray. The predicted range is the ray-to-plane distance

    z = a / b,   a = (p_F2 - p_cam) . n,   b = u_ray . n,
    n = (p_F1 - p_F2) x (p_F3 - p_F2)

with everything expressed in the world frame. The Jacobian row touches only
the current inertial pose and the three facet features (through their anchor
clones and inverse-depth triplets): range updates add no state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .delaunay import delaunay, locate, triangle_min_angle
from .ekf import scalar_update
from .errors import BehindCameraError, DegenerateGeometryError, FeatureAtInfinityError
from .rotations import quat_to_rotation, skew
from .state import ATT, POS, CameraMount, FilterState, feature_world_point
from .vision import MeasurementNoise, project

logger = logging.getLogger(__name__)

DEFAULT_MAX_RANGE = 40.0
B_EPS = 1e-6
MIN_FACET_ANGLE = math.radians(2.0)


@dataclass
class RangeSample:
    range_m: float
    stamp: float

    def validate(self, max_range: float = DEFAULT_MAX_RANGE):
        if not (0.0 < self.range_m <= max_range):
            raise ValueError(f"range {self.range_m} outside (0, {max_range}]")


@dataclass
class LrfExtrinsics:
    """Laser ray direction in the camera frame (unit vector, zero lever arm)."""

    u_r_cam: np.ndarray

    def __post_init__(self):
        self.u_r_cam = np.asarray(self.u_r_cam, dtype=float)
        n = np.linalg.norm(self.u_r_cam)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("LRF axis must be unit norm")

    @staticmethod
    def along_optical_axis() -> "LrfExtrinsics":
        return LrfExtrinsics(np.array([0.0, 0.0, 1.0]))


@dataclass
class Facet:
    """Three facet features with the geometry of the pierced plane.

    ``feature_indices`` index the filter state's feature list;
    F2 is the member with the smallest track id (deterministic, the predicted
    range is invariant to that choice).
    """

    feature_indices: tuple[int, int, int]  # ordered (F1, F2, F3)
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    n_w: np.ndarray
    a: float
    b: float

    @property
    def intersection(self) -> np.ndarray:
        # filled by the builder: p_cam + (a/b) * u_w
        return self._p_i

    def set_intersection(self, p_i: np.ndarray):
        self._p_i = p_i


class GateVerdict(Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    NO_FACET = "no_facet"
    DEGENERATE = "degenerate"
    NEGATIVE_PREDICTION = "negative_prediction"
    NUMERICAL = "numerical"


@dataclass
class GateRecord:
    stamp: float
    verdict: GateVerdict
    measured: float = float("nan")
    predicted: float = float("nan")
    innovation: float = float("nan")
    innovation_var: float = float("nan")
    feature_ids: tuple[int, int, int] | None = None


def facet_plane_geometry(p_cam, u_w, p1, p2, p3):
    """(z, a, b, n) for the ray/facet-plane intersection; pure geometry."""
    n = np.cross(p1 - p2, p3 - p2)
    a = float((p2 - p_cam) @ n)
    b = float(u_w @ n)
    z = a / b if b != 0.0 else float("inf")
    return z, a, b, n


def select_facet(
    state: FilterState,
    cam_pos: np.ndarray,
    C_cam: np.ndarray,
    u_r_cam: np.ndarray,
) -> tuple[Facet | None, GateVerdict | None]:
    """Build the facet pierced by the laser ray, if any.

    Projects the in-state features into the current camera, Delaunay-
    triangulates them, and locates the triangle containing the ray's image
    point. Returns (facet, None) on success or (None, reason).
    """
    if abs(u_r_cam[2]) < 1e-9:
        return None, GateVerdict.NO_FACET
    ray_uv = np.array([u_r_cam[0] / u_r_cam[2], u_r_cam[1] / u_r_cam[2]])

    idxs = []
    uvs = []
    world = []
    for j, f in enumerate(state.features):
        try:
            p_w = feature_world_point(f, state.clones[f.anchor_index])
        except FeatureAtInfinityError:
            continue
        p_cam = C_cam @ (p_w - cam_pos)
        if p_cam[2] <= 1e-6:
            continue
        idxs.append(j)
        uvs.append([p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]])
        world.append(p_w)
    if len(idxs) < 3:
        return None, GateVerdict.NO_FACET
    try:
        tri = delaunay(np.array(uvs))
    except DegenerateGeometryError:
        return None, GateVerdict.NO_FACET
    loc = locate(tri, ray_uv)
    if loc is None:
        return None, GateVerdict.NO_FACET
    local = tri.triangles[loc]
    members = [idxs[v] for v in local]
    # F2 = smallest track id for determinism; prediction is invariant to this
    order = sorted(range(3), key=lambda i: state.features[members[i]].track_id)
    f2 = members[order[0]]
    f1 = members[order[1]]
    f3 = members[order[2]]
    pw = {j: world[idxs.index(j)] for j in members}
    facet = _build_facet((f1, f2, f3), pw[f1], pw[f2], pw[f3], cam_pos, C_cam.T @ u_r_cam)
    if triangle_min_angle(np.array([pw[f1], pw[f2], pw[f3]])) < MIN_FACET_ANGLE:
        return None, GateVerdict.DEGENERATE
    if abs(facet.b) <= B_EPS:
        return None, GateVerdict.DEGENERATE
    return facet, None


def _build_facet(indices, p1, p2, p3, cam_pos, u_w) -> Facet:
    z, a, b, n = facet_plane_geometry(cam_pos, u_w, p1, p2, p3)
    facet = Facet(indices, p1, p2, p3, n, a, b)
    facet.set_intersection(cam_pos + (a / b) * u_w if b != 0 else np.full(3, np.nan))
    return facet


def predict_range(
    cam_pos: np.ndarray,
    C_cam: np.ndarray,
    facet: Facet,
    u_r_cam: np.ndarray,
    b_eps: float = B_EPS,
) -> float:
    """Predicted laser range to the facet plane; raises on degenerate geometry."""
    u_w = C_cam.T @ np.asarray(u_r_cam, dtype=float)
    z, _, b, _ = facet_plane_geometry(cam_pos, u_w, facet.p1, facet.p2, facet.p3)
    if abs(b) <= b_eps:
        raise DegenerateGeometryError("laser ray grazes the facet plane")
    if z <= 0:
        raise DegenerateGeometryError("facet behind the laser origin")
    return z


def range_jacobian(
    state: FilterState,
    facet: Facet,
    mount: CameraMount,
    lrf: LrfExtrinsics,
) -> tuple[float, np.ndarray]:
    """Predicted range and its Jacobian row over the full error state.

    Nonzero blocks: current IMU position/attitude and the three facet
    features (via their anchor clones and inverse-depth triplets).
    """
    C_i = quat_to_rotation(state.inertial.q_w_i)
    C_ci = mount.rotation()
    cam_pos = state.inertial.p_w_i + C_i.T @ mount.p_ic
    u_i = C_ci.T @ lrf.u_r_cam  # laser axis in IMU coordinates
    u_w = C_i.T @ u_i

    z, a, b, n = facet_plane_geometry(cam_pos, u_w, facet.p1, facet.p2, facet.p3)
    if abs(b) <= B_EPS:
        raise DegenerateGeometryError("laser ray grazes the facet plane")
    p_i = cam_pos + z * u_w

    H = np.zeros(state.error_dim())
    # camera position moves with IMU position and, through the lever arm, attitude
    dh_dpc = -n / b
    H[POS] = dh_dpc
    dh_dthetai = dh_dpc @ (-C_i.T @ skew(mount.p_ic)) + (a / b**2) * (n @ (C_i.T @ skew(u_i)))
    H[ATT] = dh_dthetai

    # facet feature blocks (world-position rows, then chained to the state)
    rows = {
        facet.feature_indices[0]: skew(facet.p3 - facet.p2) @ (facet.p2 - p_i) / b,
        facet.feature_indices[1]: (n + skew(facet.p1 - facet.p3) @ (facet.p2 - p_i)) / b,
        facet.feature_indices[2]: skew(facet.p2 - facet.p1) @ (facet.p2 - p_i) / b,
    }
    for j, row in rows.items():
        f = state.features[j]
        anchor = state.clones[f.anchor_index]
        C_a = quat_to_rotation(anchor.q_w_c)
        m = np.array([f.alpha, f.beta, 1.0])
        H[state.clone_pos_slice(f.anchor_index)] += row
        H[state.clone_att_slice(f.anchor_index)] += row @ (-(1.0 / f.rho) * C_a.T @ skew(m))
        d_df = np.column_stack(
            [
                (1.0 / f.rho) * C_a.T[:, 0],
                (1.0 / f.rho) * C_a.T[:, 1],
                -(1.0 / f.rho**2) * (C_a.T @ m),
            ]
        )
        H[state.feature_slice(j)] += row @ d_df
    return z, H


def range_update(
    state: FilterState,
    sample: RangeSample,
    mount: CameraMount,
    lrf: LrfExtrinsics,
    noise: MeasurementNoise,
    gamma: float = 2.0,
    max_range: float = DEFAULT_MAX_RANGE,
) -> GateRecord:
    """Mahalanobis-gated scalar EKF update from one laser sample.

    The gate accepts innovations with y^2 / S <= gamma^2 (boundary inclusive).
    The state dimension never changes: the facet constraint reuses existing
    VIO states only.
    """
    sample.validate(max_range)
    dim_before = state.error_dim()

    C_i = quat_to_rotation(state.inertial.q_w_i)
    C_ci = mount.rotation()
    C_cam = C_ci @ C_i
    cam_pos = state.inertial.p_w_i + C_i.T @ mount.p_ic
    facet, reason = select_facet(state, cam_pos, C_cam, lrf.u_r_cam)
    if facet is None:
        return GateRecord(sample.stamp, reason)
    try:
        z_hat, H = range_jacobian(state, facet, mount, lrf)
    except DegenerateGeometryError:
        return GateRecord(sample.stamp, GateVerdict.DEGENERATE)
    if z_hat <= 0:
        return GateRecord(
            sample.stamp, GateVerdict.NEGATIVE_PREDICTION, measured=sample.range_m, predicted=z_hat
        )

    ids = tuple(state.features[j].track_id for j in facet.feature_indices)
    innov = sample.range_m - z_hat
    S = float(H @ state.cov @ H + noise.sigma_r**2)
    if S <= 0 or not np.isfinite(S):
        return GateRecord(sample.stamp, GateVerdict.NUMERICAL, measured=sample.range_m, predicted=z_hat, feature_ids=ids)
    if innov**2 / S > gamma**2:
        return GateRecord(
            sample.stamp,
            GateVerdict.REJECTED,
            measured=sample.range_m,
            predicted=z_hat,
            innovation=innov,
            innovation_var=S,
            feature_ids=ids,
        )
    if not scalar_update(state, H, innov, noise.sigma_r**2):
        return GateRecord(sample.stamp, GateVerdict.NUMERICAL, measured=sample.range_m, predicted=z_hat, feature_ids=ids)
    if state.error_dim() != dim_before:
        raise AssertionError("range update must not change the state dimension")
    return GateRecord(
        sample.stamp,
        GateVerdict.ACCEPTED,
        measured=sample.range_m,
        predicted=z_hat,
        innovation=innov,
        innovation_var=S,
        feature_ids=ids,
    )
