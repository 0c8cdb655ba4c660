"""Visual measurement models: pinhole projection, hybrid SLAM/MSCKF updates,
feature triangulation, and track/state management.

All image coordinates are on the normalized plane z = 1. A SLAM feature's
measurement is the projection of its inverse-depth point transferred from the
anchor clone to the observing clone; Jacobians are taken with respect to both
clone poses and the (alpha, beta, rho) triplet.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from .ekf import chi2_gate, ekf_update
from .errors import BehindCameraError, DegenerateGeometryError
from .rotations import quat_to_rotation, skew
from .state import (
    CameraPoseClone,
    FilterState,
    InverseDepthFeature,
    inverse_depth_to_cartesian,
)

logger = logging.getLogger(__name__)

Z_EPS = 1e-6


@dataclass
class MeasurementNoise:
    sigma_v: float = 0.002  # normalized image plane
    sigma_r: float = 0.025  # meters

    def __post_init__(self):
        if self.sigma_v <= 0 or self.sigma_r <= 0:
            raise ValueError("measurement noise sigmas must be positive")


class TrackStatus(Enum):
    CANDIDATE = "candidate"
    SLAM = "slam"
    MSCKF = "msckf"
    DEAD = "dead"


@dataclass
class FeatureObservation:
    track_id: int
    stamp: float
    uv: np.ndarray
    score: float = 0.0

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)


@dataclass
class Track:
    track_id: int
    observations: list[FeatureObservation] = field(default_factory=list)
    status: TrackStatus = TrackStatus.CANDIDATE
    score: float = 0.0

    def add(self, obs: FeatureObservation):
        if self.observations and obs.stamp <= self.observations[-1].stamp:
            raise ValueError("track observations must be time-ordered")
        self.observations.append(obs)
        self.score = max(self.score, obs.score)

    def stamps(self) -> list[float]:
        return [o.stamp for o in self.observations]


def project(point_cam, eps: float = Z_EPS) -> np.ndarray:
    """Pinhole projection onto the normalized plane."""
    p = np.asarray(point_cam, dtype=float)
    if p[2] <= eps:
        raise BehindCameraError(f"z={p[2]}")
    return np.array([p[0] / p[2], p[1] / p[2]])


def projection_jacobian(point_cam) -> np.ndarray:
    x, y, z = point_cam
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


def slam_feature_jacobian(
    state: FilterState, feat_idx: int, clone_idx: int, H_out: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted uv, residual Jacobian row pair, and camera-frame point for a SLAM feature.

    The returned H spans the full error state; nonzero blocks sit on the
    observing clone, the anchor clone, and the feature triplet. ``H_out``
    lets callers stack rows without reallocating.
    """
    f = state.features[feat_idx]
    anchor = state.clones[f.anchor_index]
    cam = state.clones[clone_idx]
    p_cam = inverse_depth_to_cartesian(f, anchor, cam)
    z_hat = project(p_cam)
    Jp = projection_jacobian(p_cam)

    C_c = quat_to_rotation(cam.q_w_c)
    C_ca = C_c @ quat_to_rotation(anchor.q_w_c).T
    m = np.array([f.alpha, f.beta, 1.0])

    H = H_out if H_out is not None else np.zeros((2, state.error_dim()))
    JpC = Jp @ C_c
    # observing clone
    H[:, state.clone_pos_slice(clone_idx)] -= JpC
    H[:, state.clone_att_slice(clone_idx)] += Jp @ skew(p_cam)
    # anchor clone
    H[:, state.clone_pos_slice(f.anchor_index)] += JpC
    H[:, state.clone_att_slice(f.anchor_index)] -= (1.0 / f.rho) * (Jp @ C_ca @ skew(m))
    # feature triplet
    d_df = np.empty((3, 3))
    d_df[:, :2] = C_ca[:, :2] / f.rho
    d_df[:, 2] = -(1.0 / f.rho**2) * (C_ca @ m)
    H[:, state.feature_slice(feat_idx)] = Jp @ d_df
    return z_hat, H, p_cam


@dataclass
class InnovationRecord:
    track_id: int
    innovation: np.ndarray
    mahalanobis_sq: float
    accepted: bool


def slam_update(
    state: FilterState,
    observations: list[tuple[int, np.ndarray]],
    noise: MeasurementNoise,
    confidence: float = 0.95,
) -> list[InnovationRecord]:
    """EKF update from current-frame observations of in-state features.

    ``observations`` holds (feature_index, measured_uv) pairs referring to the
    newest clone. Each feature is Mahalanobis-gated before stacking; a
    non-invertible stacked innovation covariance skips the update.
    """
    if not observations:
        return []
    clone_idx = len(state.clones) - 1
    records = []
    gate = chi2_gate(confidence, 2)
    dim = state.error_dim()
    H_all = np.zeros((2 * len(observations), dim))
    r_all = np.zeros(2 * len(observations))
    kept = []
    row = 0
    for feat_idx, uv in observations:
        sl = slice(row, row + 2)
        try:
            z_hat, _, _ = slam_feature_jacobian(state, feat_idx, clone_idx, H_out=H_all[sl])
        except BehindCameraError:
            H_all[sl] = 0.0
            records.append(InnovationRecord(state.features[feat_idx].track_id, np.zeros(2), np.inf, False))
            continue
        r = np.asarray(uv, dtype=float) - z_hat
        PHt = state.cov @ H_all[sl].T  # (dim, 2)
        s00 = float(H_all[sl.start] @ PHt[:, 0]) + noise.sigma_v**2
        s11 = float(H_all[sl.start + 1] @ PHt[:, 1]) + noise.sigma_v**2
        s01 = float(H_all[sl.start] @ PHt[:, 1])
        det = s00 * s11 - s01 * s01
        if det <= 0 or not np.isfinite(det):
            H_all[sl] = 0.0
            records.append(InnovationRecord(state.features[feat_idx].track_id, r, np.inf, False))
            continue
        m2 = (s11 * r[0] ** 2 - 2 * s01 * r[0] * r[1] + s00 * r[1] ** 2) / det
        ok = m2 <= gate
        records.append(InnovationRecord(state.features[feat_idx].track_id, r, m2, ok))
        if ok:
            r_all[sl] = r
            kept.append(row)
            kept.append(row + 1)
            row += 2
        else:
            H_all[sl] = 0.0
    if kept:
        H = H_all[:row]
        r = r_all[:row]
        R = noise.sigma_v**2 * np.eye(row)
        if not ekf_update(state, H, r, R):
            logger.warning("slam update skipped: singular innovation covariance")
    return records


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def triangulate_linear(poses: list[tuple[np.ndarray, np.ndarray]], uvs: list[np.ndarray]) -> np.ndarray:
    """Least-squares world point from bearing rays (positions, world-to-cam rotations)."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for (p, C), uv in zip(poses, uvs):
        ray = C.T @ np.array([uv[0], uv[1], 1.0])
        ray = ray / np.linalg.norm(ray)
        M = np.eye(3) - np.outer(ray, ray)
        A += M
        b += M @ p
    return np.linalg.solve(A, b)


def triangulate_inverse_depth(
    clones: list[CameraPoseClone],
    uvs: list[np.ndarray],
    anchor_idx: int,
    max_iters: int = 15,
    tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Gauss-Newton inverse-depth triangulation anchored at ``clones[anchor_idx]``.

    Returns (triplet, stacked residual, per-observation Jacobian blocks as
    (d_res/d_triplet, list of clone blocks)). Raises DegenerateGeometryError
    when the linear initialization or the iteration fails.
    """
    poses = [(c.p_w_c, quat_to_rotation(c.q_w_c)) for c in clones]
    try:
        p_w = triangulate_linear(poses, uvs)
    except np.linalg.LinAlgError as e:
        raise DegenerateGeometryError("linear triangulation singular") from e
    p_a, C_a = poses[anchor_idx]
    q = C_a @ (p_w - p_a)
    if q[2] <= Z_EPS:
        raise DegenerateGeometryError("triangulated point behind anchor")
    f = np.array([q[0] / q[2], q[1] / q[2], 1.0 / q[2]])

    feat = InverseDepthFeature(f[0], f[1], f[2], anchor_idx)
    for _ in range(max_iters):
        res = []
        J = []
        for i, (c, uv) in enumerate(zip(clones, uvs)):
            p_cam = inverse_depth_to_cartesian(feat, clones[anchor_idx], c)
            if p_cam[2] <= Z_EPS:
                raise DegenerateGeometryError("iterate moved behind a camera")
            Jp = projection_jacobian(p_cam)
            C_c = poses[i][1]
            m = np.array([feat.alpha, feat.beta, 1.0])
            d_df = np.column_stack(
                [
                    (1.0 / feat.rho) * (C_c @ C_a.T[:, 0]),
                    (1.0 / feat.rho) * (C_c @ C_a.T[:, 1]),
                    -(1.0 / feat.rho**2) * (C_c @ C_a.T @ m),
                ]
            )
            res.append(np.asarray(uv) - project(p_cam))
            J.append(Jp @ d_df)
        r = np.concatenate(res)
        A = np.vstack(J)
        try:
            delta = np.linalg.solve(A.T @ A, A.T @ r)
        except np.linalg.LinAlgError as e:
            raise DegenerateGeometryError("normal equations singular") from e
        feat.alpha += delta[0]
        feat.beta += delta[1]
        feat.rho += delta[2]
        if feat.rho <= 0:
            raise DegenerateGeometryError("triangulation diverged to non-positive depth")
        if float(delta @ delta) < tol**2:
            break
    if not np.all(np.isfinite([feat.alpha, feat.beta, feat.rho])):
        raise DegenerateGeometryError("triangulation produced non-finite triplet")
    return np.array([feat.alpha, feat.beta, feat.rho]), r, J


def baseline_of(clones: list[CameraPoseClone]) -> float:
    ps = np.array([c.p_w_c for c in clones])
    if len(ps) < 2:
        return 0.0
    d = ps[None, :, :] - ps[:, None, :]
    return float(np.sqrt((d**2).sum(axis=2)).max())


# ---------------------------------------------------------------------------
# MSCKF
# ---------------------------------------------------------------------------


@dataclass
class MsckfStats:
    processed: int = 0
    skipped_baseline: int = 0
    discarded_triangulation: int = 0
    gated: int = 0


def msckf_residual_blocks(
    state: FilterState, clone_indices: list[int], uvs: list[np.ndarray], p_w: np.ndarray
):
    """Stacked residual, state Jacobian, and feature Jacobian for one track."""
    rows = 2 * len(clone_indices)
    H_x = np.zeros((rows, state.error_dim()))
    H_f = np.zeros((rows, 3))
    res = np.zeros(rows)
    for k, (ci, uv) in enumerate(zip(clone_indices, uvs)):
        c = state.clones[ci]
        C = quat_to_rotation(c.q_w_c)
        p_cam = C @ (p_w - c.p_w_c)
        if p_cam[2] <= Z_EPS:
            raise BehindCameraError("msckf point behind camera")
        Jp = projection_jacobian(p_cam)
        sl = slice(2 * k, 2 * k + 2)
        H_x[sl, state.clone_pos_slice(ci)] = Jp @ (-C)
        H_x[sl, state.clone_att_slice(ci)] = Jp @ skew(p_cam)
        H_f[sl] = Jp @ C
        res[sl] = np.asarray(uv) - project(p_cam)
    return res, H_x, H_f


def msckf_update(
    state: FilterState,
    tracks: list[tuple[list[int], list[np.ndarray]]],
    noise: MeasurementNoise,
    min_baseline: float = 0.05,
    confidence: float = 0.95,
) -> MsckfStats:
    """Process dead or window-spanning tracks with the nullspace-projected update.

    Each entry pairs clone indices with measured uvs. Features are
    triangulated from the current clone estimates; the stacked residual is
    projected onto the left nullspace of the feature Jacobian so the update
    carries no feature dependence.
    """
    stats = MsckfStats()
    rows_H = []
    rows_r = []
    for clone_indices, uvs in tracks:
        if len(clone_indices) < 2:
            continue
        clones = [state.clones[i] for i in clone_indices]
        if baseline_of(clones) < min_baseline:
            stats.skipped_baseline += 1
            continue
        local_anchor = 0
        try:
            triplet, _, _ = triangulate_inverse_depth(clones, uvs, local_anchor)
            feat = InverseDepthFeature(triplet[0], triplet[1], triplet[2], 0)
            from .state import feature_world_point

            p_w = feature_world_point(feat, clones[local_anchor])
            res, H_x, H_f = msckf_residual_blocks(state, clone_indices, uvs, p_w)
        except (DegenerateGeometryError, BehindCameraError):
            stats.discarded_triangulation += 1
            continue
        # left nullspace of H_f removes the feature dependence
        U, s, _ = np.linalg.svd(H_f, full_matrices=True)
        rank = int(np.sum(s > 1e-10))
        N = U[:, rank:]
        if N.shape[1] == 0:
            stats.discarded_triangulation += 1
            continue
        r0 = N.T @ res
        H0 = N.T @ H_x
        S = H0 @ state.cov @ H0.T + noise.sigma_v**2 * np.eye(len(r0))
        try:
            m2 = float(r0 @ np.linalg.solve(S, r0))
        except np.linalg.LinAlgError:
            stats.discarded_triangulation += 1
            continue
        if m2 > chi2_gate(confidence, len(r0)):
            stats.gated += 1
            continue
        rows_H.append(H0)
        rows_r.append(r0)
        stats.processed += 1
    if rows_H:
        H = np.vstack(rows_H)
        r = np.concatenate(rows_r)
        R = noise.sigma_v**2 * np.eye(len(r))
        if not ekf_update(state, H, r, R):
            logger.warning("msckf update skipped: singular innovation covariance")
    return stats


# ---------------------------------------------------------------------------
# Track management
# ---------------------------------------------------------------------------


@dataclass
class TrackPolicy:
    max_slam_features: int = 27
    tiles_u: int = 4
    tiles_v: int = 3
    fov_u: float = 1.0
    fov_v: float = 0.75
    min_track_len_slam: int = 3
    min_track_len_msckf_dead: int = 2
    min_baseline: float = 0.05
    rho_prior: float = 0.1
    sigma_rho_prior: float = 0.5


def tile_of(uv, policy: TrackPolicy) -> tuple[int, int]:
    u = min(max((uv[0] + policy.fov_u) / (2 * policy.fov_u), 0.0), 1.0 - 1e-9)
    v = min(max((uv[1] + policy.fov_v) / (2 * policy.fov_v), 0.0), 1.0 - 1e-9)
    return int(u * policy.tiles_u), int(v * policy.tiles_v)


@dataclass
class TrackDecisions:
    slam: list[int] = field(default_factory=list)
    msckf: list[int] = field(default_factory=list)
    discard: list[int] = field(default_factory=list)


def manage_tracks(
    candidates: list[Track],
    current_slam_uvs: list[np.ndarray],
    free_slots: int,
    policy: TrackPolicy,
) -> TrackDecisions:
    """Assign candidate tracks to SLAM slots with tile-based spatial spread.

    ``current_slam_uvs`` are the image positions of features already in the
    state; candidates overflowing the slot budget stay with MSCKF. Tiles are
    filled emptiest-first so features spread across the field of view; within
    a tile the best detection score wins.
    """
    decisions = TrackDecisions()
    counts: dict[tuple[int, int], int] = {}
    for uv in current_slam_uvs:
        t = tile_of(uv, policy)
        counts[t] = counts.get(t, 0) + 1

    eligible = [
        tr for tr in candidates if len(tr.observations) >= policy.min_track_len_slam
    ]
    # best score first so ties inside a tile are deterministic
    eligible.sort(key=lambda tr: (-tr.score, tr.track_id))
    remaining = list(eligible)
    slots = free_slots
    while slots > 0 and remaining:
        # pick, among remaining candidates, the one whose tile is emptiest
        best = None
        best_key = None
        for tr in remaining:
            uv = tr.observations[-1].uv
            t = tile_of(uv, policy)
            key = (counts.get(t, 0), -tr.score, tr.track_id)
            if best_key is None or key < best_key:
                best_key = key
                best = tr
        remaining.remove(best)
        t = tile_of(best.observations[-1].uv, policy)
        counts[t] = counts.get(t, 0) + 1
        decisions.slam.append(best.track_id)
        slots -= 1
    for tr in remaining:
        decisions.msckf.append(tr.track_id)
    return decisions
