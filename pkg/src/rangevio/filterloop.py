"""Filter orchestration: IMU propagation, camera frames, laser range samples.

The frame pipeline (per image):
  1. clone the current camera pose into the sliding window,
  2. ingest tracker output and update track lifecycles,
  3. SLAM updates for in-state features observed this frame,
  4. MSCKF updates for dead or window-spanning candidate tracks,
  5. promote candidates into free SLAM slots (triangulated prior when the
     window baseline allows, semi-infinite depth prior otherwise).

Laser samples are processed at their own stamps against the IMU-propagated
pose, so a range update never waits for the next image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, DivergenceError
from .facet import GateRecord, LrfExtrinsics, RangeSample, range_update
from .propagation import ImuSample, NoiseModel, apply_transition_to_cov, propagate_nominal
from .rotations import quat_to_rotation
from .state import CameraMount, FilterState, InverseDepthFeature, WorldConstants
from .state import inverse_depth_to_cartesian
from .vision import (
    FeatureObservation,
    MeasurementNoise,
    Track,
    TrackPolicy,
    TrackStatus,
    baseline_of,
    manage_tracks,
    msckf_update,
    projection_jacobian,
    slam_update,
    triangulate_inverse_depth,
)

logger = logging.getLogger(__name__)

STAMP_TOL = 1e-9


@dataclass
class FilterSettings:
    max_clones: int = 4
    max_slam_features: int = 27
    range_gate_gamma: float = 2.0
    chi2_confidence: float = 0.95
    rho_prior: float = 0.1
    sigma_rho_prior: float = 0.5
    min_baseline: float = 0.05
    min_track_len_slam: int = 3
    min_track_len_msckf_dead: int = 2
    max_msckf_per_frame: int = 10
    max_range: float = 40.0
    fov_u: float = 1.0
    fov_v: float = 0.75

    def track_policy(self) -> TrackPolicy:
        return TrackPolicy(
            max_slam_features=self.max_slam_features,
            fov_u=self.fov_u,
            fov_v=self.fov_v,
            min_track_len_slam=self.min_track_len_slam,
            min_track_len_msckf_dead=self.min_track_len_msckf_dead,
            min_baseline=self.min_baseline,
            rho_prior=self.rho_prior,
            sigma_rho_prior=self.sigma_rho_prior,
        )


@dataclass
class FrameReport:
    stamp: float
    n_slam_updates: int = 0
    n_msckf_tracks: int = 0
    n_promoted: int = 0
    max_innovation: float = 0.0
    dropped_features: int = 0


class RangeVioFilter:
    """Hybrid SLAM/MSCKF visual-inertial filter with the ranged-facet update."""

    def __init__(
        self,
        state: FilterState,
        settings: FilterSettings,
        mount: CameraMount,
        lrf: LrfExtrinsics,
        imu_noise: NoiseModel,
        meas_noise: MeasurementNoise,
        world: WorldConstants | None = None,
        use_range: bool = True,
    ):
        self.state = state
        self.settings = settings
        self.mount = mount
        self.lrf = lrf
        self.imu_noise = imu_noise
        self.meas_noise = meas_noise
        self.world = world if world is not None else WorldConstants()
        self.use_range = use_range
        self.tracks: dict[int, Track] = {}
        self.gate_records: list[GateRecord] = []
        self._pending_phi: np.ndarray | None = None
        self._pending_q: np.ndarray | None = None
        self.counters = {
            "msckf_processed": 0,
            "msckf_skipped_baseline": 0,
            "msckf_discarded": 0,
            "msckf_gated": 0,
            "features_dropped": 0,
            "visual_gated": 0,
        }

    # ---- IMU ---------------------------------------------------------------
    def process_imu(self, sample: ImuSample, dt: float):
        """Integrate the nominal state; covariance work is composed and deferred
        until the next measurement (exact, the transitions commute that way)."""
        phi, Qd = propagate_nominal(self.state, sample, dt, self.imu_noise, self.world)
        if self._pending_phi is None:
            self._pending_phi = phi
            self._pending_q = Qd
        else:
            if self._pending_q is not None:
                self._pending_q = phi @ self._pending_q @ phi.T
                if Qd is not None:
                    self._pending_q += Qd
            else:
                self._pending_q = Qd
            self._pending_phi = phi @ self._pending_phi

    def _flush_covariance(self):
        if self._pending_phi is None:
            return
        apply_transition_to_cov(self.state, self._pending_phi, self._pending_q)
        self._pending_phi = None
        self._pending_q = None

    # ---- camera frame --------------------------------------------------------
    def process_frame(self, stamp: float, observations: list[FeatureObservation]) -> FrameReport:
        report = FrameReport(stamp)
        st = self.state
        self._flush_covariance()
        st.clone_pose(stamp, self.mount, self.settings.max_clones)
        self._prune_stale_observations()

        present: set[int] = set()
        for obs in sorted(observations, key=lambda o: o.track_id):
            present.add(obs.track_id)
            tr = self.tracks.get(obs.track_id)
            if tr is None:
                tr = Track(obs.track_id)
                self.tracks[obs.track_id] = tr
            elif tr.status == TrackStatus.DEAD:
                # re-detected landmark under a recycled id starts fresh
                tr.status = TrackStatus.CANDIDATE
                tr.observations.clear()
            tr.add(obs)

        # SLAM updates for in-state features observed now
        slam_obs = []
        for j in sorted(range(len(st.features)), key=lambda j: st.features[j].track_id):
            tid = st.features[j].track_id
            if tid in present:
                uv = next(o.uv for o in reversed(self.tracks[tid].observations) if abs(o.stamp - stamp) < STAMP_TOL)
                slam_obs.append((j, uv))
        records = slam_update(st, slam_obs, self.meas_noise, self.settings.chi2_confidence)
        report.n_slam_updates = sum(1 for r in records if r.accepted)
        self.counters["visual_gated"] += sum(1 for r in records if not r.accepted)
        if records:
            report.max_innovation = max(float(np.max(np.abs(r.innovation))) for r in records)

        # lifecycle: deaths and window-spanning candidates. Dead tracks always
        # enter the MSCKF batch (their information is about to be lost);
        # window-spanning live candidates fill the remaining per-frame budget.
        msckf_batch: list[tuple[list[int], list[np.ndarray]]] = []
        spanning: list[tuple[float, tuple[list[int], list[np.ndarray]], Track]] = []
        for tid in sorted(self.tracks.keys()):
            tr = self.tracks[tid]
            if tr.status == TrackStatus.DEAD:
                continue
            died = tid not in present
            if died and tr.status == TrackStatus.SLAM:
                j = st.feature_index(tid)
                if j is not None:
                    st.remove_feature(j)
                    report.dropped_features += 1
                tr.status = TrackStatus.DEAD
                tr.observations.clear()
                continue
            if tr.status != TrackStatus.CANDIDATE:
                continue
            resolved = self._resolve_clone_obs(tr)
            if died:
                if len(resolved) >= self.settings.min_track_len_msckf_dead:
                    msckf_batch.append(resolved_pair(resolved))
                tr.status = TrackStatus.DEAD
                tr.observations.clear()
            elif len(resolved) >= self.settings.max_clones:
                if len(resolved) >= self.settings.min_track_len_slam:
                    spanning.append((tr.score, resolved_pair(resolved), tr))
        budget = max(0, self.settings.max_msckf_per_frame - len(msckf_batch))
        spanning.sort(key=lambda s: -s[0])
        for _, pair, tr in spanning[:budget]:
            msckf_batch.append(pair)
            tr.observations.clear()
        if msckf_batch:
            stats = msckf_update(
                st,
                msckf_batch,
                self.meas_noise,
                self.settings.min_baseline,
                self.settings.chi2_confidence,
            )
            report.n_msckf_tracks = stats.processed
            self.counters["msckf_processed"] += stats.processed
            self.counters["msckf_skipped_baseline"] += stats.skipped_baseline
            self.counters["msckf_discarded"] += stats.discarded_triangulation
            self.counters["msckf_gated"] += stats.gated

        report.dropped_features += self._drop_unhealthy_features()
        report.n_promoted = self._promote_candidates(present)

        if not st.is_finite():
            raise DivergenceError(f"non-finite state at t={stamp}")
        st.stamp = max(st.stamp, stamp)
        return report

    # ---- laser -----------------------------------------------------------------
    def process_range(self, sample: RangeSample) -> GateRecord | None:
        if not self.use_range:
            return None
        self._flush_covariance()
        rec = range_update(
            self.state,
            sample,
            self.mount,
            self.lrf,
            self.meas_noise,
            self.settings.range_gate_gamma,
            self.settings.max_range,
        )
        self.gate_records.append(rec)
        if not self.state.is_finite():
            raise DivergenceError(f"non-finite state after range update at t={sample.stamp}")
        return rec

    # ---- internals ----------------------------------------------------------
    def _resolve_clone_obs(self, tr: Track) -> list[tuple[int, np.ndarray]]:
        stamps = {round(c.stamp, 9): i for i, c in enumerate(self.state.clones)}
        out = []
        for o in tr.observations:
            ci = stamps.get(round(o.stamp, 9))
            if ci is not None:
                out.append((ci, o.uv))
        return out

    def _prune_stale_observations(self):
        if not self.state.clones:
            return
        oldest = self.state.clones[0].stamp - STAMP_TOL
        for tr in self.tracks.values():
            if tr.observations and tr.observations[0].stamp < oldest:
                tr.observations = [o for o in tr.observations if o.stamp >= oldest]

    def _drop_unhealthy_features(self) -> int:
        dropped = 0
        for j in reversed(range(len(self.state.features))):
            f = self.state.features[j]
            if not (1e-6 < f.rho < 1e3) or not np.isfinite(f.rho):
                tid = f.track_id
                self.state.remove_feature(j)
                if tid in self.tracks:
                    self.tracks[tid].status = TrackStatus.DEAD
                    self.tracks[tid].observations.clear()
                dropped += 1
                self.counters["features_dropped"] += 1
        return dropped

    def _promote_candidates(self, present: set[int]) -> int:
        st = self.state
        free = self.settings.max_slam_features - len(st.features)
        if free <= 0:
            return 0
        candidates = [
            self.tracks[tid]
            for tid in sorted(present)
            if self.tracks[tid].status == TrackStatus.CANDIDATE
            and len(self._resolve_clone_obs(self.tracks[tid])) >= self.settings.min_track_len_slam
        ]
        if not candidates:
            return 0
        slam_uvs = []
        newest = len(st.clones) - 1
        for j, f in enumerate(st.features):
            try:
                p_cam = inverse_depth_to_cartesian(f, st.clones[f.anchor_index], st.clones[newest])
                if p_cam[2] > 1e-6:
                    slam_uvs.append(np.array([p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]]))
            except Exception:
                continue
        decisions = manage_tracks(candidates, slam_uvs, free, self.settings.track_policy())
        promoted = 0
        for tid in decisions.slam:
            if self._init_slam_feature(self.tracks[tid]):
                promoted += 1
        return promoted

    def _init_slam_feature(self, tr: Track) -> bool:
        st = self.state
        resolved = self._resolve_clone_obs(tr)
        if not resolved:
            return False
        anchor_idx = len(st.clones) - 1
        clone_indices = [ci for ci, _ in resolved]
        uvs = [uv for _, uv in resolved]
        clones = [st.clones[ci] for ci in clone_indices]
        sigma_v = self.meas_noise.sigma_v

        if baseline_of(clones) >= self.settings.min_baseline and anchor_idx in clone_indices:
            try:
                triplet, _, _ = triangulate_inverse_depth(clones, uvs, clone_indices.index(anchor_idx))
            except DegenerateGeometryError:
                triplet = None
            if triplet is not None and triplet[2] > 1e-6:
                feat = InverseDepthFeature(triplet[0], triplet[1], triplet[2], anchor_idx, tr.track_id)
                ok = self._add_feature_delayed(feat, clone_indices, uvs)
                if ok:
                    tr.status = TrackStatus.SLAM
                    return True
        # semi-infinite depth prior anchored at the newest clone
        last = next((o for o in reversed(tr.observations) if abs(o.stamp - st.clones[anchor_idx].stamp) < STAMP_TOL), None)
        if last is None:
            return False
        feat = InverseDepthFeature(last.uv[0], last.uv[1], self.settings.rho_prior, anchor_idx, tr.track_id)
        cov_ff = np.diag([sigma_v**2, sigma_v**2, self.settings.sigma_rho_prior**2])
        st.add_feature(feat, cov_ff)
        tr.status = TrackStatus.SLAM
        return True

    def _add_feature_delayed(self, feat: InverseDepthFeature, clone_indices, uvs) -> bool:
        """Triangulated initialization with covariance consistent to first order.

        At the Gauss-Newton optimum the triplet responds to pixel noise and to
        clone-state errors as df = G dz - G B dc, which yields both the new
        3x3 block and its cross-covariance with the whole existing state.
        """
        st = self.state
        anchor = st.clones[feat.anchor_index]
        C_a = quat_to_rotation(anchor.q_w_c)
        m = np.array([feat.alpha, feat.beta, 1.0])
        rows = 2 * len(clone_indices)
        A = np.zeros((rows, 3))
        B = np.zeros((rows, st.error_dim()))
        from .rotations import skew

        for k, (ci, uv) in enumerate(zip(clone_indices, uvs)):
            cam = st.clones[ci]
            try:
                p_cam = inverse_depth_to_cartesian(feat, anchor, cam)
                if p_cam[2] <= 1e-6:
                    return False
            except Exception:
                return False
            Jp = projection_jacobian(p_cam)
            C_c = quat_to_rotation(cam.q_w_c)
            sl = slice(2 * k, 2 * k + 2)
            d_df = np.column_stack(
                [
                    (1.0 / feat.rho) * (C_c @ C_a.T[:, 0]),
                    (1.0 / feat.rho) * (C_c @ C_a.T[:, 1]),
                    -(1.0 / feat.rho**2) * (C_c @ C_a.T @ m),
                ]
            )
            A[sl] = Jp @ d_df
            B[sl, st.clone_pos_slice(ci)] += Jp @ (-C_c)
            B[sl, st.clone_att_slice(ci)] += Jp @ skew(p_cam)
            B[sl, st.clone_pos_slice(feat.anchor_index)] += Jp @ C_c
            B[sl, st.clone_att_slice(feat.anchor_index)] += Jp @ (
                -(1.0 / feat.rho) * C_c @ C_a.T @ skew(m)
            )
        AtA = A.T @ A
        try:
            G = np.linalg.solve(AtA, A.T)
        except np.linalg.LinAlgError:
            return False
        J = -G @ B
        P_fx = J @ st.cov
        P_ff = P_fx @ J.T + self.meas_noise.sigma_v**2 * (G @ G.T)
        st.add_feature(feat, P_ff, P_fx)
        return True


def resolved_pair(resolved: list[tuple[int, np.ndarray]]) -> tuple[list[int], list[np.ndarray]]:
    return [ci for ci, _ in resolved], [uv for _, uv in resolved]
