"""Observability laboratory.

Builds block rows M_k = H_k * Phi(k,1) of the observability matrix for the
range and vision measurements along simulated trajectories, over the analysis
state

    x = [ p v theta b_g b_a | p_F1 ... p_FN ]        (dim 15 + 3N)

with Cartesian world features and the camera coincident with the IMU. The
facet is always built from the first three features; any other ordering is a
permutation and does not change ranks.

Key structural facts this module exposes as tests/reports:
  * the scale direction N_s = [p1, v1, 0_6, -a_body, p_F1..p_FN] satisfies
    M_k N_s = (1/b) n . (p_F2 - p_ik) for range rows on constant-acceleration
    trajectories, so scale leaves the nullspace once a ranged facet exists;
  * under hover the direction carried by the out-of-facet feature positions
    stays in the range rows' nullspace (their columns are structurally zero)
    and leaves the combined vision+range nullspace once translation starts;
  * global translation and rotation about gravity stay unobservable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .propagation import ImuSample, TransitionBlocks, propagate, step_transition
from .rotations import Quaternion, apply_attitude_error, quat_to_rotation, skew
from .state import ATT, BA, BG, IMU_DIM, POS, VEL, FilterState, InertialState, WorldConstants
from .vision import projection_jacobian

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class AnalysisState:
    inertial: InertialState
    features_w: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.features_w = np.atleast_2d(np.asarray(self.features_w, dtype=float))
        if self.features_w.shape[0] < 3:
            raise ValueError("analysis needs at least 3 features")

    @property
    def n_features(self) -> int:
        return self.features_w.shape[0]

    def dim(self) -> int:
        return IMU_DIM + 3 * self.n_features


class LabTrajectory:
    """Discretely integrated trajectory with per-step error transitions.

    ``states[k-1]`` is the state at (1-based) time index k; ``phi(k)`` is the
    accumulated transition from time 1 to time k.
    """

    def __init__(self, states: list[InertialState], steps: list[TransitionBlocks], dt: float):
        self.states = states
        self.step_blocks = steps
        self.dt = dt
        self._phi_cache: dict[int, np.ndarray] = {1: np.eye(IMU_DIM)}

    def __len__(self) -> int:
        return len(self.states)

    def state(self, k: int) -> InertialState:
        return self.states[k - 1]

    def phi(self, k: int) -> np.ndarray:
        if k < 1 or k > len(self.states):
            raise ValueError(f"k={k} outside 1..{len(self.states)}")
        best = max(i for i in self._phi_cache if i <= k)
        acc = self._phi_cache[best]
        for i in range(best, k):
            acc = self.step_blocks[i - 1].phi @ acc
            self._phi_cache[i + 1] = acc
        return self._phi_cache[k]

    def blocks(self, k: int) -> TransitionBlocks:
        return TransitionBlocks(self.phi(k))

    @staticmethod
    def from_samples(
        initial: InertialState, samples: list[ImuSample], dt: float, world: WorldConstants | None = None
    ) -> "LabTrajectory":
        world = world if world is not None else WorldConstants()
        fs = FilterState(initial.copy(), np.eye(IMU_DIM) * 0.0, 0.0)
        states = [fs.inertial.copy()]
        blocks = []
        for s in samples:
            blocks.append(step_transition(fs, s, dt))
            propagate(fs, s, dt, None, world)
            states.append(fs.inertial.copy())
        return LabTrajectory(states, blocks, dt)

    @staticmethod
    def constant_acceleration(
        initial: InertialState,
        accel_body: np.ndarray,
        dt: float,
        steps: int,
        world: WorldConstants | None = None,
    ) -> "LabTrajectory":
        """Constant attitude, constant body-frame acceleration (zero = cruise/hover)."""
        world = world if world is not None else WorldConstants()
        accel_body = np.asarray(accel_body, dtype=float)
        C = quat_to_rotation(initial.q_w_i)
        f_body = accel_body - C @ world.gravity_w
        samples = [ImuSample(np.zeros(3), f_body, (k + 1) * dt) for k in range(steps)]
        traj = LabTrajectory.from_samples(initial, samples, dt, world)
        traj.accel_body = accel_body
        return traj

    @staticmethod
    def rotating(
        initial: InertialState,
        omega_body,
        accel_body_fn,
        dt: float,
        steps: int,
        world: WorldConstants | None = None,
    ) -> "LabTrajectory":
        """Generic-motion trajectory driven by body rate and specific-force signals."""
        world = world if world is not None else WorldConstants()
        fs = FilterState(initial.copy(), np.eye(IMU_DIM) * 0.0, 0.0)
        states = [fs.inertial.copy()]
        blocks = []
        for k in range(steps):
            t_mid = (k + 0.5) * dt
            C = quat_to_rotation(fs.inertial.q_w_i)
            f_body = np.asarray(accel_body_fn(t_mid)) - C @ world.gravity_w
            s = ImuSample(np.asarray(omega_body(t_mid)), f_body, (k + 1) * dt)
            blocks.append(step_transition(fs, s, dt))
            propagate(fs, s, dt, None, world)
            states.append(fs.inertial.copy())
        return LabTrajectory(states, blocks, dt)


# ---------------------------------------------------------------------------
# Rows
# ---------------------------------------------------------------------------


@dataclass
class ObservabilityRow:
    """One range block row with named sub-blocks; full row = (1/b) * [blocks]."""

    m_p: np.ndarray
    m_v: np.ndarray
    m_theta: np.ndarray
    m_bg: np.ndarray
    m_ba: np.ndarray
    m_f1: np.ndarray
    m_f2: np.ndarray
    m_f3: np.ndarray
    b: float
    n_features: int
    k: int

    def full(self) -> np.ndarray:
        out = np.zeros(IMU_DIM + 3 * self.n_features)
        out[POS] = self.m_p
        out[VEL] = self.m_v
        out[ATT] = self.m_theta
        out[BG] = self.m_bg
        out[BA] = self.m_ba
        out[IMU_DIM : IMU_DIM + 3] = self.m_f1
        out[IMU_DIM + 3 : IMU_DIM + 6] = self.m_f2
        out[IMU_DIM + 6 : IMU_DIM + 9] = self.m_f3
        return out / self.b


def range_geometry(state: InertialState, features_w: np.ndarray, u_r_body: np.ndarray):
    """(n, a, b, p_I, C, u_w) of the facet formed by the first three features."""
    C = quat_to_rotation(state.q_w_i)
    u_w = C.T @ u_r_body
    p1, p2, p3 = features_w[0], features_w[1], features_w[2]
    n = np.cross(p1 - p2, p3 - p2)
    a = float((p2 - state.p_w_i) @ n)
    b = float(u_w @ n)
    if abs(b) < 1e-12:
        raise ValueError("degenerate facet: ray parallel to plane")
    p_i = state.p_w_i + (a / b) * u_w
    return n, a, b, p_i, C, u_w


def range_measurement(state: InertialState, features_w: np.ndarray, u_r_body: np.ndarray) -> float:
    _, a, b, _, _, _ = range_geometry(state, features_w, u_r_body)
    return a / b


def range_jacobian_analysis(
    state: InertialState, features_w: np.ndarray, u_r_body: np.ndarray
) -> np.ndarray:
    """H_k over the analysis state (camera = IMU, zero lever arm)."""
    n_feat = features_w.shape[0]
    n, a, b, p_i, C, _ = range_geometry(state, features_w, u_r_body)
    p1, p2, p3 = features_w[0], features_w[1], features_w[2]
    H = np.zeros(IMU_DIM + 3 * n_feat)
    H[POS] = -n / b
    H[ATT] = (a / b**2) * (n @ (C.T @ skew(u_r_body)))
    H[IMU_DIM : IMU_DIM + 3] = skew(p3 - p2) @ (p2 - p_i) / b
    H[IMU_DIM + 3 : IMU_DIM + 6] = (n + skew(p1 - p3) @ (p2 - p_i)) / b
    H[IMU_DIM + 6 : IMU_DIM + 9] = skew(p2 - p1) @ (p2 - p_i) / b
    return H


def build_row_analytic(
    traj: LabTrajectory,
    k: int,
    analysis: AnalysisState,
    u_r_body: np.ndarray,
    blocks: TransitionBlocks | None = None,
) -> ObservabilityRow:
    """Range block row from the closed-form sub-blocks and accumulated transitions.

    Signs on the attitude/gyro-bias columns follow this package's error
    conventions; they are cross-checked against the numeric oracle rather
    than any printed typography.
    """
    state_k = traj.state(k)
    n, a, b, p_i, C_k, _ = range_geometry(state_k, analysis.features_w, u_r_body)
    if blocks is None:
        blocks = traj.blocks(k)
    phi = blocks.phi
    p1, p2, p3 = analysis.features_w[0], analysis.features_w[1], analysis.features_w[2]

    h_theta = (a / b) * (n @ (C_k.T @ skew(u_r_body)))  # (1/b factored out)
    m_p = -n
    m_v = -(k - 1) * traj.dt * n
    m_theta = -n @ phi[POS, ATT] + h_theta @ phi[ATT, ATT]
    m_bg = -n @ blocks.phi_52 + h_theta @ blocks.phi_12
    m_ba = -n @ blocks.phi_54
    m_f1 = skew(p3 - p2) @ (p2 - p_i)
    m_f2 = n + skew(p1 - p3) @ (p2 - p_i)
    m_f3 = skew(p2 - p1) @ (p2 - p_i)
    return ObservabilityRow(
        m_p, m_v, m_theta, m_bg, m_ba, m_f1, m_f2, m_f3, b, analysis.n_features, k
    )


def build_row_numeric(
    traj: LabTrajectory,
    k: int,
    analysis: AnalysisState,
    u_r_body: np.ndarray,
    eps: float = 1e-6,
) -> np.ndarray:
    """Central-difference H_k times the numerically accumulated Phi(k,1)."""
    state_k = traj.state(k)
    dim = analysis.dim()
    H = np.zeros(dim)

    def measure(st: InertialState, feats: np.ndarray) -> float:
        return range_measurement(st, feats, u_r_body)

    feats = analysis.features_w
    for i in range(3):
        sp = state_k.copy()
        sm = state_k.copy()
        sp.p_w_i = sp.p_w_i + eps * np.eye(3)[i]
        sm.p_w_i = sm.p_w_i - eps * np.eye(3)[i]
        H[i] = (measure(sp, feats) - measure(sm, feats)) / (2 * eps)
    for i in range(3):
        sp = state_k.copy()
        sm = state_k.copy()
        sp.q_w_i = apply_attitude_error(state_k.q_w_i, eps * np.eye(3)[i])
        sm.q_w_i = apply_attitude_error(state_k.q_w_i, -eps * np.eye(3)[i])
        H[6 + i] = (measure(sp, feats) - measure(sm, feats)) / (2 * eps)
    for j in range(analysis.n_features):
        for i in range(3):
            fp = feats.copy()
            fm = feats.copy()
            fp[j, i] += eps
            fm[j, i] -= eps
            H[IMU_DIM + 3 * j + i] = (measure(state_k, fp) - measure(state_k, fm)) / (2 * eps)

    phi_full = np.eye(dim)
    phi_full[:IMU_DIM, :IMU_DIM] = traj.phi(k)
    return H @ phi_full


def vision_rows(
    traj: LabTrajectory, k: int, analysis: AnalysisState, feature_idx: int
) -> np.ndarray:
    """Two projection block rows for one feature at time k (camera = IMU)."""
    state_k = traj.state(k)
    C = quat_to_rotation(state_k.q_w_i)
    p_cam = C @ (analysis.features_w[feature_idx] - state_k.p_w_i)
    if p_cam[2] <= 1e-9:
        raise ValueError("feature behind the analysis camera")
    Jp = projection_jacobian(p_cam)
    dim = analysis.dim()
    H = np.zeros((2, dim))
    H[:, POS] = Jp @ (-C)
    H[:, ATT] = Jp @ skew(p_cam)
    H[:, IMU_DIM + 3 * feature_idx : IMU_DIM + 3 * feature_idx + 3] = Jp @ C
    phi_full = np.eye(dim)
    phi_full[:IMU_DIM, :IMU_DIM] = traj.phi(k)
    return H @ phi_full


# ---------------------------------------------------------------------------
# Direction vectors
# ---------------------------------------------------------------------------


def scale_direction(initial: InertialState, accel_body, analysis: AnalysisState) -> np.ndarray:
    """Scale error direction for zero or constant body-frame acceleration."""
    accel_body = np.asarray(accel_body, dtype=float)
    if accel_body.shape != (3,):
        raise ValueError("constant body acceleration must be a 3-vector")
    out = np.zeros(analysis.dim())
    out[POS] = initial.p_w_i
    out[VEL] = initial.v_w_i
    out[BA] = -accel_body
    out[IMU_DIM:] = analysis.features_w.reshape(-1)
    return out


def hover_direction(analysis: AnalysisState) -> np.ndarray:
    """Out-of-facet feature-position direction (zero tail when N = 3)."""
    out = np.zeros(analysis.dim())
    if analysis.n_features > 3:
        out[IMU_DIM + 9 :] = analysis.features_w[3:].reshape(-1)
    return out


def translation_directions(analysis: AnalysisState) -> np.ndarray:
    """Three columns spanning global translation of camera and features."""
    dim = analysis.dim()
    out = np.zeros((dim, 3))
    for i in range(3):
        out[POS, i] = np.eye(3)[i]
        for j in range(analysis.n_features):
            out[IMU_DIM + 3 * j : IMU_DIM + 3 * j + 3, i] = np.eye(3)[i]
    return out


def yaw_direction(
    initial: InertialState, analysis: AnalysisState, gravity: np.ndarray = GRAVITY
) -> np.ndarray:
    """Rotation of the whole world about the gravity axis (with attitude shift)."""
    u = np.asarray(gravity, dtype=float)
    u = u / np.linalg.norm(u)
    out = np.zeros(analysis.dim())
    out[POS] = skew(u) @ initial.p_w_i
    out[VEL] = skew(u) @ initial.v_w_i
    out[ATT] = quat_to_rotation(initial.q_w_i) @ u
    for j in range(analysis.n_features):
        out[IMU_DIM + 3 * j : IMU_DIM + 3 * j + 3] = skew(u) @ analysis.features_w[j]
    return out


# ---------------------------------------------------------------------------
# Stacks, identities, reports
# ---------------------------------------------------------------------------


def stack_rows(
    traj: LabTrajectory,
    analysis: AnalysisState,
    ks: list[int],
    u_r_body: np.ndarray | None = None,
    include_vision: bool = True,
    include_range: bool = True,
    normalize: bool = True,
) -> np.ndarray:
    rows = []
    for k in ks:
        if include_vision:
            for j in range(analysis.n_features):
                rows.append(vision_rows(traj, k, analysis, j))
        if include_range:
            if u_r_body is None:
                raise ValueError("range rows need the laser axis")
            rows.append(build_row_analytic(traj, k, analysis, u_r_body).full()[None, :])
    M = np.vstack(rows)
    if normalize:
        norms = np.linalg.norm(M, axis=1, keepdims=True)
        M = M / np.maximum(norms, 1e-300)
    return M


def scale_identity_residuals(
    traj: LabTrajectory,
    analysis: AnalysisState,
    u_r_body: np.ndarray,
    ks: list[int],
    accel_body=None,
) -> list[tuple[float, float]]:
    """Pairs (M_k N_s, closed form (1/b) n.(p_F2 - p_ik)) along the trajectory."""
    if accel_body is None:
        accel_body = getattr(traj, "accel_body", None)
        if accel_body is None:
            raise ValueError("trajectory does not carry a constant body acceleration")
    N_s = scale_direction(traj.state(1), accel_body, analysis)
    out = []
    for k in ks:
        row = build_row_analytic(traj, k, analysis, u_r_body)
        lhs = float(row.full() @ N_s)
        state_k = traj.state(k)
        n, _, b, _, _, _ = range_geometry(state_k, analysis.features_w, u_r_body)
        rhs = float(n @ (analysis.features_w[1] - state_k.p_w_i)) / b
        out.append((lhs, rhs))
    return out


def hover_nullspace_residuals(
    traj: LabTrajectory, analysis: AnalysisState, u_r_body: np.ndarray, ks: list[int]
) -> list[float]:
    """|M_k N_h| normalized by ||M_k|| ||N_h|| for range rows (hover claim)."""
    N_h = hover_direction(analysis)
    nh_norm = np.linalg.norm(N_h)
    if nh_norm == 0.0:
        return [0.0 for _ in ks]
    out = []
    for k in ks:
        row = build_row_analytic(traj, k, analysis, u_r_body).full()
        out.append(abs(float(row @ N_h)) / (np.linalg.norm(row) * nh_norm))
    return out


@dataclass
class NullspaceReport:
    singular_values: np.ndarray
    nullity: int
    basis: np.ndarray  # (dim, nullity)
    residuals: dict[str, float] = field(default_factory=dict)
    verdicts: dict[str, str] = field(default_factory=dict)
    condition: float = 0.0

    def contains(self, name: str, tol: float = 1e-6) -> bool:
        return self.residuals[name] < tol


def nullspace_report(
    M: np.ndarray,
    analysis: AnalysisState,
    initial: InertialState,
    accel_body=None,
    sv_tol: float = 1e-8,
    gravity: np.ndarray = GRAVITY,
) -> NullspaceReport:
    """Numerical right nullspace of a stacked observability matrix.

    The canonical directions (global translation x3, yaw, scale, out-of-facet
    depth) are projected onto the computed subspace; a projection residual
    below 1e-6 counts as inside, above 1e-3 as outside.
    """
    if M.shape[0] < M.shape[1]:
        raise ValueError("stack more rows than the state dimension before analyzing")
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    dim = M.shape[1]
    smax = s[0]
    nullity = int(np.sum(s < sv_tol * smax))
    basis = Vt[dim - nullity :, :].T if nullity else np.zeros((dim, 0))

    report = NullspaceReport(
        singular_values=s,
        nullity=nullity,
        basis=basis,
        condition=float(smax / max(s[-1], 1e-300)) if len(s) else np.inf,
    )

    directions = {}
    T = translation_directions(analysis)
    for i, name in enumerate(["translation_x", "translation_y", "translation_z"]):
        directions[name] = T[:, i]
    directions["yaw"] = yaw_direction(initial, analysis, gravity)
    if accel_body is not None:
        directions["scale"] = scale_direction(initial, accel_body, analysis)
    nh = hover_direction(analysis)
    if np.linalg.norm(nh) > 0:
        directions["out_of_facet_depth"] = nh

    for name, d in directions.items():
        dn = d / np.linalg.norm(d)
        proj = basis @ (basis.T @ dn) if basis.shape[1] else np.zeros_like(dn)
        resid = float(np.linalg.norm(dn - proj))
        report.residuals[name] = resid
        if resid < 1e-6:
            report.verdicts[name] = "unobservable"
        elif resid > 1e-3:
            report.verdicts[name] = "observable"
        else:
            report.verdicts[name] = "ambiguous"
    return report


def write_report(report: NullspaceReport, out_dir, label: str):
    """CSV + plain-text summary of a nullspace analysis."""
    import csv
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"nullspace_{label}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "projection_residual", "verdict"])
        for name, r in report.residuals.items():
            w.writerow([name, f"{r:.6e}", report.verdicts[name]])
        w.writerow(["nullity", report.nullity, ""])
    with open(out / f"report_{label}.txt", "w") as fh:
        fh.write(f"nullspace analysis: {label}\n")
        fh.write(f"nullity: {report.nullity}\n")
        fh.write(f"condition: {report.condition:.3e}\n")
        for name, r in report.residuals.items():
            fh.write(f"{name}: {report.verdicts[name]} (residual {r:.3e})\n")
