"""Strapdown propagation of the inertial state and its error covariance.

The nominal state is integrated with a midpoint rule per IMU interval. The
error transition returned by :func:`error_transition` is the exact first-order
Jacobian of that discrete map, so finite differences of :func:`propagate`
reproduce it to rounding. Composing the per-step transitions yields the
familiar closed forms, e.g. the velocity-to-position block accumulates to
``(k-1) * dt * I`` and the position-to-accel-bias coupling pairs with the
integrated trajectory exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonMonotonicStampError, StreamGapError
from .rotations import Quaternion, quat_to_rotation, skew, so3_exp, so3_right_jacobian
from .state import ATT, BA, BG, IMU_DIM, POS, VEL, FilterState, WorldConstants

MAX_DT = 0.1


@dataclass
class ImuSample:
    """One gyro/accelerometer sample; signals represent the interval midpoint."""

    omega_m: np.ndarray
    accel_m: np.ndarray
    stamp: float

    def __post_init__(self):
        self.omega_m = np.asarray(self.omega_m, dtype=float)
        self.accel_m = np.asarray(self.accel_m, dtype=float)


@dataclass
class NoiseModel:
    """Continuous-time IMU noise densities (white noise and bias random walks)."""

    gyro_noise_density: float = 0.0
    accel_noise_density: float = 0.0
    gyro_bias_walk: float = 0.0
    accel_bias_walk: float = 0.0

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TransitionBlocks:
    """Error-state transition over the 15 inertial error dimensions.

    Named couplings follow the usual integral-term indexing:
    ``phi_12`` attitude from gyro bias, ``phi_52`` position from gyro bias,
    ``phi_54`` position from accel bias.
    """

    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (IMU_DIM, IMU_DIM):
            raise ValueError("transition must be 15x15")

    @staticmethod
    def identity() -> "TransitionBlocks":
        return TransitionBlocks(np.eye(IMU_DIM))

    @property
    def phi_12(self) -> np.ndarray:
        return self.phi[ATT, BG]

    @property
    def phi_52(self) -> np.ndarray:
        return self.phi[POS, BG]

    @property
    def phi_54(self) -> np.ndarray:
        return self.phi[POS, BA]

    def compose(self, earlier: "TransitionBlocks") -> "TransitionBlocks":
        """Transition of the concatenated interval: self after earlier."""
        return TransitionBlocks(self.phi @ earlier.phi)


def _midpoint_terms(state: FilterState, sample: ImuSample, dt: float):
    omega = sample.omega_m - state.inertial.b_g
    accel = sample.accel_m - state.inertial.b_a
    q = state.inertial.q_w_i
    q_mid = q * Quaternion.from_rotvec(0.5 * dt * omega)
    C_mid = quat_to_rotation(q_mid)
    return omega, accel, C_mid


def _check_step(state: FilterState, sample: ImuSample, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > MAX_DT:
        raise StreamGapError(f"dt={dt} exceeds {MAX_DT}s")
    if sample.stamp < state.stamp:
        raise NonMonotonicStampError(f"sample stamp {sample.stamp} precedes state stamp {state.stamp}")


def step_transition(state: FilterState, sample: ImuSample, dt: float) -> TransitionBlocks:
    """Exact first-order Jacobian of one discrete propagation step."""
    omega, accel, C_mid = _midpoint_terms(state, sample, dt)
    half = 0.5 * dt * omega
    A = so3_exp(-half)  # attitude error carried to the interval midpoint
    Jr_half = so3_right_jacobian(half)
    Xi = -C_mid.T @ skew(accel) @ A
    Psi = 0.5 * dt * (C_mid.T @ skew(accel) @ Jr_half)

    phi = np.eye(IMU_DIM)
    phi[POS, VEL] = dt * np.eye(3)
    phi[POS, ATT] = 0.5 * dt**2 * Xi
    phi[POS, BG] = 0.5 * dt**2 * Psi
    phi[POS, BA] = -0.5 * dt**2 * C_mid.T
    phi[VEL, ATT] = dt * Xi
    phi[VEL, BG] = dt * Psi
    phi[VEL, BA] = -dt * C_mid.T
    phi[ATT, ATT] = so3_exp(-dt * omega)
    phi[ATT, BG] = -dt * so3_right_jacobian(dt * omega)
    return TransitionBlocks(phi)


def error_transition(state: FilterState, sample: ImuSample, dt: float) -> TransitionBlocks:
    """Single-step inertial error transition (identity over clones/features)."""
    _check_step(state, sample, dt)
    return step_transition(state, sample, dt)


def _discrete_noise(C_mid: np.ndarray, noise: NoiseModel, dt: float, phi: np.ndarray) -> np.ndarray:
    G = np.zeros((IMU_DIM, 12))
    G[VEL, 3:6] = -C_mid.T
    G[ATT, 0:3] = -np.eye(3)
    G[BG, 6:9] = np.eye(3)
    G[BA, 9:12] = np.eye(3)
    qc = np.concatenate(
        [
            np.full(3, noise.gyro_noise_density**2),
            np.full(3, noise.accel_noise_density**2),
            np.full(3, noise.gyro_bias_walk**2),
            np.full(3, noise.accel_bias_walk**2),
        ]
    )
    GQG = G @ (qc[:, None] * G.T)
    # trapezoidal discretization of the continuous-time noise
    return 0.5 * dt * (phi @ GQG @ phi.T + GQG)


def propagate_nominal(
    state: FilterState,
    sample: ImuSample,
    dt: float,
    noise: NoiseModel | None = None,
    world: WorldConstants | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Advance only the nominal state; return (phi, Qd) for deferred covariance work."""
    _check_step(state, sample, dt)
    if world is None:
        world = WorldConstants()
    g = world.gravity_w

    phi = step_transition(state, sample, dt).phi
    omega, accel, C_mid = _midpoint_terms(state, sample, dt)

    a_w = C_mid.T @ accel + g
    inert = state.inertial
    p_new = inert.p_w_i + dt * inert.v_w_i + 0.5 * dt**2 * a_w
    v_new = inert.v_w_i + dt * a_w
    q_new = (inert.q_w_i * Quaternion.from_rotvec(dt * omega)).normalized()

    Qd = None
    if noise is not None and (
        noise.gyro_noise_density or noise.accel_noise_density or noise.gyro_bias_walk or noise.accel_bias_walk
    ):
        Qd = _discrete_noise(C_mid, noise, dt, phi)

    inert.p_w_i = p_new
    inert.v_w_i = v_new
    inert.q_w_i = q_new
    state.stamp = sample.stamp
    return phi, Qd


def apply_transition_to_cov(state: FilterState, phi: np.ndarray, Qd: np.ndarray | None):
    """Propagate the covariance by an (accumulated) inertial transition."""
    P = state.cov
    n = state.error_dim()
    new_ii = phi @ P[:IMU_DIM, :IMU_DIM] @ phi.T
    if Qd is not None:
        new_ii += Qd
    # only the inertial block and its cross rows change; keep them symmetric
    P[:IMU_DIM, :IMU_DIM] = 0.5 * (new_ii + new_ii.T)
    if n > IMU_DIM:
        cross = phi @ P[:IMU_DIM, IMU_DIM:]
        P[:IMU_DIM, IMU_DIM:] = cross
        P[IMU_DIM:, :IMU_DIM] = cross.T


def propagate(
    state: FilterState,
    sample: ImuSample,
    dt: float,
    noise: NoiseModel | None = None,
    world: WorldConstants | None = None,
) -> FilterState:
    """Advance the nominal state by one IMU interval and propagate covariance.

    Clones and features are untouched; their cross-covariance with the
    inertial block is carried through the transition. Mutates and returns
    ``state``.
    """
    phi, Qd = propagate_nominal(state, sample, dt, noise, world)
    apply_transition_to_cov(state, phi, Qd)
    return state


def accumulate_transition(blocks: list[TransitionBlocks]) -> TransitionBlocks:
    """Ordered product of single-step transitions (earliest first)."""
    if not blocks:
        raise ValueError("needs at least one step")
    total = blocks[0].phi.copy()
    for b in blocks[1:]:
        if b.phi.shape != total.shape:
            raise ValueError("dimension mismatch in transition composition")
        total = b.phi @ total
    return TransitionBlocks(total)
