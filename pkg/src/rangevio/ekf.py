"""Shared EKF measurement-update step."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.stats import chi2


@lru_cache(maxsize=256)
def chi2_gate(confidence: float, dof: int) -> float:
    return float(chi2.ppf(confidence, df=dof))


def ekf_update(state, H: np.ndarray, residual: np.ndarray, R: np.ndarray) -> bool:
    """Joseph-form EKF update applied to a FilterState; returns False if S is singular.

    Uses the expanded Joseph identity
        P+ = P - K (H P) - (H P)^T K^T + K S K^T
    which avoids forming (I - K H) at full state dimension.
    """
    P = state.cov
    HP = H @ P
    S = HP @ H.T + R
    try:
        K = np.linalg.solve(S, HP).T
    except np.linalg.LinAlgError:
        return False
    if not np.all(np.isfinite(K)):
        return False
    delta = K @ residual
    KHP = K @ HP
    state.cov = P - KHP - KHP.T + K @ S @ K.T
    state.apply_correction(delta)
    state.symmetrize()
    state.floor_diagonal()
    return True


def scalar_update(state, h_row: np.ndarray, residual: float, r_var: float) -> bool:
    """Rank-one EKF update for a scalar measurement (same Joseph expansion)."""
    P = state.cov
    Ph = P @ h_row
    S = float(h_row @ Ph + r_var)
    if S <= 0 or not np.isfinite(S):
        return False
    K = Ph / S
    KPh = np.outer(K, Ph)
    state.cov = P - KPh - KPh.T + S * np.outer(K, K)
    state.apply_correction(K * residual)
    state.symmetrize()
    state.floor_diagonal()
    return True
