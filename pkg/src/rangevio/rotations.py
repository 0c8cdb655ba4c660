"""Quaternion and SO(3) helpers shared by every module.

Conventions, fixed once for the whole package:

* Quaternions are Hamilton, scalar-first ``(w, x, y, z)``.
* ``Quaternion`` stores the attitude of a frame relative to the world:
  ``q_w_b`` carries the world axes onto the body axes.
* ``quat_to_rotation(q)`` returns the direction-cosine matrix ``C(q)`` that
  maps world coordinates into the body frame: ``v_b = C(q) @ v_w``.
* Attitude errors are minimal 3-vectors applied multiplicatively on the
  world-to-body matrix: ``C_true = exp(-skew(dtheta)) @ C_nominal``,
  equivalently ``q_true = q_nominal * Quaternion.from_rotvec(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Count of silent re-normalizations performed by quat_to_rotation on inputs
# that drifted more than UNIT_TOL from unit norm.
_diagnostics = {"renormalized": 0}

UNIT_TOL = 1e-6


def renormalization_count() -> int:
    return _diagnostics["renormalized"]


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(u) -> np.ndarray:
    """Matrix exponential of skew(u): the active rotation by rotvec u."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u)
    s = skew(u)
    if theta < 1e-10:
        # second-order series keeps the FD oracles happy near zero
        return np.eye(3) + s + 0.5 * (s @ s)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * s + b * (s @ s)


def so3_right_jacobian(u) -> np.ndarray:
    """Right Jacobian Jr(u) with exp(u + d) ≈ exp(u) @ exp(Jr(u) d)."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u)
    s = skew(u)
    if theta < 1e-7:
        return np.eye(3) - 0.5 * s + (1.0 / 6.0) * (s @ s)
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) - a * s + b * (s @ s)


@dataclass
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(q) -> "Quaternion":
        q = np.asarray(q, dtype=float)
        return Quaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("rotation axis must be nonzero")
        half = 0.5 * angle
        xyz = math.sin(half) * axis / n
        return Quaternion(math.cos(half), xyz[0], xyz[1], xyz[2])

    @staticmethod
    def from_rotvec(u) -> "Quaternion":
        u = np.asarray(u, dtype=float)
        angle = np.linalg.norm(u)
        if angle < 1e-12:
            # first-order quaternion, renormalized
            q = Quaternion(1.0, 0.5 * u[0], 0.5 * u[1], 0.5 * u[2])
            return q.normalized()
        return Quaternion.from_axis_angle(u, angle)

    @staticmethod
    def from_rotation(C) -> "Quaternion":
        """Quaternion with quat_to_rotation(q) == C (C maps world -> body)."""
        R = np.asarray(C, dtype=float).T  # active matrix
        t = np.trace(R)
        if t > 0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
            xyz = [0.0, 0.0, 0.0]
            xyz[i] = 0.25 * s
            xyz[j] = (R[j, i] + R[i, j]) / s
            xyz[k] = (R[k, i] + R[i, k]) / s
            w = (R[k, j] - R[j, k]) / s
            x, y, z = xyz
        return Quaternion(w, x, y, z).normalized()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-12:
            raise ValueError("cannot normalize a near-zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product self ⊗ other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return self.multiply(other)

    def rotvec_to(self, other: "Quaternion") -> np.ndarray:
        """Minimal rotation d with other ≈ self * from_rotvec(d)."""
        d = self.conjugate() * other
        d = d.normalized()
        sin_half = math.sqrt(d.x**2 + d.y**2 + d.z**2)
        if sin_half < 1e-12:
            return 2.0 * np.array([d.x, d.y, d.z]) * (1.0 if d.w >= 0 else -1.0)
        angle = 2.0 * math.atan2(sin_half, d.w)
        if angle > math.pi:
            angle -= 2.0 * math.pi
        return angle * np.array([d.x, d.y, d.z]) / sin_half


def quat_to_rotation(q: Quaternion) -> np.ndarray:
    """Direction-cosine matrix C(q): world coordinates into the body frame.

    Inputs farther than UNIT_TOL from unit norm are renormalized and the
    event is counted in the module diagnostics. The matrix is cached on the
    quaternion instance; attitude updates always build fresh instances.
    """
    cached = getattr(q, "_dcm", None)
    if cached is not None:
        return cached
    n = q.norm()
    if abs(n - 1.0) > UNIT_TOL:
        _diagnostics["renormalized"] += 1
        q_use = q.normalized()
    elif abs(n - 1.0) > 1e-13:
        q_use = q.normalized()
    else:
        q_use = q
    w, x, y, z = q_use.w, q_use.x, q_use.y, q_use.z
    # active rotation matrix of q, transposed
    C = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)],
            [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)],
            [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    object.__setattr__(q, "_dcm", C)
    return C


def apply_attitude_error(q: Quaternion, dtheta) -> Quaternion:
    """Perturb an attitude by a minimal error: C_new = exp(-skew(d)) C(q)."""
    return (q * Quaternion.from_rotvec(dtheta)).normalized()
