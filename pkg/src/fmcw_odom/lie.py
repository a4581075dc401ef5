"""Minimal SE(3)/SO(3) machinery.

Twists are 6-vectors ordered ``(nu, omega)``: translational part first,
angular part last.  Throughout the package a body velocity ``w`` is the
generalized velocity of the vehicle frame in the sense ``dT_vi/dt = w^ T_vi``,
where ``T_vi`` maps world coordinates into the vehicle frame.  Under this
convention a stationary world point ``p`` seen from the vehicle moves as
``dp/dt = nu + omega x p`` (so forward driving gives ``nu[0] < 0``) and a
Doppler return from a stationary point reads ``q_hat . nu`` when positive
Doppler means a receding point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form coefficients are replaced by their
# Taylor series (truncation error < 1e-17).  The cancellation in
# (theta - sin theta) / theta^3 is already visible around 1e-3 rad.
SERIES_ANGLE = 1e-2
ORTHONORMAL_TOL = 1e-9


def skew(v) -> np.ndarray:
    """Return the 3x3 matrix ``M`` with ``M @ u == cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def wedge6(w) -> np.ndarray:
    """Map a twist ``(nu, omega)`` to its 4x4 Lie algebra matrix."""
    w = np.asarray(w, dtype=float).reshape(6)
    xi = np.zeros((4, 4))
    xi[:3, :3] = skew(w[3:])
    xi[:3, 3] = w[:3]
    return xi


def vee6(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return np.array([xi[0, 3], xi[1, 3], xi[2, 3], xi[2, 1], xi[0, 2], xi[1, 0]])


def _exp_coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and (t-sin t)/t^3, stable for small t."""
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)),
                 np.sin(safe) / safe)
    half = 0.5 * safe
    b = np.where(small, 0.5 - t2 / 24.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0)),
                 0.5 * (np.sin(half) / half) ** 2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)),
                 (safe - np.sin(safe)) / safe ** 3)
    return a, b, c


@dataclass(frozen=True)
class RigidTransform:
    """Rotation and translation acting as ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise ValueError("rigid transform entries must be finite")
        if not self.is_valid(ORTHONORMAL_TOL):
            raise ValueError("rotation is not special orthogonal")

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) < tol)


def exp_se3(xi) -> RigidTransform:
    """Closed-form exponential of a 4x4 ``wedge6`` matrix."""
    xi = np.asarray(xi, dtype=float)
    return RigidTransform.from_matrix(exp_se3_batch(vee6(xi)[None, :])[0])


def exp_se3_batch(twists: np.ndarray) -> np.ndarray:
    """Vectorised exponential of an ``(N, 6)`` array of twists, returning ``(N, 4, 4)``."""
    twists = np.asarray(twists, dtype=float).reshape(-1, 6)
    nu = twists[:, :3]
    omega = twists[:, 3:]
    theta = np.linalg.norm(omega, axis=1)
    a, b, c = _exp_coefficients(theta)
    w = skew_batch(omega)
    w2 = w @ w
    eye = np.eye(3)
    rot = eye + a[:, None, None] * w + b[:, None, None] * w2
    v = eye + b[:, None, None] * w + c[:, None, None] * w2
    out = np.zeros((twists.shape[0], 4, 4))
    out[:, :3, :3] = rot
    out[:, :3, 3] = np.einsum("nij,nj->ni", v, nu)
    out[:, 3, 3] = 1.0
    return out


def adjoint(T: RigidTransform) -> np.ndarray:
    """6x6 adjoint ``[[R, t^ R], [0, R]]`` mapping twists through ``T``."""
    r = T.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[:3, 3:] = skew(T.translation) @ r
    ad[3:, 3:] = r
    return ad


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = 0.5 * (np.trace(r) - 1.0)
    s = 0.5 * np.linalg.norm(np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]))
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def project_to_so3(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rot_z(yaw) @ ry @ rx
