"""SE(3)/SO(3) arithmetic for poses and twists.

Conventions used throughout the package:

* A twist is ordered ``(v_x, v_y, v_z, w_x, w_y, w_z)`` -- linear part first,
  angular part second -- and is expressed in the vehicle frame (x forward,
  y left, z up).
* ``Pose`` stores ``T_ab``: it maps coordinates expressed in frame ``b`` into
  frame ``a`` (``p_a = R p_b + t``).
* Body velocities act on the right: ``dT/dt = T * twist^``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-7
LOG_DOMAIN_MARGIN = 1e-6
ORTHO_TOL = 1e-9

# selection matrices indexing the twist ordering above
LINEAR = slice(0, 3)
ANGULAR = slice(3, 6)


class LogDomainError(ValueError):
    """Raised when the logarithm is requested too close to a rotation of pi."""


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def skew_batch(v):
    """Stack of skew matrices for an ``(N, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def wedge(xi):
    """Map a 6-vector to its 4x4 se(3) matrix."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0]])


def curly(xi):
    """6x6 adjoint of an se(3) element (``ad(xi)``)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((6, 6))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3:] = skew(xi[:3])
    out[3:, 3:] = skew(xi[3:])
    return out


# ---------------------------------------------------------------------------
# SO(3)

SERIES_ANGLE = 0.2


def _series(theta, coeffs):
    """Evaluate sum_k coeffs[k] * theta^(2k)."""
    th2 = theta * theta
    out = np.zeros_like(th2)
    for c in reversed(coeffs):
        out = out * th2 + c
    return out


def _fact(n):
    return float(np.prod(np.arange(1, n + 1))) if n > 1 else 1.0


# Taylor coefficients (in theta^2) of the closed forms below
_B = [(-1) ** k / _fact(2 * k + 2) for k in range(6)]          # (1-cos t)/t^2
_C = [(-1) ** k / _fact(2 * k + 3) for k in range(6)]          # (t-sin t)/t^3
_A2 = [(-1) ** k / _fact(2 * k + 4) for k in range(6)]         # (t^2+2cos t-2)/(2t^4)
_A3 = [(-1) ** k * (k + 1) / _fact(2 * k + 5) for k in range(6)]  # (2t-3sin t+t cos t)/(2t^5)
_DB = [(-1) ** (k + 1) * 2 * (k + 1) / _fact(2 * k + 4) for k in range(5)]  # b'(t)/t
_DC = [(-1) ** (k + 1) * 2 * (k + 1) / _fact(2 * k + 5) for k in range(5)]  # c'(t)/t


def _so3_coeffs(theta):
    """Return (sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3) with series near zero."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    tiny = theta < SMALL_ANGLE
    ta = np.where(tiny, 1.0, theta)
    a = np.where(tiny, 1.0 - theta * theta / 6.0, np.sin(ta) / ta)
    b = np.where(small, _series(theta, _B), 2.0 * np.sin(0.5 * t) ** 2 / (t * t))
    c = np.where(small, _series(theta, _C), (t - np.sin(t)) / t**3)
    return a, b, c


def so3_exp(phi):
    """Rodrigues' formula; accepts ``(3,)`` or ``(N, 3)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coeffs(theta)
    K = skew_batch(phi)
    eye = np.eye(3)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(w)
    theta = np.arctan2(sin_theta, 0.5 * (np.trace(R) - 1.0))
    if theta >= np.pi - LOG_DOMAIN_MARGIN:
        raise LogDomainError(f"rotation angle {theta:.9f} too close to pi for log map")
    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    return theta / (2.0 * sin_theta) * w


def so3_left_jacobian(phi):
    """Left Jacobian of SO(3); batched over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _so3_coeffs(theta)
    K = skew_batch(phi)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    # (1/t^2) (1 - (t/2) cot(t/2)), series 1/12 + t^2/720 near zero
    d = np.where(small, 1.0 / 12.0 + theta**2 / 720.0,
                 (1.0 - 0.5 * t / np.tan(0.5 * t)) / (t * t))
    K = skew_batch(phi)
    return np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)


def so3_right_jacobian_dot(phi, w):
    """Derivative of ``J_r(phi) @ w`` with respect to ``phi`` (3x3, or (N,3,3) batched).

    J_r(phi) w = w - b(t) phi x w + c(t) phi x (phi x w).
    """
    phi = np.asarray(phi, dtype=float)
    w = np.asarray(w, dtype=float)
    single = phi.ndim == 1
    phi = np.atleast_2d(phi)
    w = np.broadcast_to(w, phi.shape)
    theta = np.linalg.norm(phi, axis=1)
    _, b, c = _so3_coeffs(theta)
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    s, co = np.sin(t), np.cos(t)
    # derivatives of b, c divided by theta
    db = np.where(small, _series(theta, _DB), (t * s - 2.0 * (1.0 - co)) / t**4)
    dc = np.where(small, _series(theta, _DC), (t**2 * (1.0 - co) - 3.0 * (t - s) * t) / t**6)
    pxw = np.cross(phi, w)
    pxpxw = np.cross(phi, pxw)
    outer = lambda x, y: x[:, :, None] * y[:, None, :]
    out = skew_batch(w) * b[:, None, None] - outer(pxw, phi) * db[:, None, None]
    pw = np.einsum("ni,ni->n", phi, w)
    out += c[:, None, None] * (pw[:, None, None] * np.eye(3) + outer(phi, w) - 2.0 * outer(w, phi))
    out += outer(pxpxw, phi) * dc[:, None, None]
    return out[0] if single else out


def orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


# ---------------------------------------------------------------------------
# SE(3)

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``T_ab`` with rotation ``R`` and translation ``t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            R = orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_row12(cls, values) -> "Pose":
        m = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def row12(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]]).reshape(12)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.R @ other.R, self.R @ other.t + self.t)
        return NotImplemented

    def apply(self, points) -> np.ndarray:
        """Transform ``(3,)`` or ``(N, 3)`` points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.R.T

    def angle(self) -> float:
        return float(np.arccos(np.clip((np.trace(self.R) - 1.0) / 2.0, -1.0, 1.0)))

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=4)}, angle={self.angle():.4f})"


def compose(*poses: Pose) -> Pose:
    """Left-to-right product of poses."""
    out = Pose()
    for p in poses:
        out = out @ p
    return out


def inverse(pose: Pose) -> Pose:
    return pose.inverse()


def _se3_q_batch(rho, phi):
    """Barfoot's Q matrix (upper-right block of the SE(3) left Jacobian), batched."""
    theta = np.linalg.norm(phi, axis=-1)
    P = skew_batch(phi)
    Rh = skew_batch(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    s, c = np.sin(t), np.cos(t)
    a1 = np.where(small, _series(theta, _C), (t - s) / t**3)
    a2 = np.where(small, _series(theta, _A2), (t**2 + 2.0 * c - 2.0) / (2.0 * t**4))
    a3 = np.where(small, _series(theta, _A3), (2.0 * t - 3.0 * s + t * c) / (2.0 * t**5))
    return (0.5 * Rh + a1[..., None, None] * (PR + RP + PRP)
            + a2[..., None, None] * (P @ PR + RP @ P - 3.0 * PRP)
            + a3[..., None, None] * (PRP @ P + P @ PRP))


def _se3_q(rho, phi):
    return _se3_q_batch(np.asarray(rho, dtype=float)[None], np.asarray(phi, dtype=float)[None])[0]


def exp_map(xi) -> Pose:
    """SE(3) exponential of a 6-vector ``(rho, phi)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def exp_map_batch(xi):
    """Vectorised exponential; returns rotations ``(N,3,3)`` and translations ``(N,3)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    R = so3_exp(phi)
    t = np.einsum("nij,nj->ni", so3_left_jacobian(phi), rho)
    return R, t


def log_map(pose: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map`; raises :class:`LogDomainError` near angle pi."""
    phi = so3_log(pose.R)
    rho = so3_left_jacobian_inv(phi) @ pose.t
    return np.concatenate([rho, phi])


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint ``[[R, t^ R], [0, R]]`` in (linear, angular) ordering."""
    out = np.zeros((6, 6))
    out[:3, :3] = pose.R
    out[:3, 3:] = skew(pose.t) @ pose.R
    out[3:, 3:] = pose.R
    return out


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q(rho, phi)
    return out


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ _se3_q(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_left_jacobian_batch(xi):
    """Left Jacobians for an ``(N, 6)`` stack."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = J
    out[:, 3:, 3:] = J
    out[:, :3, 3:] = _se3_q_batch(rho, phi)
    return out


def se3_right_jacobian_batch(xi):
    return se3_left_jacobian_batch(-np.asarray(xi, dtype=float))
