"""Two-knot white-noise-on-acceleration trajectory interpolation on SE(3).

Between knots ``k`` and ``k+1`` the trajectory is written in local
coordinates ``xi(t) = log(T_k^-1 T(t))`` whose posterior mean is a cubic
Hermite-type blend of the boundary states.  The blend weights do not depend
on the power-spectral density, so interpolation only needs the knots.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import expm_frechet

from .geometry import (
    Pose, curly, exp_map_batch, log_map, se3_right_jacobian, se3_right_jacobian_inv,
    so3_left_jacobian,
)


class InterpolationDomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrajectoryKnot:
    """Vehicle pose in the map frame (``T_mv``), body twist and time."""

    pose: Pose
    twist: np.ndarray
    stamp: float

    def __post_init__(self):
        object.__setattr__(self, "twist", np.asarray(self.twist, dtype=float).reshape(6))


def transition(dt):
    return np.array([[1.0, dt], [0.0, 1.0]])


def q_scalar(dt):
    """Scalar factor of the WNOA process covariance; the full one is ``kron(q, Qc)``."""
    return np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])


def process_covariance(dt, Qc):
    return np.kron(q_scalar(dt), Qc)


def interpolation_weights(s, span):
    """Scalar ``(lambda, psi)`` blend matrices, each ``(N, 2, 2)``, for offsets ``s``.

    Mean at offset ``s``: ``gamma(s) = lambda @ gamma_k + psi @ gamma_{k+1}``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    r = span - s
    Qs = np.stack([np.stack([s**3 / 3, s**2 / 2], -1), np.stack([s**2 / 2, s], -1)], -2)
    PhiT = np.zeros((s.size, 2, 2))
    PhiT[:, 0, 0] = 1.0
    PhiT[:, 1, 0] = r
    PhiT[:, 1, 1] = 1.0
    psi = Qs @ PhiT @ np.linalg.inv(q_scalar(span))
    Phis = np.zeros((s.size, 2, 2))
    Phis[:, 0, 0] = 1.0
    Phis[:, 0, 1] = s
    Phis[:, 1, 1] = 1.0
    lam = Phis - psi @ transition(span)
    return lam, psi


def right_jacobian_inv_dot(xi, v):
    """Derivative of ``J_r(xi)^-1 v`` with respect to ``xi`` (6x6), exact.

    ``J_r(xi)`` is the top-right block of ``expm([[-ad(xi), I], [0, 0]])``;
    its directional derivatives come from the Frechet derivative of expm.
    """
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    M = np.zeros((12, 12))
    M[:6, :6] = -curly(xi)
    M[:6, 6:] = np.eye(6)
    Jinv = se3_right_jacobian_inv(xi)
    y = Jinv @ v
    out = np.zeros((6, 6))
    E = np.zeros((12, 12))
    for j in range(6):
        e = np.zeros(6)
        e[j] = 1.0
        E[:6, :6] = -curly(e)
        _, L = expm_frechet(M, E)
        out[:, j] = -Jinv @ (L[:6, 6:] @ y)
    return out


def knot_locals(k1: TrajectoryKnot, k2: TrajectoryKnot):
    """Local pose and local-rate of the second knot relative to the first."""
    xi1 = log_map(k1.pose.inverse() @ k2.pose)
    return xi1, se3_right_jacobian_inv(xi1) @ k2.twist


def _check_domain(knots, ts):
    k1, k2 = knots
    if not k2.stamp > k1.stamp:
        raise InterpolationDomainError("knot stamps must be strictly increasing")
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    tol = 1e-9 * max(1.0, abs(k2.stamp))
    if np.any(ts < k1.stamp - tol) or np.any(ts > k2.stamp + tol):
        raise InterpolationDomainError(
            f"time outside [{k1.stamp}, {k2.stamp}]: [{ts.min()}, {ts.max()}]")
    return ts


def interpolate_local(knots, ts):
    """Local coordinates ``xi(t)`` and their rates, each ``(N, 6)``.

    Also returns the blend weights so callers can form Jacobians.
    """
    k1, k2 = knots
    ts = _check_domain(knots, ts)
    span = k2.stamp - k1.stamp
    lam, psi = interpolation_weights(np.clip(ts - k1.stamp, 0.0, span), span)
    xi1, xid1 = knot_locals(k1, k2)
    w1 = k1.twist
    xi = lam[:, 0, 1, None] * w1 + psi[:, 0, 0, None] * xi1 + psi[:, 0, 1, None] * xid1
    xid = lam[:, 1, 1, None] * w1 + psi[:, 1, 0, None] * xi1 + psi[:, 1, 1, None] * xid1
    return xi, xid, lam, psi


def interpolate_poses(knots, ts):
    """Batched posterior-mean poses ``T(t)`` as ``(R (N,3,3), t (N,3))``."""
    k1 = knots[0]
    xi, _, _, _ = interpolate_local(knots, ts)
    dR, dt = exp_map_batch(xi)
    R = k1.pose.R @ dR
    t = np.einsum("ij,nj->ni", k1.pose.R, dt) + k1.pose.t
    return R, t


def interpolate_state(knots: Tuple[TrajectoryKnot, TrajectoryKnot], t: float):
    """Posterior-mean pose and body twist at ``t``."""
    k1, k2 = knots
    if t == k1.stamp:
        return k1.pose, k1.twist.copy()
    if t == k2.stamp:
        return k2.pose, k2.twist.copy()
    xi, xid, _, _ = interpolate_local(knots, [t])
    dR, dt = exp_map_batch(xi)
    pose = k1.pose @ Pose(dR[0], dt[0])
    return pose, se3_right_jacobian(xi[0]) @ xid[0]


def interpolate_twists(knots, ts):
    """Body twists along the mean, ``(N, 6)``."""
    xi, xid, _, _ = interpolate_local(knots, ts)
    out = np.empty_like(xi)
    for i in range(xi.shape[0]):
        out[i] = se3_right_jacobian(xi[i]) @ xid[i]
    return out


def angular_rates(knots, ts):
    """Angular velocity along the mean, ``(N, 3)``; uses only the SO(3) block."""
    xi, xid, _, _ = interpolate_local(knots, ts)
    J = so3_left_jacobian(-xi[:, 3:])
    return np.einsum("nij,nj->ni", J, xid[:, 3:])
