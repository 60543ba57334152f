"""Correspondence-free odometry from per-point Doppler and a gyroscope.

Each frame solves one linear least-squares problem over the body twists at
the frame's start and end, then integrates the interpolated twist to get the
relative pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloud import DopplerBiasModel, GyroSample, LidarFrame, apply_doppler_bias, azel_downsample
from .geometry import Pose, adjoint, exp_map
from .linalg import RankDeficiencyError, schur_marginal, solve_spd, tree_sum

# twist components pinned by the kinematic (non-holonomic) factor
KINEMATIC_INDEX = np.array([1, 2, 3, 4])
MIN_RANGE = 1e-9


class InsufficientDataError(ValueError):
    pass


def _spd(name, m, shape):
    m = np.array(m, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(shape)
    elif m.ndim == 1:
        m = np.diag(m)
    if m.shape != (shape, shape):
        raise ValueError(f"{name} must be {shape}x{shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * np.max(np.abs(m))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(m)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return m


@dataclass(frozen=True, eq=False)
class VelocityState:
    """Body twist (v, w) at ``stamp``; ``information`` is its marginal inverse covariance."""

    twist: np.ndarray
    stamp: float
    information: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "twist", np.asarray(self.twist, dtype=float).reshape(6))
        if self.information is not None:
            object.__setattr__(self, "information", np.asarray(self.information, dtype=float).reshape(6, 6))


@dataclass(frozen=True, eq=False)
class DopplerConfig:
    Qc: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.1]))
    Qz: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(4))
    R_dop: float = 0.2 ** 2
    R_gyro: np.ndarray = field(default_factory=lambda: 0.01 ** 2 * np.eye(3))
    T_sv: Pose = field(default_factory=Pose.identity)
    ransac_iters: int = 100
    ransac_threshold: float = 0.3
    forward_gate: float = 3.0
    integration_steps: int = 10
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed: int = 0
    az_bins: int = 240
    el_bins: int = 60
    bias_model: DopplerBiasModel = field(default_factory=DopplerBiasModel)

    def __post_init__(self):
        object.__setattr__(self, "Qc", _spd("Qc", self.Qc, 6))
        object.__setattr__(self, "Qz", _spd("Qz", self.Qz, 4))
        object.__setattr__(self, "R_gyro", _spd("R_gyro", self.R_gyro, 3))
        object.__setattr__(self, "gyro_bias", np.asarray(self.gyro_bias, dtype=float).reshape(3))
        if not (np.isfinite(self.R_dop) and self.R_dop > 0):
            raise ValueError("R_dop must be a positive variance")
        if self.integration_steps < 1:
            raise ValueError("integration_steps must be >= 1")
        if self.ransac_iters < 1 or self.ransac_threshold <= 0:
            raise ValueError("ransac_iters and ransac_threshold must be positive")
        if self.forward_gate < 0:
            raise ValueError("forward_gate must be non-negative")


# ---------------------------------------------------------------------------
# outlier rejection

def ransac_doppler_inliers(frame: LidarFrame, config: DopplerConfig, rng=None):
    """Consensus set for a constant sensor-frame velocity model ``y = u . v``.

    Returns ``(inlier indices, v_s)`` where ``v_s`` is the least-squares refit
    on the returned set.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    ranges = np.linalg.norm(frame.positions, axis=1)
    usable = np.flatnonzero(ranges > MIN_RANGE)
    if usable.size < 3:
        raise InsufficientDataError(f"need 3 points with nonzero range, have {usable.size}")
    u = frame.positions[usable] / ranges[usable, None]
    y = frame.doppler[usable]
    m = usable.size

    # sample 3 distinct points per hypothesis
    picks = np.argpartition(rng.random((config.ransac_iters, m)), 2, axis=1)[:, :3]
    A = u[picks]
    b = y[picks]
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-9
    best = np.zeros(0, dtype=np.int64)
    if np.any(ok):
        v = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
        inlier = np.abs(u @ v.T - y[:, None]) < config.ransac_threshold
        counts = inlier.sum(axis=0)
        best = np.flatnonzero(inlier[:, int(np.argmax(counts))])
    if best.size < 3:
        # degenerate samples only; fall back to a fit over everything
        best = np.arange(m)
    v_s, *_ = np.linalg.lstsq(u[best], y[best], rcond=None)
    return usable[best], v_s


def forward_velocity_gate(current, previous, gate: float = 3.0) -> bool:
    """True to accept ``current``; rejects jumps in forward speed above ``gate``."""
    return bool(abs(float(current[0]) - float(previous[0])) <= gate)


# ---------------------------------------------------------------------------
# linear solve

def _sensor_blocks(T_sv: Pose):
    Ad = adjoint(T_sv)
    return Ad[:3], Ad[3:]


def _alpha(t, t0, t1):
    return np.clip((np.asarray(t, dtype=float) - t0) / (t1 - t0), 0.0, 1.0)


def doppler_normal_equations(frame: LidarFrame, gyro: Sequence[GyroSample],
                             previous: VelocityState, config: DopplerConfig):
    """Information matrix and vector for ``x = (w_prev, w_curr)`` (12-dim)."""
    t0, t1 = frame.t_start, frame.t_end
    dt = t1 - t0
    if previous.stamp > t0 + 1e-9 or previous.stamp < t0 - 1e-9:
        raise ValueError(f"previous state at {previous.stamp} does not match frame start {t0}")
    lin, ang = _sensor_blocks(config.T_sv)
    A = np.zeros((12, 12))
    b = np.zeros(12)

    # prior linking to the previous solve
    P = previous.information
    if P is None:
        P = np.linalg.inv(dt * config.Qc)
    A[:6, :6] += P
    b[:6] += P @ previous.twist

    # white-noise-on-acceleration: w_curr - w_prev ~ N(0, dt Qc)
    Qi = np.linalg.inv(dt * config.Qc)
    A[:6, :6] += Qi
    A[6:, 6:] += Qi
    A[:6, 6:] -= Qi
    A[6:, :6] -= Qi

    # kinematic: selected components of w_curr ~ N(0, Qz)
    k = 6 + KINEMATIC_INDEX
    A[np.ix_(k, k)] += np.linalg.inv(config.Qz)

    # Doppler rows
    if len(frame):
        ranges = np.linalg.norm(frame.positions, axis=1)
        keep = ranges > MIN_RANGE
        u = frame.positions[keep] / ranges[keep, None]
        a = u @ lin
        al = _alpha(frame.timestamps[keep], t0, t1)[:, None]
        rows = np.hstack([(1.0 - al) * a, al * a])
        w = 1.0 / config.R_dop
        A += w * tree_sum(rows[:, :, None] * rows[:, None, :])
        b += w * tree_sum(rows * frame.doppler[keep, None])

    # gyro rows
    if len(gyro):
        Ri = np.linalg.inv(config.R_gyro)
        ts = np.array([g.stamp for g in gyro])
        ys = np.array([g.rate for g in gyro]) - config.gyro_bias
        al = _alpha(ts, t0, t1)
        G = np.concatenate([(1.0 - al)[:, None, None] * ang, al[:, None, None] * ang], axis=2)
        GtR = np.transpose(G, (0, 2, 1)) @ Ri
        A += tree_sum(GtR @ G)
        b += tree_sum((GtR @ ys[:, :, None])[..., 0])
    return 0.5 * (A + A.T), b


def _solve(frame, gyro, previous, config):
    A, b = doppler_normal_equations(frame, gyro, previous, config)
    x = solve_spd(A, b)
    return x, A


def solve_velocity(frame: LidarFrame, gyro: Sequence[GyroSample], previous: VelocityState,
                   config: DopplerConfig) -> VelocityState:
    """Twist at ``frame.t_end`` from one linear solve over both boundary twists."""
    x, A = _solve(frame, gyro, previous, config)
    return VelocityState(x[6:], frame.t_end, schur_marginal(A, np.arange(6, 12)))


def integrate_pose(prev: VelocityState, curr: VelocityState, S: int = 10) -> Pose:
    """Relative pose over ``[prev.stamp, curr.stamp]`` by right-endpoint products."""
    if S < 1:
        raise ValueError("S must be >= 1")
    dt_total = curr.stamp - prev.stamp
    if not dt_total > 0:
        raise ValueError("curr.stamp must follow prev.stamp")
    dt = dt_total / S
    T = Pose.identity()
    for i in range(1, S + 1):
        a = i / S
        T = T @ exp_map(dt * ((1.0 - a) * prev.twist + a * curr.twist))
    return T


# ---------------------------------------------------------------------------
# frame-by-frame estimator

@dataclass(frozen=True, eq=False)
class DopplerStep:
    relative: Pose            # T_{r-1,r}
    previous: VelocityState   # twist at frame start used for integration
    current: VelocityState    # twist at frame end
    accepted: bool
    n_inliers: int


class DopplerOdometry:
    """Single-owner estimator; feed frames in time order."""

    def __init__(self, config: DopplerConfig, initial: VelocityState):
        self.config = config
        self.state = initial
        self._rng = np.random.default_rng(config.seed)

    def preprocess(self, frame: LidarFrame) -> LidarFrame:
        f = azel_downsample(frame, self.config.az_bins, self.config.el_bins)
        return apply_doppler_bias(f, self.config.bias_model)

    def step(self, frame: LidarFrame, gyro: Sequence[GyroSample]) -> DopplerStep:
        cfg = self.config
        prev = self.state
        f = self.preprocess(frame)
        try:
            idx, _ = ransac_doppler_inliers(f, cfg, self._rng)
            f = f.select(idx)
        except InsufficientDataError:
            f = f.select(np.zeros(0, dtype=np.int64))
        n_in = len(f)
        try:
            x, A = _solve(f, gyro, prev, cfg)
            accepted = forward_velocity_gate(x[6:], prev.twist, cfg.forward_gate)
        except RankDeficiencyError:
            accepted = False
        if accepted:
            start = VelocityState(x[:6], prev.stamp, prev.information)
            cur = VelocityState(x[6:], f.t_end, schur_marginal(A, np.arange(6, 12)))
        else:
            # constant-velocity fallback
            start = prev
            cur = VelocityState(prev.twist, f.t_end, prev.information)
        rel = integrate_pose(start, cur, cfg.integration_steps)
        self.state = cur
        return DopplerStep(rel, start, cur, accepted, n_in)
