"""Continuous-time point-to-plane ICP odometry with gyro factors.

The state is a pair of trajectory knots (pose + body twist) bracketing one
frame.  Gauss-Newton re-associates every point against a sliding local map
on each iteration; points are placed using the interpolated pose at their
own timestamp, so motion distortion is compensated inside the solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .cloud import GyroSample, LidarFrame, extract_planar_features, voxel_downsample
from .geometry import (
    Pose, exp_map, exp_map_batch, log_map, se3_left_jacobian_inv, se3_right_jacobian_batch,
    se3_right_jacobian_inv, skew_batch, so3_left_jacobian, so3_right_jacobian_dot,
)
from .gp import (
    TrajectoryKnot, interpolate_local, interpolate_poses, interpolate_state, knot_locals,
    process_covariance, right_jacobian_inv_dot,
)
from .linalg import schur_marginal, solve_spd, tree_gram, tree_sum

STATE_DIM = 24
MIN_CORRESPONDENCES = 10


class InsufficientOverlapError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class IcpConfig:
    Qc: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.1]))
    point_sigma: float = 0.1          # metres, along the map normal
    plane_epsilon: float = 1e-3       # in-plane weight relative to normal weight
    R_gyro: np.ndarray = field(default_factory=lambda: 0.01 ** 2 * np.eye(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    use_gyro: bool = True
    max_iterations: int = 20
    pose_tol: float = 1e-6
    twist_tol: float = 1e-6
    max_correspondence: float = 1.0
    normal_gate_deg: float = 10.0     # max angle between frame and map normals
    map_span: int = 3
    T_vs: Pose = field(default_factory=Pose.identity)
    voxel_size: float = 0.5
    k_neighbors: int = 20
    planarity_threshold: float = 0.95
    workers: int = 1
    loc_prior_cov: np.ndarray = field(default_factory=lambda: np.diag([1.0] * 3 + [0.1 ** 2] * 3))

    def __post_init__(self):
        Qc = np.asarray(self.Qc, dtype=float)
        if Qc.ndim == 1:
            Qc = np.diag(Qc)
        R = np.asarray(self.R_gyro, dtype=float)
        if R.ndim == 0:
            R = R * np.eye(3)
        L = np.asarray(self.loc_prior_cov, dtype=float)
        if L.ndim == 1:
            L = np.diag(L)
        for name, m in (("Qc", Qc), ("R_gyro", R), ("loc_prior_cov", L)):
            if not np.allclose(m, m.T) or np.min(np.linalg.eigvalsh(m)) <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
        object.__setattr__(self, "Qc", Qc)
        object.__setattr__(self, "R_gyro", R)
        object.__setattr__(self, "loc_prior_cov", L)
        object.__setattr__(self, "gyro_bias", np.asarray(self.gyro_bias, dtype=float).reshape(3))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.point_sigma <= 0 or not 0 < self.plane_epsilon <= 1:
            raise ValueError("point_sigma must be positive and plane_epsilon in (0, 1]")
        if self.max_correspondence <= 0 or self.map_span < 1:
            raise ValueError("max_correspondence and map_span must be positive")

    @property
    def T_sv(self) -> Pose:
        return self.T_vs.inverse()


# ---------------------------------------------------------------------------
# local map

@dataclass(frozen=True, eq=False)
class LocalMap:
    """Points with unit normals in the map frame, grouped by insertion frame."""

    blocks: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()
    span: int = 3

    def __post_init__(self):
        if self.blocks:
            pts = np.concatenate([b[0] for b in self.blocks])
            nrm = np.concatenate([b[1] for b in self.blocks])
        else:
            pts = np.zeros((0, 3))
            nrm = np.zeros((0, 3))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "tree", cKDTree(pts) if len(pts) else None)

    @classmethod
    def from_points(cls, points, normals, span=3):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        return cls(((points, normals),), span)

    def __len__(self):
        return self.points.shape[0]

    @property
    def block_sizes(self):
        return [len(b[0]) for b in self.blocks]

    def query(self, points, max_dist, workers=1):
        """Exact nearest neighbour per query; index ``-1`` when none within ``max_dist``."""
        if self.tree is None:
            raise ValueError("local map is empty")
        d, idx = self.tree.query(np.asarray(points, dtype=float).reshape(-1, 3),
                                 distance_upper_bound=max_dist, workers=workers)
        idx = np.where(np.isfinite(d) & (d <= max_dist), idx, -1)
        return idx, d


def associate(point, local_map: LocalMap, max_dist: float):
    """Nearest map point and its normal, or ``None`` if farther than ``max_dist``."""
    idx, _ = local_map.query(np.asarray(point, dtype=float)[None], max_dist)
    if idx[0] < 0:
        return None
    return local_map.points[idx[0]], local_map.normals[idx[0]]


def update_local_map(local_map: LocalMap, frame: LidarFrame, pose: Pose,
                     span: Optional[int] = None) -> LocalMap:
    """Insert ``frame`` (points + normals, expressed in the frame of ``pose``) and evict old frames."""
    span = local_map.span if span is None else span
    if frame.normals is None:
        raise ValueError("frames inserted into a local map need normals")
    pts = pose.apply(frame.positions)
    nrm = pose.rotate(frame.normals)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    blocks = (local_map.blocks + ((pts, nrm),))[-span:]
    return LocalMap(blocks, span)


# ---------------------------------------------------------------------------
# undistortion

def undistort(frame: LidarFrame, knots, T_vs: Pose = Pose.identity()) -> LidarFrame:
    """Re-express every point in the sensor frame at ``frame.t_end``."""
    if len(frame) == 0:
        return replace(frame, timestamps=np.full(0, frame.t_end))
    R, t = interpolate_poses(knots, frame.timestamps)
    end, _ = interpolate_state(knots, frame.t_end)
    T_end_inv = (end @ T_vs).inverse()
    x_v = T_vs.apply(frame.positions)
    world = np.einsum("nij,nj->ni", R, x_v) + t
    out = T_end_inv.apply(world)
    normals = None
    if frame.normals is not None:
        n_v = T_vs.rotate(frame.normals)
        normals = T_end_inv.rotate(np.einsum("nij,nj->ni", R, n_v))
    return replace(frame, positions=out, timestamps=np.full(len(frame), frame.t_end), normals=normals)


# ---------------------------------------------------------------------------
# Gauss-Newton

def _knot_derivatives(knots):
    """Local knot-2 quantities and their 6x24 derivatives w.r.t. the state."""
    k1, k2 = knots
    xi1, xid1 = knot_locals(k1, k2)
    Jr_inv = se3_right_jacobian_inv(xi1)
    Dxi1 = np.zeros((6, STATE_DIM))
    Dxi1[:, 0:6] = -se3_left_jacobian_inv(xi1)
    Dxi1[:, 12:18] = Jr_inv
    Dxid1 = right_jacobian_inv_dot(xi1, k2.twist) @ Dxi1
    Dxid1[:, 18:24] += Jr_inv
    Sw1 = np.zeros((6, STATE_DIM))
    Sw1[:, 6:12] = np.eye(6)
    return xi1, xid1, Dxi1, Dxid1, Sw1


def _local_derivatives(lam, psi, Dxi1, Dxid1, Sw1):
    """Per-sample derivatives of xi(t) and its rate, ``(N, 6, 24)`` each."""
    Dxi = (lam[:, 0, 1, None, None] * Sw1 + psi[:, 0, 0, None, None] * Dxi1
           + psi[:, 0, 1, None, None] * Dxid1)
    Dxid = (lam[:, 1, 1, None, None] * Sw1 + psi[:, 1, 0, None, None] * Dxi1
            + psi[:, 1, 1, None, None] * Dxid1)
    return Dxi, Dxid


def _adjoint_batch(R, t):
    out = np.zeros((R.shape[0], 6, 6))
    out[:, :3, :3] = R
    out[:, :3, 3:] = skew_batch(t) @ R
    out[:, 3:, 3:] = R
    return out


def _place_points(knots, frame: LidarFrame, config: IcpConfig):
    """Map-frame positions of every point under the interpolated trajectory."""
    k1 = knots[0]
    xi, _, lam, psi = interpolate_local(knots, frame.timestamps)
    dR, dt = exp_map_batch(xi)
    R = k1.pose.R @ dR
    t = np.einsum("ij,nj->ni", k1.pose.R, dt) + k1.pose.t
    x_v = config.T_vs.apply(frame.positions)
    world = np.einsum("nij,nj->ni", R, x_v) + t
    return world, (xi, lam, psi, R, x_v)


def _point_jacobians(placed, kd):
    xi, lam, psi, R, x_v = placed
    _, _, Dxi1, Dxid1, Sw1 = kd
    Dxi = (lam[:, 0, 1, None, None] * Sw1 + psi[:, 0, 0, None, None] * Dxi1
           + psi[:, 0, 1, None, None] * Dxid1)
    # right perturbation of the interpolated pose
    Ri, ti = exp_map_batch(-xi)
    Dpose = se3_right_jacobian_batch(xi) @ Dxi
    Dpose[:, :, 0:6] += _adjoint_batch(Ri, ti)
    G = np.zeros((xi.shape[0], 3, 6))
    G[:, :, :3] = np.eye(3)
    G[:, :, 3:] = -skew_batch(x_v)
    return -(R @ G) @ Dpose


def point_residuals(knots, frame: LidarFrame, targets, config: IcpConfig,
                    jacobians=True, kd=None):
    """Residuals ``p_m - T(t_i) T_vs q_i`` (N,3) and Jacobians (N,3,24).

    The state perturbation is ``T <- T exp(d)`` on each knot pose and
    additive on each twist, ordered (pose1, twist1, pose2, twist2).
    """
    world, placed = _place_points(knots, frame, config)
    e = targets - world
    if not jacobians:
        return e, None
    kd = _knot_derivatives(knots) if kd is None else kd
    return e, _point_jacobians(placed, kd)


def gyro_residuals(knots, gyro: Sequence[GyroSample], config: IcpConfig, jacobians=True,
                   kd=None):
    """Residuals ``y - bias - C_sv w(t_j)`` (M,3) and Jacobians (M,3,24)."""
    ts = np.array([g.stamp for g in gyro])
    ys = np.array([g.rate for g in gyro]) - config.gyro_bias
    xi, xid, lam, psi = interpolate_local(knots, ts)
    phi, phid = xi[:, 3:], xid[:, 3:]
    Jr = so3_left_jacobian(-phi)
    omega = np.einsum("nij,nj->ni", Jr, phid)
    C_sv = config.T_sv.R
    e = ys - omega @ C_sv.T
    if not jacobians:
        return e, None
    _, _, Dxi1, Dxid1, Sw1 = _knot_derivatives(knots) if kd is None else kd
    Dxi, Dxid = _local_derivatives(lam, psi, Dxi1, Dxid1, Sw1)
    dJ = so3_right_jacobian_dot(phi, phid)
    Domega = Jr @ Dxid[:, 3:, :] + dJ @ Dxi[:, 3:, :]
    return e, -C_sv @ Domega


def motion_prior_residual(knots, Qc, kd=None):
    """WNOA residual between the two knots (12,), its Jacobian (12,24) and information."""
    k1, k2 = knots
    span = k2.stamp - k1.stamp
    xi1, xid1, Dxi1, Dxid1, Sw1 = _knot_derivatives(knots) if kd is None else kd
    e = np.concatenate([xi1 - span * k1.twist, xid1 - k1.twist])
    J = np.vstack([Dxi1 - span * Sw1, Dxid1 - Sw1])
    return e, J, np.linalg.inv(process_covariance(span, Qc))


def anchor_residual(knot: TrajectoryKnot, mean: TrajectoryKnot):
    """Unary prior on the older knot, (12,) with Jacobian (12,24)."""
    ep = log_map(mean.pose.inverse() @ knot.pose)
    e = np.concatenate([ep, knot.twist - mean.twist])
    J = np.zeros((12, STATE_DIM))
    J[:6, 0:6] = se3_right_jacobian_inv(ep)
    J[6:, 6:12] = np.eye(6)
    return e, J


def plane_weights(normals, sigma, eps):
    nn = normals[:, :, None] * normals[:, None, :]
    return (nn + eps * (np.eye(3) - nn)) / sigma**2


@dataclass(frozen=True, eq=False)
class IcpResult:
    knots: Tuple[TrajectoryKnot, TrajectoryKnot]
    iterations: int
    converged: bool
    diverged: bool
    costs: List[float]
    covariance: np.ndarray          # 24x24 at the final linearisation
    marginal_information: np.ndarray  # 12x12 on the newer knot
    n_correspondences: int

    @property
    def relative(self) -> Pose:
        """``T_{r-1,r}``: newer vehicle frame expressed in the older one."""
        return self.knots[0].pose.inverse() @ self.knots[1].pose


def _retract(knots, d):
    k1, k2 = knots
    return (TrajectoryKnot(k1.pose @ exp_map(d[0:6]), k1.twist + d[6:12], k1.stamp),
            TrajectoryKnot(k2.pose @ exp_map(d[12:18]), k2.twist + d[18:24], k2.stamp))


def linearize(knots, frame, local_map, gyro, anchor, anchor_info, config: IcpConfig):
    """Cost, Gauss-Newton matrix and gradient at ``knots`` (re-associating points)."""
    H = np.zeros((STATE_DIM, STATE_DIM))
    g = np.zeros(STATE_DIM)
    cost = 0.0

    kd = _knot_derivatives(knots)

    # associate with the current pose estimate
    world, placed = _place_points(knots, frame, config)
    idx, _ = local_map.query(world, config.max_correspondence, config.workers)
    hit = idx >= 0
    if frame.normals is not None and config.normal_gate_deg < 180.0:
        # compare normals in the map frame; reject matches across surfaces
        n_map = np.einsum("nij,nj->ni", placed[3], config.T_vs.rotate(frame.normals))
        cos = np.einsum("ni,ni->n", n_map, local_map.normals[np.maximum(idx, 0)])
        hit &= np.abs(cos) >= np.cos(np.deg2rad(config.normal_gate_deg))
    hit = np.flatnonzero(hit)
    n_corr = int(hit.size)
    if n_corr < MIN_CORRESPONDENCES:
        raise InsufficientOverlapError(f"only {n_corr} correspondences (need {MIN_CORRESPONDENCES})")
    e = local_map.points[idx[hit]] - world[hit]
    J = _point_jacobians(tuple(x[hit] for x in placed), kd)
    # W = ((1 - eps) n n^T + eps I) / sigma^2, factored into stacked rows
    n = local_map.normals[idx[hit]]
    eps = config.plane_epsilon
    a = np.sqrt(1.0 - eps) / config.point_sigma
    c = np.sqrt(eps) / config.point_sigma
    rows = np.concatenate([a * np.einsum("ni,nij->nj", n, J)[:, None, :], c * J], axis=1)
    res = np.concatenate([a * np.einsum("ni,ni->n", n, e)[:, None], c * e], axis=1)
    Hp, gp = tree_gram(rows.reshape(-1, STATE_DIM), res.reshape(-1))
    H += Hp
    g += gp
    cost += 0.5 * float(tree_sum(np.sum(res * res, axis=1)))

    if config.use_gyro and len(gyro):
        e, J = gyro_residuals(knots, gyro, config, kd=kd)
        Ri = np.linalg.inv(config.R_gyro)
        JtW = np.transpose(J, (0, 2, 1)) @ Ri
        H += tree_sum(JtW @ J)
        g += tree_sum((JtW @ e[:, :, None])[..., 0])
        cost += 0.5 * float(np.einsum("ni,ij,nj->", e, Ri, e))

    e, J, Wp = motion_prior_residual(knots, config.Qc, kd)
    H += J.T @ Wp @ J
    g += J.T @ Wp @ e
    cost += 0.5 * float(e @ Wp @ e)

    e, J = anchor_residual(knots[0], anchor)
    H += J.T @ anchor_info @ J
    g += J.T @ anchor_info @ e
    cost += 0.5 * float(e @ anchor_info @ e)
    return cost, 0.5 * (H + H.T), g, n_corr


def default_anchor_information():
    return np.diag([1e8] * 6 + [1e4] * 6)


def icp_odometry_step(frame: LidarFrame, local_map: LocalMap, gyro: Sequence[GyroSample],
                      prior_knots, config: IcpConfig,
                      anchor_information: Optional[np.ndarray] = None) -> IcpResult:
    """Gauss-Newton over the two knots bracketing ``frame``.

    ``prior_knots[0]`` is the anchored older knot (its prior mean);
    ``prior_knots[1]`` is the initial guess for the newer knot.
    """
    anchor = prior_knots[0]
    info = default_anchor_information() if anchor_information is None else anchor_information
    knots = tuple(prior_knots)
    costs: List[float] = []
    rising = 0
    converged = diverged = False
    it = 0
    H = None
    n_corr = 0
    for it in range(1, config.max_iterations + 1):
        cost, H, g, n_corr = linearize(knots, frame, local_map, gyro, anchor, info, config)
        if costs and cost >= costs[-1]:
            rising += 1
        else:
            rising = 0
        costs.append(cost)
        if rising >= 3:
            diverged = True
            break
        d = solve_spd(H, -g)
        knots = _retract(knots, d)
        if (np.linalg.norm(np.r_[d[0:6], d[12:18]]) < config.pose_tol
                and np.linalg.norm(np.r_[d[6:12], d[18:24]]) < config.twist_tol):
            converged = True
            break
    cov = np.linalg.inv(H)
    return IcpResult(knots, it, converged, diverged, costs, 0.5 * (cov + cov.T),
                     schur_marginal(H, np.arange(12, 24)), n_corr)


# ---------------------------------------------------------------------------
# frame-by-frame estimator

def planar_features(frame: LidarFrame, config: IcpConfig) -> LidarFrame:
    if len(frame) < config.k_neighbors:
        return frame.select(np.zeros(0, dtype=np.int64))
    return extract_planar_features(frame, config.k_neighbors, config.planarity_threshold)


def preprocess(frame: LidarFrame, config: IcpConfig) -> LidarFrame:
    """Voxel grid followed by planar-feature selection."""
    return planar_features(voxel_downsample(frame, config.voxel_size), config)


def predict_knot(knot: TrajectoryKnot, stamp: float) -> TrajectoryKnot:
    """Constant-velocity extrapolation."""
    return TrajectoryKnot(knot.pose @ exp_map((stamp - knot.stamp) * knot.twist), knot.twist, stamp)


@dataclass(frozen=True, eq=False)
class IcpStep:
    relative: Pose                   # T_{r-1,r}
    knots: Tuple[TrajectoryKnot, TrajectoryKnot]
    frame: LidarFrame                # preprocessed, undistorted to t_end (sensor frame)
    status: str                      # "init", "ok", "stalled" or "failed"
    iterations: int
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "failed"


class IcpOdometry:
    """Frame-to-local-map odometry; single owner, frames in time order."""

    def __init__(self, config: IcpConfig, initial_twist, t0: float, initial_pose: Pose = Pose.identity()):
        self.config = config
        self.knot = TrajectoryKnot(initial_pose, initial_twist, t0)
        self.info = None
        self.map = LocalMap(span=config.map_span)
        self.frames = 0

    def step(self, frame: LidarFrame, gyro: Sequence[GyroSample]) -> IcpStep:
        cfg = self.config
        vox = voxel_downsample(frame, cfg.voxel_size)
        f = planar_features(vox, cfg)
        guess = (self.knot, predict_knot(self.knot, frame.t_end))
        knots, status, iters, reason = guess, "init", 0, ""
        if self.frames and not len(self.map):
            status, reason = "failed", "local map is empty"
        elif self.frames:
            try:
                if len(f) < MIN_CORRESPONDENCES:
                    raise InsufficientOverlapError(f"{len(f)} features in frame")
                res = icp_odometry_step(f, self.map, gyro, guess, cfg, self.info)
                iters = res.iterations
                # a stall with cost below its start is oscillation at the noise
                # floor; a stall above it is a real divergence
                if not res.diverged:
                    status = "ok"
                elif res.costs[-1] <= res.costs[0]:
                    status = "stalled"
                else:
                    status, reason = "failed", "cost increased over three iterations"
                if status == "failed":
                    self.info = None
                else:
                    knots, self.info = res.knots, res.marginal_information
            except InsufficientOverlapError as exc:
                status, reason = "failed", str(exc)
                self.info = None
        # normals for the map come from the motion-compensated cloud; a raw
        # scan shears planes by the motion during the sweep
        und = planar_features(undistort(vox, knots, cfg.T_vs), cfg)
        if len(und):
            self.map = update_local_map(self.map, und, knots[1].pose @ cfg.T_vs)
        self.knot = knots[1]
        self.frames += 1
        return IcpStep(knots[0].pose.inverse() @ knots[1].pose, knots, und, status, iters, reason)
