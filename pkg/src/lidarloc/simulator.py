"""Synthetic FMCW lidar: ray-cast scans with Doppler returns, gyro streams and
exact continuous-time groundtruth.

Doppler sign convention: a return reports ``dir . (v_sensor - v_surface)``
expressed in the sensor frame, where ``dir`` is the unit ray direction.  A
sensor moving forward past a static world therefore sees *positive* Doppler on
points ahead of it, which is exactly the measurement model used by
:mod:`lidarloc.doppler`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .cloud import GyroSample, LidarFrame
from .geometry import Pose, adjoint, exp_map, exp_map_batch

FRAME_RATE = 10.0


class RouteSpecError(ValueError):
    pass


@dataclass
class Segment:
    t0: float
    t1: float
    twist: np.ndarray

    def __post_init__(self):
        self.twist = np.asarray(self.twist, dtype=float).reshape(6)


class GroundTruth:
    """Piecewise-constant-twist trajectory ``T_wv(t)`` integrated exactly."""

    def __init__(self, segments: Sequence[Segment], initial_pose: Optional[Pose] = None):
        if not segments:
            raise RouteSpecError("route needs at least one segment")
        for k, seg in enumerate(segments):
            if not seg.t1 > seg.t0:
                raise RouteSpecError(f"segment {k} has non-positive duration")
            if k and abs(seg.t0 - segments[k - 1].t1) > 1e-9:
                kind = "overlaps" if seg.t0 < segments[k - 1].t1 else "leaves a gap after"
                raise RouteSpecError(f"segment {k} {kind} segment {k - 1}")
        self.segments = list(segments)
        self.starts = np.array([s.t0 for s in segments])
        self.twists = np.array([s.twist for s in segments])
        poses = [initial_pose or Pose()]
        for seg in segments[:-1]:
            poses.append(poses[-1] @ exp_map((seg.t1 - seg.t0) * seg.twist))
        self.knot_R = np.array([p.R for p in poses])
        self.knot_t = np.array([p.t for p in poses])

    @property
    def t_start(self):
        return self.segments[0].t0

    @property
    def t_end(self):
        return self.segments[-1].t1

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_start - 1e-9) or np.any(t > self.t_end + 1e-9):
            raise ValueError("query time outside the route")
        return np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.segments) - 1)

    def twist(self, t) -> np.ndarray:
        return self.twists[self._segment(t)].copy()

    def poses(self, ts):
        """Batch query; returns ``(R, t)`` stacks of ``T_wv``."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        k = self._segment(ts)
        dR, dt = exp_map_batch((ts - self.starts[k])[:, None] * self.twists[k])
        R0, t0 = self.knot_R[k], self.knot_t[k]
        return R0 @ dR, np.einsum("nij,nj->ni", R0, dt) + t0

    def pose(self, t) -> Pose:
        R, p = self.poses([t])
        return Pose(R[0], p[0])


def build_trajectory(segments, initial_pose: Optional[Pose] = None, t0: float = 0.0) -> GroundTruth:
    """Build groundtruth from ``Segment`` objects or ``(duration, twist)`` pairs."""
    segs = []
    t = t0
    for s in segments:
        if isinstance(s, Segment):
            segs.append(s)
            t = s.t1
        else:
            duration, twist = s
            segs.append(Segment(t, t + float(duration), twist))
            t += float(duration)
    return GroundTruth(segs, initial_pose)


# ---------------------------------------------------------------------------
# world

@dataclass
class Plane:
    normal: np.ndarray
    offset: float  # points x with normal . x = offset

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("box extents must be positive")


@dataclass
class WorldSpec:
    planes: List[Plane] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    dynamic: List[Box] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.planes and not self.boxes:
            raise ValueError("world needs at least one static primitive")


@dataclass
class SensorSpec:
    fov_azimuth_deg: float = 120.0
    fov_elevation_deg: float = 30.0
    rate: float = FRAME_RATE
    rows: int = 64
    cols: int = 900
    max_range: float = 500.0
    min_range: float = 1.0
    doppler_noise: float = 0.0
    range_noise: float = 0.0
    bias_slope: float = 0.0
    bias_intercept: float = 0.0
    gyro_rate: float = 100.0
    gyro_noise: float = 0.0
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T_vs: Pose = field(default_factory=Pose)  # sensor pose in the vehicle frame

    def __post_init__(self):
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        if self.rate <= 0 or self.gyro_rate <= 0 or self.rows < 1 or self.cols < 1:
            raise ValueError("sensor rates and beam counts must be positive")

    @property
    def period(self):
        return 1.0 / self.rate

    @property
    def T_sv(self) -> Pose:
        return self.T_vs.inverse()

    def beam_directions(self):
        """Unit directions ``(rows, cols, 3)`` in the sensor frame; columns sweep left to right."""
        half_az = np.deg2rad(self.fov_azimuth_deg) / 2
        half_el = np.deg2rad(self.fov_elevation_deg) / 2
        az = np.linspace(half_az, -half_az, self.cols) if self.cols > 1 else np.zeros(1)
        el = np.linspace(-half_el, half_el, self.rows) if self.rows > 1 else np.zeros(1)
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)


def _rng(seed, *stream):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *stream])


def _hit_planes(origins, dirs, planes):
    best = np.full(len(origins), np.inf)
    for pl in planes:
        denom = dirs @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.offset - origins @ pl.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)
        best = np.minimum(best, t)
    return best


def _hit_boxes(origins, dirs, lo, hi):
    """Slab test of N rays against B boxes given per-ray box bounds ``(N, B, 3)`` or ``(B, 3)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins[:, None, :]) * inv[:, None, :]
        t2 = (hi - origins[:, None, :]) * inv[:, None, :]
    tmin = np.nanmax(np.minimum(t1, t2), axis=2)
    tmax = np.nanmin(np.maximum(t1, t2), axis=2)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def render_scan(world: WorldSpec, gt: GroundTruth, t_start: float, t_end: float,
                sensor: SensorSpec, seed: Optional[int] = None) -> LidarFrame:
    """Ray-cast one frame.  Every column fires at its own timestamp."""
    if abs((t_end - t_start) - sensor.period) > 1e-9:
        raise ValueError("frame duration must equal the sensor period")
    seed = world.seed if seed is None else seed
    dirs_s = sensor.beam_directions()  # rows, cols, 3
    rows, cols = dirs_s.shape[:2]
    col_t = np.linspace(t_start, t_end, cols) if cols > 1 else np.array([t_end])
    R_wv, p_wv = gt.poses(col_t)
    R_ws = R_wv @ sensor.T_vs.R
    p_ws = np.einsum("nij,j->ni", R_wv, sensor.T_vs.t) + p_wv

    # flatten column-major so points come out in sweep (time) order
    d_s = dirs_s.transpose(1, 0, 2).reshape(-1, 3)
    col = np.repeat(np.arange(cols), rows)
    ts = col_t[col]
    origins = p_ws[col]
    d_w = np.einsum("nij,nj->ni", R_ws[col], d_s)

    rng_range = _hit_planes(origins, d_w, world.planes)
    obj_vel = np.zeros((len(ts), 3))
    centre = p_ws[cols // 2]
    reach = sensor.max_range
    if world.boxes:
        lo = np.array([b.lo for b in world.boxes])
        hi = np.array([b.hi for b in world.boxes])
        near = np.linalg.norm(0.5 * (lo + hi) - centre, axis=1) < reach + np.linalg.norm(hi - lo, axis=1) + 2.0
        if near.any():
            rng_range = np.minimum(rng_range, _hit_boxes(origins, d_w, lo[near], hi[near]).min(axis=1))
    if world.dynamic:
        vel = np.array([b.velocity for b in world.dynamic])
        lo = np.array([b.lo for b in world.dynamic])[None] + ts[:, None, None] * vel[None]
        hi = np.array([b.hi for b in world.dynamic])[None] + ts[:, None, None] * vel[None]
        hits = _hit_boxes(origins, d_w, lo, hi)
        k = np.argmin(hits, axis=1)
        t_dyn = hits[np.arange(len(ts)), k]
        closer = t_dyn < rng_range
        rng_range = np.where(closer, t_dyn, rng_range)
        obj_vel[closer] = vel[k[closer]]

    keep = np.isfinite(rng_range) & (rng_range <= sensor.max_range) & (rng_range >= sensor.min_range)
    if not keep.any():
        return LidarFrame.empty(t_start, t_end)
    d_s, ts, col, rng_range, obj_vel = d_s[keep], ts[keep], col[keep], rng_range[keep], obj_vel[keep]

    # sensor linear velocity in the sensor frame and surface velocity rotated into it
    twists = gt.twist(ts)
    v_s = (twists @ adjoint(sensor.T_sv).T)[:, :3]
    u_s = np.einsum("nji,nj->ni", R_ws[col], obj_vel)
    doppler = np.einsum("ni,ni->n", d_s, v_s - u_s)
    doppler = doppler + sensor.bias_slope * rng_range + sensor.bias_intercept

    gen = _rng(seed, 1, int(round(t_start * 1e6)))
    if sensor.doppler_noise > 0:
        doppler = doppler + sensor.doppler_noise * gen.standard_normal(len(ts))
    meas_range = rng_range
    if sensor.range_noise > 0:
        meas_range = rng_range + sensor.range_noise * gen.standard_normal(len(ts))
    return LidarFrame(d_s * meas_range[:, None], ts, doppler, t_start, t_end)


def simulate_gyro(gt: GroundTruth, sensor: SensorSpec, t_start: float, t_end: float,
                  seed: int = 0) -> List[GyroSample]:
    """Gyro samples on the global ``k / rate`` grid inside ``[t_start, t_end)``."""
    k0 = int(np.ceil(t_start * sensor.gyro_rate - 1e-9))
    k1 = int(np.ceil(t_end * sensor.gyro_rate - 1e-9))
    stamps = np.arange(k0, k1) / sensor.gyro_rate
    if stamps.size == 0:
        return []
    w = gt.twist(stamps)[:, 3:] @ sensor.T_sv.R.T + sensor.gyro_bias
    if sensor.gyro_noise > 0:
        w = w + sensor.gyro_noise * _rng(seed, 2, k0).standard_normal(w.shape)
    return [GyroSample(float(t), r) for t, r in zip(stamps, w)]


# ---------------------------------------------------------------------------
# scene helpers

def ground_plane(height=0.0) -> Plane:
    return Plane(np.array([0.0, 0.0, 1.0]), height)


def corridor_boxes(gt: GroundTruth, spacing=8.0, offset=10.0, seed=0,
                   size_range=(2.0, 6.0), height_range=(3.0, 10.0)) -> List[Box]:
    """Axis-aligned boxes lining both sides of the route at roughly ``spacing`` metres."""
    rng = _rng(seed, 3)
    dt = 0.05
    ts = np.arange(gt.t_start, gt.t_end, dt)
    R, p = gt.poses(ts)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    boxes = []
    s = 0.0
    while s <= arc[-1]:
        i = min(np.searchsorted(arc, s), len(ts) - 1)
        left = R[i][:, 1]
        for side in (1.0, -1.0):
            half = rng.uniform(*size_range, size=2) / 2
            h = rng.uniform(*height_range)
            jitter = rng.uniform(-0.3, 0.3) * spacing
            c = p[i] + side * (offset + half.max()) * left + jitter * R[i][:, 0]
            candidate = Box([c[0] - half[0], c[1] - half[1], 0.0], [c[0] + half[0], c[1] + half[1], h])
            if _clear_of_route(candidate, p, offset * 0.5):
                boxes.append(candidate)
        s += spacing
    return boxes


def clutter_boxes(gt: GroundTruth, spacing=3.0, offset_range=(4.0, 7.0), seed=0,
                  size_range=(0.4, 1.5), height_range=(1.0, 4.0)) -> List[Box]:
    """Small boxes (posts, kiosks) scattered on both sides of the route.

    They give faces across the direction of travel, which side walls lack.
    """
    rng = _rng(seed, 4)
    ts = np.arange(gt.t_start, gt.t_end, 0.05)
    R, p = gt.poses(ts)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    boxes = []
    s = 0.0
    while s <= arc[-1]:
        i = min(np.searchsorted(arc, s), len(ts) - 1)
        side = 1.0 if rng.random() < 0.5 else -1.0
        half = rng.uniform(*size_range, size=2) / 2
        h = rng.uniform(*height_range)
        c = p[i] + side * rng.uniform(*offset_range) * R[i][:, 1]
        candidate = Box([c[0] - half[0], c[1] - half[1], 0.0], [c[0] + half[0], c[1] + half[1], h])
        if _clear_of_route(candidate, p, offset_range[0] * 0.5):
            boxes.append(candidate)
        s += spacing * rng.uniform(0.5, 1.5)
    return boxes


def _clear_of_route(box, route_points, margin):
    closest = np.clip(route_points, box.lo, box.hi)
    return np.min(np.linalg.norm((closest - route_points)[:, :2], axis=1)) > margin
