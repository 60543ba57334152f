"""Teach-pass pose graph with submaps, and the interval-gated repeat pass.

Frame and edge conventions: a teach vertex ``m`` and a repeat vertex ``r``
are vehicle frames.  An edge ``(src, dst, T)`` stores ``T_{src,dst}``, the
pose of ``dst`` expressed in ``src``.  Repeat odometry edges run ``r-1 -> r``
and localization edges run ``r -> m``.
"""
from __future__ import annotations

import bisect
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import LidarFrame, read_frame, voxel_downsample, write_frame
from .doppler import DopplerConfig, DopplerOdometry, VelocityState
from .geometry import LogDomainError, Pose, compose, exp_map, log_map, se3_right_jacobian_inv, skew_batch
from .gp import TrajectoryKnot
from .icp import (
    MIN_CORRESPONDENCES, IcpConfig, IcpOdometry, LocalMap, planar_features, undistort,
)
from .linalg import solve_spd, tree_gram

TEACH = "teach"
REPEAT = "repeat"
ODOMETRY = "odometry"
LOCALIZATION = "localization"
LOC_SETTLED_STEP = 1e-3
CYCLE_TOL = 0.1          # |d_k + d_{k-1}| below this fraction of |d_k| is a two-cycle


class GraphIntegrityError(RuntimeError):
    pass


class TeachDivergenceError(RuntimeError):
    def __init__(self, frame_index, reason=""):
        super().__init__(f"teach odometry failed at frame {frame_index}{': ' + reason if reason else ''}")
        self.frame_index = frame_index


@dataclass(frozen=True, eq=False)
class TeachVertex:
    id: int
    pose: Pose                     # vertex vehicle frame in the teach map frame
    submap: LocalMap               # points + normals in the vertex frame
    stamp: float = 0.0
    truth: Optional[Pose] = None   # groundtruth world pose, evaluation only


@dataclass(frozen=True, eq=False)
class Edge:
    kind: str
    src: Tuple[str, int]
    dst: Tuple[str, int]
    T: Pose                        # T_{src,dst}


@dataclass(frozen=True, eq=False)
class LocResult:
    frame: int
    T_rm: Pose
    vertex: int
    converged: bool
    iterations: int
    solve_time: float
    n_correspondences: int = 0


class PoseGraph:
    def __init__(self):
        self.vertices: Dict[int, TeachVertex] = {}
        self.edges: Dict[Tuple[Tuple[str, int], Tuple[str, int]], Edge] = {}
        self.repeat_frames: List[int] = []
        self._loc_frames: List[int] = []
        self.loc: Dict[int, Tuple[int, Pose]] = {}
        self.initial_alignment: Optional[Tuple[int, int, Pose]] = None

    # -- construction -------------------------------------------------------
    def add_vertex(self, v: TeachVertex):
        if v.id in self.vertices:
            raise GraphIntegrityError(f"duplicate vertex {v.id}")
        self.vertices[v.id] = v

    def add_edge(self, kind, src, dst, T: Pose):
        self.edges[(src, dst)] = Edge(kind, src, dst, T)

    def add_repeat_frame(self, r: int, T_prev_r: Optional[Pose] = None):
        if self.repeat_frames and r != self.repeat_frames[-1] + 1:
            raise GraphIntegrityError(f"repeat frame {r} does not follow {self.repeat_frames[-1]}")
        self.repeat_frames.append(r)
        if T_prev_r is not None:
            self.add_edge(ODOMETRY, (REPEAT, r - 1), (REPEAT, r), T_prev_r)

    def add_localization(self, r: int, m: int, T_rm: Pose):
        if m not in self.vertices:
            raise GraphIntegrityError(f"unknown teach vertex {m}")
        if self._loc_frames and r <= self._loc_frames[-1]:
            raise GraphIntegrityError("localizations must be added in frame order")
        self._loc_frames.append(r)
        self.loc[r] = (m, T_rm)
        self.add_edge(LOCALIZATION, (REPEAT, r), (TEACH, m), T_rm)

    def set_initial_alignment(self, r: int, m: int, T_rm: Pose):
        self.initial_alignment = (r, m, T_rm)

    def teach_copy(self) -> "PoseGraph":
        """Fresh graph sharing the (immutable) teach vertices and edges, no repeat state."""
        g = PoseGraph()
        g.vertices = dict(self.vertices)
        g.edges = {k: e for k, e in self.edges.items() if k[0][0] == TEACH and k[1][0] == TEACH}
        return g

    # -- queries ------------------------------------------------------------
    def edge(self, src, dst) -> Pose:
        e = self.edges.get((src, dst))
        if e is not None:
            return e.T
        e = self.edges.get((dst, src))
        if e is not None:
            return e.T.inverse()
        raise GraphIntegrityError(f"missing edge {src} -> {dst}")

    def teach_neighbours(self, m):
        return [k for k in (m - 1, m + 1) if k in self.vertices
                and (((TEACH, min(m, k)), (TEACH, max(m, k))) in self.edges)]

    def last_anchor(self, r):
        """Most recent (frame, vertex, T_rm) at or before ``r`` usable for compounding."""
        i = bisect.bisect_left(self._loc_frames, r) - 1
        best = None
        if i >= 0:
            l = self._loc_frames[i]
            best = (l, *self.loc[l])
        ia = self.initial_alignment
        if ia is not None and ia[0] <= r and (best is None or ia[0] > best[0]):
            best = ia
        return best

    def odometry_chain(self, a: int, b: int) -> Pose:
        """``T_{a,b}`` for repeat frames ``a <= b`` from consecutive odometry edges."""
        out = Pose.identity()
        for k in range(a, b):
            out = out @ self.edge((REPEAT, k), (REPEAT, k + 1))
        return out

    def teach_chain(self, a: int, b: int) -> Pose:
        """``T_{a,b}`` between teach vertices through consecutive teach edges."""
        if a == b:
            return Pose.identity()
        step = 1 if b > a else -1
        out = Pose.identity()
        for k in range(a, b, step):
            out = out @ self.edge((TEACH, k), (TEACH, k + step))
        return out

    # -- persistence --------------------------------------------------------
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for vid in sorted(self.vertices):
            lines.append("V %d %s" % (vid, _fmt(self.vertices[vid].pose)))
        for e in self.edges.values():
            if e.src[0] == TEACH and e.dst[0] == TEACH:
                lines.append("E %s %d %d %s" % (e.kind, e.src[1], e.dst[1], _fmt(e.T)))
        (d / "graph.txt").write_text("\n".join(lines) + "\n")
        meta = []
        for vid in sorted(self.vertices):
            v = self.vertices[vid]
            truth = "" if v.truth is None else " " + _fmt(v.truth)
            meta.append("S %d %r%s" % (vid, float(v.stamp), truth))
        (d / "vertices_meta.txt").write_text("\n".join(meta) + "\n")
        for vid, v in self.vertices.items():
            n = len(v.submap)
            write_frame(d / f"submap_{vid}.dlp",
                        LidarFrame(v.submap.points, np.full(n, v.stamp), np.zeros(n), v.stamp - 0.1, v.stamp))
            # the frame format has no normal field; keep them alongside
            v.submap.normals.astype("<f8").tofile(d / f"submap_{vid}.nrm")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        g = cls()
        poses, edges = {}, []
        for lineno, line in enumerate((d / "graph.txt").read_text().splitlines(), start=1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "V" and len(tok) == 14:
                    poses[int(tok[1])] = Pose.from_row12([float(x) for x in tok[2:]])
                elif tok[0] == "E" and len(tok) == 16:
                    edges.append((tok[1], int(tok[2]), int(tok[3]), Pose.from_row12([float(x) for x in tok[4:]])))
                else:
                    raise ValueError(f"unrecognised record {tok[0]!r} with {len(tok)} fields")
            except ValueError as exc:
                raise GraphIntegrityError(f"graph.txt line {lineno}: {exc}") from exc
        meta = {}
        mp = d / "vertices_meta.txt"
        if mp.exists():
            for line in mp.read_text().splitlines():
                tok = line.split()
                if len(tok) >= 3 and tok[0] == "S":
                    truth = Pose.from_row12([float(x) for x in tok[3:]]) if len(tok) == 15 else None
                    meta[int(tok[1])] = (float(tok[2]), truth)
        for vid in sorted(poses):
            try:
                sub = read_frame(d / f"submap_{vid}.dlp")
                normals = np.fromfile(d / f"submap_{vid}.nrm", dtype="<f8")
            except OSError as exc:
                raise GraphIntegrityError(f"vertex {vid}: {exc}") from exc
            if normals.size != 3 * len(sub):
                raise GraphIntegrityError(f"vertex {vid}: {normals.size // 3} normals for {len(sub)} points")
            stamp, truth = meta.get(vid, (sub.t_end, None))
            submap = LocalMap.from_points(sub.positions, normals.reshape(-1, 3), 1)
            g.add_vertex(TeachVertex(vid, poses[vid], submap, stamp, truth))
        for kind, a, b, T in edges:
            g.add_edge(kind, (TEACH, a), (TEACH, b), T)
        return g


def _fmt(p: Pose) -> str:
    return " ".join(repr(float(x)) for x in p.row12())


# ---------------------------------------------------------------------------
# teach

def build_submap(frames: Sequence[Tuple[LidarFrame, Pose]], vertex_pose: Pose, config: IcpConfig) -> LocalMap:
    """Union of undistorted frames (sensor frame + sensor pose in map) in the vertex frame.

    Normals and planarity are estimated on the full voxelised union, so
    points near plane intersections see both planes and are rejected.
    """
    inv = vertex_pose.inverse()
    pts = [(inv @ T_ms).apply(f.positions) for f, T_ms in frames]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    stamp = frames[-1][0].t_end if frames else 0.1
    union = LidarFrame(pts, np.full(len(pts), stamp), np.zeros(len(pts)), stamp - 0.1, stamp)
    selected = planar_features(voxel_downsample(union, config.voxel_size), config)
    if len(selected) == 0:
        raise ValueError("submap has no planar points")
    return LocalMap.from_points(selected.positions, selected.normals, 1)


def _submap_or_fail(frame_index, frames, pose, config):
    try:
        return build_submap(frames, pose, config)
    except ValueError as exc:
        raise TeachDivergenceError(frame_index, str(exc)) from exc


def exceeds_thresholds(delta: Pose, thresholds, tol: float = 1e-9) -> bool:
    """True when ``delta`` moves at least one (translation m, rotation rad) threshold."""
    trans_thr, rot_thr = thresholds
    return bool(np.linalg.norm(delta.t) >= trans_thr - tol or delta.angle() >= rot_thr - tol)


def select_vertex_frames(poses: Sequence[Pose], thresholds) -> List[int]:
    """Indices of ``poses`` that become vertices; index 0 always does."""
    out = [0]
    for i in range(1, len(poses)):
        if exceeds_thresholds(poses[out[-1]].inverse() @ poses[i], thresholds):
            out.append(i)
    return out


def teach(frames: Iterable[LidarFrame], gyro: Iterable, config: IcpConfig, initial_twist,
          thresholds=(10.0, np.deg2rad(30.0)), truth: Optional[Callable[[float], Pose]] = None,
          submap_frames: int = 3) -> PoseGraph:
    """Run ICP odometry over the teach sequence and lay down vertices with submaps.

    Vertex 0 sits at the start of the first frame; a new vertex is created at
    the end of any frame whose pose has moved at least one threshold away
    from the previous vertex.  ``frames`` and ``gyro`` may be lazy iterables.
    """
    graph = PoseGraph()
    recent = deque(maxlen=submap_frames)
    odo: Optional[IcpOdometry] = None
    last_vertex: Optional[TeachVertex] = None
    for j, (frame, g) in enumerate(zip(frames, gyro)):
        if odo is None:
            odo = IcpOdometry(config, initial_twist, frame.t_start)
        step = odo.step(frame, g)
        if step.status == "failed":
            raise TeachDivergenceError(j, step.reason)
        pose = step.knots[1].pose
        recent.append((step.frame, pose @ config.T_vs))
        if last_vertex is None:
            start = step.knots[0].pose
            last_vertex = TeachVertex(0, start, _submap_or_fail(j, list(recent), start, config), frame.t_start,
                                      None if truth is None else truth(frame.t_start))
            graph.add_vertex(last_vertex)
            continue
        delta = last_vertex.pose.inverse() @ pose
        if exceeds_thresholds(delta, thresholds):
            vid = last_vertex.id + 1
            v = TeachVertex(vid, pose, _submap_or_fail(j, list(recent), pose, config), frame.t_end,
                            None if truth is None else truth(frame.t_end))
            graph.add_vertex(v)
            graph.add_edge(ODOMETRY, (TEACH, last_vertex.id), (TEACH, vid), delta)
            last_vertex = v
    if odo is None:
        raise ValueError("teach needs at least one frame")
    return graph


# ---------------------------------------------------------------------------
# repeat-side graph queries

def find_nearest_vertex(graph: PoseGraph, estimate: Pose, start: Optional[int] = None,
                        hop_radius: int = 5) -> TeachVertex:
    """Closest teach vertex (translation) within ``hop_radius`` graph hops of ``start``."""
    if not graph.vertices:
        raise GraphIntegrityError("graph has no teach vertices")
    if start is None or start not in graph.vertices:
        pool = sorted(graph.vertices)
    else:
        seen = {start: 0}
        queue = deque([start])
        while queue:
            m = queue.popleft()
            if seen[m] == hop_radius:
                continue
            for k in graph.teach_neighbours(m):
                if k not in seen:
                    seen[k] = seen[m] + 1
                    queue.append(k)
        pool = sorted(seen)
    d = [np.linalg.norm(graph.vertices[m].pose.t - estimate.t) for m in pool]
    return graph.vertices[pool[int(np.argmin(d))]]


def compound_prior(graph: PoseGraph, r: int, m: int) -> Pose:
    """Prior ``T_{r,m}`` chained from the last localization (or initial alignment)."""
    anchor = graph.last_anchor(r)
    if anchor is None:
        raise GraphIntegrityError(f"no localization or initial alignment before frame {r}")
    l, m_prev, T_lm = anchor
    T_rl = graph.odometry_chain(l, r).inverse()
    return compose(T_rl, T_lm, graph.teach_chain(m_prev, m))


# ---------------------------------------------------------------------------
# localization

def _default_loc_information(config: IcpConfig):
    return np.linalg.inv(config.loc_prior_cov)


def localize(frame: LidarFrame, vertex: TeachVertex, prior: Pose, config: IcpConfig,
             frame_id: int = 0, use_measurements: bool = True) -> LocResult:
    """Gauss-Newton on ``T_{r,m}`` with a prior factor and point-to-plane factors.

    ``frame`` is undistorted to its end time, in the sensor frame, with normals.
    """
    t_start = time.perf_counter()
    if prior.angle() >= np.pi - 1e-6:
        raise LogDomainError("prior rotation at or beyond pi; re-initialise")
    X = prior.inverse()              # T_{m,r}
    info = _default_loc_information(config)
    x_v = config.T_vs.apply(frame.positions) if len(frame) else np.zeros((0, 3))
    n_v = config.T_vs.rotate(frame.normals) if frame.normals is not None and len(frame) else None
    sub = vertex.submap
    if not use_measurements:
        # the prior factor alone is minimised exactly at the prior
        return LocResult(frame_id, prior, vertex.id, True, 0, time.perf_counter() - t_start, 0)
    if len(sub) == 0 or len(frame) == 0:
        return LocResult(frame_id, prior, vertex.id, False, 0, time.perf_counter() - t_start, 0)
    converged, moved, n_corr, it, step, prev_d = False, False, 0, 0, np.inf, None
    cos_gate = np.cos(np.deg2rad(config.normal_gate_deg))
    for it in range(1, config.max_iterations + 1):
        H = np.zeros((6, 6))
        g = np.zeros(6)
        p = X.apply(x_v)
        idx, _ = sub.query(p, config.max_correspondence, config.workers)
        hit = idx >= 0
        if n_v is not None:
            cos = np.einsum("ni,ni->n", X.rotate(n_v), sub.normals[np.maximum(idx, 0)])
            hit &= np.abs(cos) >= cos_gate
        hit = np.flatnonzero(hit)
        n_corr = hit.size
        if n_corr < MIN_CORRESPONDENCES:
            break
        e = sub.points[idx[hit]] - p[hit]
        G = np.zeros((n_corr, 3, 6))
        G[:, :, :3] = np.eye(3)
        G[:, :, 3:] = -skew_batch(x_v[hit])
        J = -(X.R @ G)
        nrm = sub.normals[idx[hit]]
        eps = config.plane_epsilon
        a = np.sqrt(1.0 - eps) / config.point_sigma
        c = np.sqrt(eps) / config.point_sigma
        rows = np.concatenate([a * np.einsum("ni,nij->nj", nrm, J)[:, None, :], c * J], axis=1)
        res = np.concatenate([a * np.einsum("ni,ni->n", nrm, e)[:, None], c * e], axis=1)
        Hp, gp = tree_gram(rows.reshape(-1, 6), res.reshape(-1))
        H += Hp
        g += gp
        ep = log_map(prior @ X)
        Jp = se3_right_jacobian_inv(ep)
        H += Jp.T @ info @ Jp
        g += Jp.T @ info @ ep
        d = solve_spd(H, -g)
        step = np.linalg.norm(d)
        if prev_d is not None and np.linalg.norm(d + prev_d) < CYCLE_TOL * step:
            # association flips between two sets and the step undoes the last one:
            # stop halfway between the two fixed points
            X = X @ exp_map(0.5 * d)
            converged = True
            break
        if np.any(d != 0.0):
            X = X @ exp_map(d)
            moved = True
        if step < config.pose_tol:
            converged = True
            break
        prev_d = d
    # association can flip between near-identical sets at the noise floor;
    # a small final step still marks a settled solution
    if not converged and n_corr >= MIN_CORRESPONDENCES and step < LOC_SETTLED_STEP:
        converged = True
    T_rm = X.inverse() if moved else prior
    return LocResult(frame_id, T_rm, vertex.id, converged and n_corr >= MIN_CORRESPONDENCES,
                     it, time.perf_counter() - t_start, int(n_corr))


# ---------------------------------------------------------------------------
# repeat

@dataclass
class RepeatConfig:
    doppler: DopplerConfig = field(default_factory=DopplerConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    hop_radius: int = 5


@dataclass
class RepeatResult:
    localizations: List[LocResult]
    estimates: List[Tuple[int, Pose]]     # per frame: (vertex m, T_{r,m}) dead-reckoned or localized
    timings: List[float]                  # seconds per frame
    graph: PoseGraph
    stored_clouds: int = 0                # Doppler path: clouds preprocessed for localization
    odometry: List[Pose] = field(default_factory=list)

    @property
    def attempts(self):
        return len(self.localizations)


def doppler_knots(step) -> Tuple[TrajectoryKnot, TrajectoryKnot]:
    """Relative two-knot trajectory over a Doppler frame, for undistortion."""
    return (TrajectoryKnot(Pose.identity(), step.previous.twist, step.previous.stamp),
            TrajectoryKnot(step.relative, step.current.twist, step.current.stamp))


@dataclass
class OdometryTrace:
    """Per-frame odometry output of one backend, with the wall-clock time of each step.

    Odometry never depends on localization, so one trace serves every interval.
    """
    backend: str
    relative: List[Pose]
    knots: List[Tuple[TrajectoryKnot, TrajectoryKnot]]
    clouds: List[Optional[LidarFrame]]     # ICP: undistorted features; Doppler: not kept
    seconds: List[float]

    def __len__(self):
        return len(self.relative)


class _LiveOdometry:
    def __init__(self, backend, config: RepeatConfig, initial_twist, t0):
        if backend == "doppler":
            self.odo = DopplerOdometry(config.doppler, VelocityState(initial_twist, t0))
        else:
            self.odo = IcpOdometry(config.icp, initial_twist, t0)
        self.backend = backend

    def __call__(self, r, frame, gyro):
        tic = time.perf_counter()
        step = self.odo.step(frame, gyro)
        if self.backend == "doppler":
            knots, cloud = doppler_knots(step), None
        else:
            knots, cloud = step.knots, step.frame
        return step.relative, knots, cloud, time.perf_counter() - tic


def run_odometry(frames: Sequence[LidarFrame], gyro: Sequence, backend: str, config: RepeatConfig,
                 initial_twist) -> OdometryTrace:
    _check_backend(backend)
    live = _LiveOdometry(backend, config, initial_twist, frames[0].t_start)
    trace = OdometryTrace(backend, [], [], [], [])
    for r, (frame, g) in enumerate(zip(frames, gyro)):
        rel, knots, cloud, sec = live(r, frame, g)
        trace.relative.append(rel)
        trace.knots.append(knots)
        trace.clouds.append(cloud)
        trace.seconds.append(sec)
    return trace


def _check_backend(backend):
    if backend not in ("doppler", "icp"):
        raise ValueError(f"unknown backend {backend!r}")


def repeat(frames: Sequence[LidarFrame], gyro: Sequence, graph: PoseGraph, n: int, backend: str,
           config: RepeatConfig, initial_alignment: Tuple[int, Pose], initial_twist,
           odometry: Optional[OdometryTrace] = None) -> RepeatResult:
    """Odometry on every frame; map-matching on frames ``r % n == 0``.

    Repeat vertex ``r`` is the vehicle frame at ``frames[r].t_end``;
    ``initial_alignment = (m0, T_{0,m0})`` anchors frame 0.  A precomputed
    ``odometry`` trace replays its steps and their recorded step times
    instead of re-running the backend.
    """
    if n < 1:
        raise ValueError("interval n must be >= 1")
    _check_backend(backend)
    if not frames:
        raise ValueError("repeat needs at least one frame")
    if odometry is not None:
        if odometry.backend != backend or len(odometry) != len(frames):
            raise ValueError("odometry trace does not match this backend and sequence")
        source = lambda r, frame, g: (odometry.relative[r], odometry.knots[r], odometry.clouds[r],
                                      odometry.seconds[r])
    else:
        source = _LiveOdometry(backend, config, initial_twist, frames[0].t_start)
    icfg = config.icp
    m0, T0 = initial_alignment
    graph.set_initial_alignment(0, m0, T0)
    last_match = m0
    locs, estimates, timings, odom = [], [], [], []
    stored = 0
    for r, (frame, g) in enumerate(zip(frames, gyro)):
        relative, knots, cloud, odo_seconds = source(r, frame, g)
        tic = time.perf_counter()
        graph.add_repeat_frame(r, relative if r > 0 else None)
        result = None
        if r % n == 0:
            if backend == "doppler":
                # clouds are only preprocessed and kept when an attempt is due
                vox = voxel_downsample(frame, icfg.voxel_size)
                cloud = planar_features(undistort(vox, knots, icfg.T_vs), icfg)
                stored += 1
            # dead-reckoned map pose picks the candidate vertex
            T_r_last = compound_prior(graph, r, last_match)
            est_map = graph.vertices[last_match].pose @ T_r_last.inverse()
            vertex = find_nearest_vertex(graph, est_map, last_match, config.hop_radius)
            prior = compound_prior(graph, r, vertex.id)
            result = localize(cloud, vertex, prior, icfg, frame_id=r)
            locs.append(result)
            if result.converged:
                graph.add_localization(r, vertex.id, result.T_rm)
                last_match = vertex.id
        timings.append(odo_seconds + time.perf_counter() - tic)
        odom.append(relative)
        if result is not None and result.converged:
            estimates.append((last_match, result.T_rm))
        else:
            estimates.append((last_match, compound_prior(graph, r, last_match)))
    return RepeatResult(locs, estimates, timings, graph, stored, odom)
