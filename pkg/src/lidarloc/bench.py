"""Sweep driver: teach once, repeat per (backend, interval), score against groundtruth."""
from __future__ import annotations

import dataclasses
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .evaluation import (
    COMPONENTS, ComponentError, SweepResult, assemble_pareto, knee_point, pose_error,
    read_results_csv, rmse, write_results_csv,
)
from .geometry import Pose
from .simulator import GroundTruth
from .teach_repeat import (
    OdometryTrace, PoseGraph, RepeatConfig, RepeatResult, find_nearest_vertex, repeat, run_odometry, teach,
)

DOPPLER_WORKERS = 1
ICP_WORKERS = 10
GRAPH_DIR = "graph"
RESULTS_CSV = "results.csv"


def run_teach(cfg: RunConfig) -> PoseGraph:
    sc = cfg.scenario
    gt = sc.teach_truth()
    # zip in teach pulls one frame then one gyro list, so tee buffers a single pair
    a, b = itertools.tee(sc.frames("teach"))
    return teach((f for f, _ in a), (g for _, g in b), cfg.icp_config(cfg.threads or ICP_WORKERS),
                 gt.twist(gt.t_start), cfg.thresholds, truth=gt.pose)


@dataclass
class RepeatData:
    frames: list
    gyro: list
    truth: GroundTruth


def repeat_data(cfg: RunConfig) -> RepeatData:
    frames, gyro = [], []
    for f, g in cfg.scenario.frames("repeat"):
        frames.append(f)
        gyro.append(g)
    return RepeatData(frames, gyro, cfg.scenario.repeat_truth())


def initial_alignment(graph: PoseGraph, truth: GroundTruth, stamp: float) -> Tuple[int, Pose]:
    """Groundtruth alignment of repeat frame 0 to its nearest teach vertex."""
    if any(v.truth is None for v in graph.vertices.values()):
        raise ValueError("teach vertices carry no groundtruth; cannot align the repeat start")
    T_wr = truth.pose(stamp)
    world = PoseGraph()
    for v in graph.vertices.values():
        world.vertices[v.id] = dataclasses.replace(v, pose=v.truth)
    m0 = find_nearest_vertex(world, T_wr).id
    return m0, T_wr.inverse() @ graph.vertices[m0].truth


def frame_errors(result: RepeatResult, graph: PoseGraph, data: RepeatData) -> List[ComponentError]:
    """Per-frame error of the vehicle pose in the matched vertex frame."""
    out = []
    for frame, (m, T_rm) in zip(data.frames, result.estimates):
        T_rm_true = data.truth.pose(frame.t_end).inverse() @ graph.vertices[m].truth
        out.append(pose_error(T_rm.inverse(), T_rm_true.inverse()))
    return out


@dataclass
class CellResult:
    sweep: SweepResult
    errors: List[ComponentError]
    estimates: List[Tuple[int, Pose]]
    localized: List[bool]
    truths: List[Pose]
    stored_clouds: int
    attempts: int


def repeat_config(cfg: RunConfig, backend: str) -> RepeatConfig:
    # the Doppler pipeline is timed single-worker; --threads applies to ICP only
    workers = DOPPLER_WORKERS if backend == "doppler" else (cfg.threads or ICP_WORKERS)
    return RepeatConfig(cfg.doppler, cfg.icp_config(workers), cfg.hop_radius)


def odometry_trace(cfg: RunConfig, data: RepeatData, backend: str) -> OdometryTrace:
    """One odometry pass; every interval of a backend replays it."""
    return run_odometry(data.frames, data.gyro, backend, repeat_config(cfg, backend),
                        data.truth.twist(data.frames[0].t_start))


def run_cell(cfg: RunConfig, graph: PoseGraph, data: RepeatData, backend: str, n: int,
             trace: Optional[OdometryTrace] = None) -> CellResult:
    rcfg = repeat_config(cfg, backend)
    g = graph.teach_copy()
    truth = data.truth
    m0, T0 = initial_alignment(g, truth, data.frames[0].t_end)
    twist0 = truth.twist(data.frames[0].t_start)
    res = repeat(data.frames, data.gyro, g, n, backend, rcfg, (m0, T0), twist0, odometry=trace)
    errors = frame_errors(res, g, data)
    sweep = SweepResult(cfg.scenario.name, backend, n, rmse(errors), 1000.0 * float(np.mean(res.timings)),
                        len(data.frames))
    truths = [truth.pose(f.t_end).inverse() @ g.vertices[m].truth
              for f, (m, _) in zip(data.frames, res.estimates)]
    localized = [r in g.loc for r in range(len(data.frames))]
    return CellResult(sweep, errors, res.estimates, localized, truths, res.stored_clouds, res.attempts)


# worker-process state for concurrent sweeps
_WORKER: Dict[str, object] = {}


def _worker_init(cfg, graph_dir):
    _WORKER["cfg"] = cfg
    _WORKER["graph"] = PoseGraph.load(graph_dir)
    _WORKER["data"] = repeat_data(cfg)


def _worker_cell(cell):
    backend, n = cell
    traces = _WORKER.setdefault("traces", {})
    if backend not in traces:
        traces[backend] = odometry_trace(_WORKER["cfg"], _WORKER["data"], backend)
    return run_cell(_WORKER["cfg"], _WORKER["graph"], _WORKER["data"], backend, n, traces[backend])


def run_sweep(cfg: RunConfig, graph_dir, serial_timing: bool = True, jobs: Optional[int] = None,
              data: Optional[RepeatData] = None) -> List[CellResult]:
    """All (backend, n) cells, ordered backend-major then by interval."""
    cells = [(b, n) for b in cfg.backends for n in cfg.intervals]
    jobs = jobs or os.cpu_count() or 1
    if serial_timing or jobs == 1 or len(cells) == 1:
        graph = PoseGraph.load(graph_dir)
        data = repeat_data(cfg) if data is None else data
        traces = {b: odometry_trace(cfg, data, b) for b in cfg.backends}
        return [run_cell(cfg, graph, data, b, n, traces[b]) for b, n in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells)), initializer=_worker_init,
                             initargs=(cfg, str(graph_dir))) as pool:
        return list(pool.map(_worker_cell, cells))


# ---------------------------------------------------------------------------
# persistence

def write_trajectory(path, cell: CellResult):
    with open(path, "w") as fh:
        fh.write("# frame vertex localized estimate_T_rm(12) truth_T_rm(12)\n")
        for r, ((m, T), loc, truth) in enumerate(zip(cell.estimates, cell.localized, cell.truths)):
            fh.write("%d %d %d %s %s\n" % (r, m, int(loc), " ".join(repr(float(x)) for x in T.row12()),
                                           " ".join(repr(float(x)) for x in truth.row12())))


def write_sweep(out_dir, cells: Sequence[CellResult]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / RESULTS_CSV, [c.sweep for c in cells])
    for c in cells:
        write_trajectory(out / f"traj_{c.sweep.backend}_n{c.sweep.n}.txt", c)


def write_report(csv_path, out_dir) -> str:
    """Per-component Pareto files plus a knee summary; returns the summary text."""
    results = read_results_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: Dict[Tuple[str, str], List[SweepResult]] = {}
    for r in results:
        groups.setdefault((r.route, r.backend), []).append(r)
    lines = []
    for (route, backend), rs in sorted(groups.items()):
        for comp in COMPONENTS:
            ordered = sorted(rs, key=lambda r: (-r.runtime_ms, r.n))
            curve = assemble_pareto(rs, comp)
            knee = knee_point(curve)
            with open(out / f"pareto_{route}_{backend}_{comp}.csv", "w") as fh:
                fh.write("n,runtime_ms,rmse,knee\n")
                for i, (r, (rt, e)) in enumerate(zip(ordered, curve)):
                    fh.write(f"{r.n},{rt:.6f},{e:.9f},{int(i == knee)}\n")
            k = ordered[knee]
            lines.append(f"{route} {backend} {comp}: knee n={k.n} runtime_ms={k.runtime_ms:.3f} "
                         f"rmse={getattr(k.rmse, comp):.6f}")
    text = "\n".join(lines) + "\n"
    (out / "knee_summary.txt").write_text(text)
    return text
