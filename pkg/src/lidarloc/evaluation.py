"""Per-component pose errors, RMSE aggregation, Pareto curves and knee selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose

FRAME_PERIOD_MS = 100.0
COMPONENTS = ("lateral", "longitudinal", "vertical", "roll", "pitch", "heading")
CSV_COLUMNS = ["route", "backend", "n", "runtime_ms", "rt_ratio", "lat_m", "lon_m", "vert_m",
               "roll_deg", "pitch_deg", "head_deg", "knee_flag"]
_CSV_TO_COMPONENT = dict(zip(CSV_COLUMNS[5:11], COMPONENTS))


class CsvFormatError(ValueError):
    pass


class ComponentError(NamedTuple):
    """Metres for translation, degrees for rotation."""

    lateral: float
    longitudinal: float
    vertical: float
    roll: float
    pitch: float
    heading: float

    @property
    def translation(self) -> float:
        return float(np.sqrt(self.lateral**2 + self.longitudinal**2 + self.vertical**2))


def pose_error(estimate: Pose, truth: Pose) -> ComponentError:
    """Signed error of ``estimate`` in the truth vehicle frame (x forward, y left, z up)."""
    E = truth.inverse() @ estimate
    roll, pitch, yaw = Rotation.from_matrix(E.R).as_euler("XYZ", degrees=True)
    lon, lat, vert = E.t
    return ComponentError(float(lat), float(lon), float(vert), float(roll), float(pitch), float(yaw))


def rmse(samples: Sequence[ComponentError]) -> ComponentError:
    if len(samples) == 0:
        raise ValueError("rmse of an empty sample set")
    a = np.asarray(samples, dtype=float)
    return ComponentError(*np.sqrt(np.mean(a * a, axis=0)).tolist())


def _minmax(x):
    x = np.asarray(x, dtype=float)
    span = x.max() - x.min()
    if span <= 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


def knee_point(points) -> int:
    """Index of the point with the smallest runtime x error rectangle.

    Both axes are min-max normalised.  The points that attain the smallest
    runtime or the smallest error then sit on an axis with zero area; they
    bound the curve rather than trade off along it, so they only win when no
    interior point exists.  Ties go to the smaller runtime.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("knee_point needs at least one point")
    x, y = _minmax(pts[:, 0]), _minmax(pts[:, 1])
    area = x * y
    candidates = np.flatnonzero((x > 0) & (y > 0))
    if candidates.size == 0:
        candidates = np.arange(pts.shape[0])
    # lexicographic: area, then raw runtime, then index
    order = np.lexsort((candidates, pts[candidates, 0], area[candidates]))
    return int(candidates[order[0]])


@dataclass(frozen=True)
class SweepResult:
    route: str
    backend: str
    n: int
    rmse: ComponentError
    runtime_ms: float
    frames: int = 0

    def __post_init__(self):
        if not self.runtime_ms > 0:
            raise ValueError("runtime must be positive")
        if self.n < 1:
            raise ValueError("interval must be >= 1")

    @property
    def rt_ratio(self) -> float:
        return self.runtime_ms / FRAME_PERIOD_MS


def assemble_pareto(results: Sequence[SweepResult], component: str):
    """``(runtime_ms, rmse)`` pairs ordered by runtime descending (n ascending on ties)."""
    if not results:
        raise ValueError("no results to assemble")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    ordered = sorted(results, key=lambda r: (-r.runtime_ms, r.n))
    return [(r.runtime_ms, getattr(r.rmse, component)) for r in ordered]


def knee_flags(results: Sequence[SweepResult], component: str = "longitudinal") -> List[bool]:
    """Per-result knee marker, computed separately for each (route, backend) group."""
    flags = [False] * len(results)
    groups = {}
    for i, r in enumerate(results):
        groups.setdefault((r.route, r.backend), []).append(i)
    for idx in groups.values():
        pts = [(results[i].runtime_ms, getattr(results[i].rmse, component)) for i in idx]
        flags[idx[knee_point(pts)]] = True
    return flags


# ---------------------------------------------------------------------------
# CSV

def write_results_csv(path, results: Sequence[SweepResult], knee_component: str = "longitudinal"):
    flags = knee_flags(results, knee_component) if results else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r, flag in zip(results, flags):
            e = r.rmse
            w.writerow([r.route, r.backend, r.n, f"{r.runtime_ms:.6f}", f"{r.rt_ratio:.6f}",
                        f"{e.lateral:.9f}", f"{e.longitudinal:.9f}", f"{e.vertical:.9f}",
                        f"{e.roll:.9f}", f"{e.pitch:.9f}", f"{e.heading:.9f}", int(flag)])


def read_results_csv(path) -> List[SweepResult]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    if rows[0] != CSV_COLUMNS:
        raise CsvFormatError(f"{path}: line 1: expected header {','.join(CSV_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise CsvFormatError(f"{path}: line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        rec = dict(zip(CSV_COLUMNS, row))
        try:
            err = ComponentError(**{_CSV_TO_COMPONENT[k]: float(rec[k]) for k in CSV_COLUMNS[5:11]})
            out.append(SweepResult(rec["route"], rec["backend"], int(rec["n"]), err,
                                   float(rec["runtime_ms"])))
        except (ValueError, TypeError) as exc:
            raise CsvFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not out:
        raise CsvFormatError(f"{path}: no result rows")
    return out
