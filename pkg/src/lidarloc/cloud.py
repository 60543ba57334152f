"""Point-cloud containers and preprocessing for the Doppler and ICP paths."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

FOV_AZIMUTH = np.deg2rad(120.0)
FOV_ELEVATION = np.deg2rad(30.0)

MAGIC = b"DLP1"
_HEADER = struct.Struct("<4sQdd")


class FrameFormatError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


class LidarPoint(NamedTuple):
    position: np.ndarray
    timestamp: float
    doppler: float
    normal: Optional[np.ndarray] = None
    planarity_score: Optional[float] = None


class GyroSample(NamedTuple):
    stamp: float
    rate: np.ndarray  # rad/s, sensor frame


@dataclass(frozen=True, eq=False)
class LidarFrame:
    """A scan stored column-wise.

    ``positions`` are sensor-frame coordinates (metres), ``timestamps`` are
    absolute seconds inside ``[t_start, t_end]`` and ``doppler`` holds the
    per-point radial velocity (m/s).  ``normals``/``scores`` are filled in by
    :func:`extract_planar_features`.
    """

    positions: np.ndarray
    timestamps: np.ndarray
    doppler: np.ndarray
    t_start: float
    t_end: float
    normals: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = pos.shape[0]
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=float).reshape(n))
        object.__setattr__(self, "doppler", np.asarray(self.doppler, dtype=float).reshape(n))
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(n, 3))
        if self.scores is not None:
            object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float).reshape(n))
        if not self.t_end > self.t_start:
            raise ValueError(f"frame end {self.t_end} must be after start {self.t_start}")

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls, t_start, t_end):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), t_start, t_end)

    @classmethod
    def from_points(cls, points: Sequence[LidarPoint], t_start, t_end):
        if not points:
            return cls.empty(t_start, t_end)
        normals = None
        scores = None
        if all(p.normal is not None for p in points):
            normals = np.array([p.normal for p in points])
        if all(p.planarity_score is not None for p in points):
            scores = np.array([p.planarity_score for p in points])
        return cls(np.array([p.position for p in points]),
                   np.array([p.timestamp for p in points]),
                   np.array([p.doppler for p in points]),
                   t_start, t_end, normals, scores)

    def point(self, i) -> LidarPoint:
        return LidarPoint(self.positions[i], float(self.timestamps[i]), float(self.doppler[i]),
                          None if self.normals is None else self.normals[i],
                          None if self.scores is None else float(self.scores[i]))

    def select(self, index) -> "LidarFrame":
        index = np.asarray(index)
        return replace(
            self,
            positions=self.positions[index],
            timestamps=self.timestamps[index],
            doppler=self.doppler[index],
            normals=None if self.normals is None else self.normals[index],
            scores=None if self.scores is None else self.scores[index],
        )

    def check_timestamps(self, tol=1e-12):
        ts = self.timestamps
        return bool(np.all(ts >= self.t_start - tol) and np.all(ts <= self.t_end + tol))


# ---------------------------------------------------------------------------
# binary frame files

def write_frame(path, frame: LidarFrame) -> None:
    data = np.column_stack([frame.positions, frame.timestamps, frame.doppler]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(frame), frame.t_start, frame.t_end))
        fh.write(data.tobytes())


def read_frame(path) -> LidarFrame:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, count, t_start, t_end = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != count * 5 * 8:
        raise FrameFormatError(f"{path}: expected {count} points, got {len(body) / 40:.1f}")
    data = np.frombuffer(body, dtype="<f8").reshape(count, 5)
    return LidarFrame(data[:, :3].copy(), data[:, 3].copy(), data[:, 4].copy(), t_start, t_end)


# ---------------------------------------------------------------------------
# downsampling

def voxel_downsample(frame: LidarFrame, voxel_size: float = 0.5) -> LidarFrame:
    """Keep, per occupied voxel, the point closest to the voxel centre.

    Ties go to the lowest input index; survivors keep their input order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(frame) == 0:
        return frame
    keys = np.floor(frame.positions / voxel_size).astype(np.int64)
    centres = (keys + 0.5) * voxel_size
    dist = np.sum((frame.positions - centres) ** 2, axis=1)
    order = np.lexsort((np.arange(len(frame)), dist, keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    return frame.select(np.sort(order[first]))


def azimuth_elevation(positions):
    positions = np.asarray(positions, dtype=float)
    az = np.arctan2(positions[:, 1], positions[:, 0])
    el = np.arctan2(positions[:, 2], np.hypot(positions[:, 0], positions[:, 1]))
    return az, el


def azel_cells(positions, az_bins, el_bins):
    """Cell index per point, or -1 outside the sensor field of view."""
    az, el = azimuth_elevation(positions)
    half_az, half_el = FOV_AZIMUTH / 2, FOV_ELEVATION / 2
    inside = (np.abs(az) <= half_az) & (np.abs(el) <= half_el)
    ai = np.minimum(np.floor((az + half_az) / FOV_AZIMUTH * az_bins), az_bins - 1).astype(np.int64)
    ei = np.minimum(np.floor((el + half_el) / FOV_ELEVATION * el_bins), el_bins - 1).astype(np.int64)
    return np.where(inside, ei * az_bins + ai, -1)


def azel_downsample(frame: LidarFrame, az_bins: int = 240, el_bins: int = 60) -> LidarFrame:
    """First-seen point per azimuth/elevation cell over the 120x30 degree FOV."""
    if az_bins < 1 or el_bins < 1:
        raise ValueError("bin counts must be >= 1")
    if len(frame) == 0:
        return frame
    cells = azel_cells(frame.positions, az_bins, el_bins)
    valid = np.flatnonzero(cells >= 0)
    _, first = np.unique(cells[valid], return_index=True)
    return frame.select(np.sort(valid[first]))


# ---------------------------------------------------------------------------
# planar features

def planarity(eigenvalues):
    """Score ``1 - l_min / l_mid`` for ascending eigenvalue triples."""
    lam = np.asarray(eigenvalues, dtype=float)
    mid = lam[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = 1.0 - np.maximum(lam[..., 0], 0.0) / mid
    return np.clip(np.nan_to_num(score, nan=0.0), 0.0, 1.0)


def extract_planar_features(frame: LidarFrame, k_neighbors: int = 20,
                            score_threshold: float = 0.95) -> LidarFrame:
    """Attach PCA normals and planarity scores; keep points scoring above the threshold.

    Normals are the smallest-eigenvalue eigenvector of the k-NN covariance,
    flipped to face the sensor origin.  Neighbourhoods whose covariance has
    rank < 2 are dropped.
    """
    n = len(frame)
    if n < k_neighbors:
        raise ValueError(f"need at least {k_neighbors} points, frame has {n}")
    pos = frame.positions
    _, nbr = cKDTree(pos).query(pos, k=k_neighbors)
    nbr = nbr.reshape(n, k_neighbors)
    local = pos[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k_neighbors
    lam, vec = np.linalg.eigh(cov)
    scale = np.maximum(lam[:, 2], np.finfo(float).tiny)
    rank_ok = lam[:, 1] > 1e-12 * scale
    normals = vec[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, pos) > 0
    normals[flip] *= -1.0
    scores = planarity(lam)
    out = replace(frame, normals=normals, scores=scores)
    return out.select(np.flatnonzero(rank_ok & (scores > score_threshold)))


# ---------------------------------------------------------------------------
# range-dependent Doppler bias

@dataclass(frozen=True)
class DopplerBiasModel:
    slope: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.slope) and np.isfinite(self.intercept)):
            raise ValueError("bias model coefficients must be finite")

    def __call__(self, ranges):
        return self.slope * np.asarray(ranges, dtype=float) + self.intercept


def fit_doppler_bias(ranges, residuals) -> DopplerBiasModel:
    """Ordinary least-squares line ``residual = slope * range + intercept``."""
    r = np.asarray(ranges, dtype=float).ravel()
    e = np.asarray(residuals, dtype=float).ravel()
    if r.size != e.size:
        raise ValueError("ranges and residuals differ in length")
    if r.size < 2:
        raise DegenerateFitError("need at least two samples")
    dr = r - r.mean()
    sxx = float(dr @ dr)
    if sxx <= 1e-12 * max(1.0, float(r @ r)):
        raise DegenerateFitError("all ranges identical; slope is unidentifiable")
    slope = float(dr @ (e - e.mean())) / sxx
    return DopplerBiasModel(slope, float(e.mean() - slope * r.mean()))


def apply_doppler_bias(frame: LidarFrame, model: DopplerBiasModel) -> LidarFrame:
    ranges = np.linalg.norm(frame.positions, axis=1)
    return replace(frame, doppler=frame.doppler - model(ranges))
