"""YAML run configuration: simulated world, route, sensors and estimator overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .cloud import DopplerBiasModel, GyroSample, LidarFrame
from .doppler import DopplerConfig
from .geometry import Pose, exp_map
from .icp import IcpConfig
from .simulator import (
    Box, GroundTruth, SensorSpec, WorldSpec, build_trajectory, clutter_boxes, corridor_boxes, ground_plane,
    render_scan, simulate_gyro,
)

BACKENDS = ("doppler", "icp")
DEFAULT_INTERVALS = (1, 2, 5, 10, 15, 25, 50)
# per-frame seed streams so teach and repeat passes never share noise
_TEACH_STREAM, _REPEAT_STREAM = 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario

@dataclass
class WorldParams:
    ground_height: float = 0.0
    box_spacing: float = 6.0
    box_offset: float = 8.0
    box_seed: int = 1
    margin: float = 6.0            # seconds of route-extension lined with boxes
    clutter_spacing: float = 0.0   # metres between roadside posts; 0 disables
    clutter_offset: Tuple[float, float] = (4.0, 7.0)
    dynamic: List[dict] = field(default_factory=list)


@dataclass
class Scenario:
    name: str = "synthetic"
    segments: List[Tuple[float, np.ndarray]] = field(default_factory=lambda: [(10.0, np.r_[8.0, 0, 0, 0, 0, 0])])
    repeat_offset: np.ndarray = field(default_factory=lambda: np.zeros(6))   # twist-coordinates
    world: WorldParams = field(default_factory=WorldParams)
    teach_sensor: SensorSpec = field(default_factory=SensorSpec)
    repeat_sensor: SensorSpec = field(default_factory=SensorSpec)
    seed: int = 0

    @property
    def frame_period(self):
        return self.teach_sensor.period

    def teach_truth(self) -> GroundTruth:
        return build_trajectory(self.segments)

    def repeat_truth(self) -> GroundTruth:
        return build_trajectory(self.segments, initial_pose=exp_map(self.repeat_offset))

    def world_spec(self) -> WorldSpec:
        w = self.world
        last = np.asarray(self.segments[-1][1], dtype=float)
        extended = list(self.segments)
        if w.margin > 0:
            extended.append((w.margin, np.r_[last[:3], 0.0, 0.0, 0.0]))
        route = build_trajectory(extended)
        boxes = corridor_boxes(route, spacing=w.box_spacing, offset=w.box_offset, seed=w.box_seed)
        if w.clutter_spacing > 0:
            boxes += clutter_boxes(route, spacing=w.clutter_spacing, offset_range=tuple(w.clutter_offset),
                                   seed=w.box_seed)
        dynamic = [Box(d["lo"], d["hi"], d.get("velocity", np.zeros(3))) for d in w.dynamic]
        return WorldSpec(planes=[ground_plane(w.ground_height)], boxes=boxes, dynamic=dynamic,
                         seed=self.seed)

    def n_frames(self) -> int:
        gt = self.teach_truth()
        return int(np.floor((gt.t_end - gt.t_start) / self.frame_period + 1e-9))

    def frames(self, kind: str, world: Optional[WorldSpec] = None) -> Iterator[Tuple[LidarFrame, list]]:
        """Yield ``(frame, gyro samples)`` for the teach or repeat pass."""
        if kind == "teach":
            gt, sensor, stream = self.teach_truth(), self.teach_sensor, _TEACH_STREAM
        elif kind == "repeat":
            gt, sensor, stream = self.repeat_truth(), self.repeat_sensor, _REPEAT_STREAM
        else:
            raise ValueError(f"unknown pass {kind!r}")
        world = self.world_spec() if world is None else world
        period = sensor.period
        for r in range(self.n_frames()):
            t0 = gt.t_start + r * period
            seed = self.seed * 16 + stream     # the simulator adds the frame time to the stream
            yield (render_scan(world, gt, t0, t0 + period, sensor, seed=seed),
                   simulate_gyro(gt, sensor, t0, t0 + period, seed=seed))


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    backend: str = "both"
    intervals: Tuple[int, ...] = DEFAULT_INTERVALS
    doppler: DopplerConfig = field(default_factory=DopplerConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    teach_translation: float = 10.0
    teach_rotation_deg: float = 30.0
    hop_radius: int = 5
    threads: Optional[int] = None      # ICP point-parallel workers; None keeps the config value
    out: Optional[str] = None

    def __post_init__(self):
        if self.backend not in BACKENDS + ("both",):
            raise ConfigError(f"backend: expected doppler, icp or both, got {self.backend!r}")
        if not self.intervals or any(int(n) < 1 for n in self.intervals):
            raise ConfigError("intervals: need a non-empty list of integers >= 1")
        self.intervals = tuple(int(n) for n in self.intervals)

    @property
    def backends(self) -> Tuple[str, ...]:
        return BACKENDS if self.backend == "both" else (self.backend,)

    @property
    def thresholds(self):
        return self.teach_translation, np.deg2rad(self.teach_rotation_deg)

    def icp_config(self, workers: Optional[int] = None) -> IcpConfig:
        w = self.threads if workers is None else workers
        return self.icp if w is None else dataclasses.replace(self.icp, workers=int(w))


# ---------------------------------------------------------------------------
# parsing

def _check_keys(section: str, data, allowed):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    for k in data:
        if k not in allowed:
            raise ConfigError(f"unknown key '{section}.{k}'" if section else f"unknown key '{k}'")
    return data


def _build(section: str, cls, data: dict, convert=None, **fixed):
    convert = convert or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    data = _check_keys(section, data, set(fields) - set(fixed))
    kwargs = dict(fixed)
    for k, v in data.items():
        default = fields[k].default
        try:
            if k in convert:
                v = convert[k](v)
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ValueError(f"expected true/false, got {v!r}")
            elif isinstance(default, (int, float)) and default is not None:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ValueError(f"expected a number, got {v!r}")
                if isinstance(default, int) and v != int(v):
                    raise ValueError(f"expected an integer, got {v!r}")
                v = type(default)(v)
            kwargs[k] = v
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{k}: {exc}") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _pose_from(value) -> Pose:
    """``[x, y, z]`` translation, ``[x, y, z, roll, pitch, yaw]`` (degrees) or 12 row-major floats."""
    v = np.asarray(value, dtype=float).ravel()
    if v.size == 3:
        return Pose(np.eye(3), v)
    if v.size == 6:
        from scipy.spatial.transform import Rotation
        return Pose(Rotation.from_euler("xyz", v[3:], degrees=True).as_matrix(), v[:3])
    if v.size == 12:
        return Pose.from_row12(v)
    raise ValueError(f"pose needs 3, 6 or 12 numbers, got {v.size}")


_SENSOR_CONVERT = {"T_vs": _pose_from, "gyro_bias": lambda v: np.asarray(v, dtype=float)}


def _segments(raw):
    if not isinstance(raw, list) or not raw:
        raise ConfigError("route.segments: expected a non-empty list")
    out = []
    for i, seg in enumerate(raw):
        seg = _check_keys(f"route.segments[{i}]", seg, {"duration", "twist"})
        try:
            twist = np.asarray(seg["twist"], dtype=float).reshape(6)
            out.append((float(seg["duration"]), twist))
        except KeyError as exc:
            raise ConfigError(f"route.segments[{i}]: missing key {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"route.segments[{i}]: {exc}") from exc
        if not out[-1][0] > 0:
            raise ConfigError(f"route.segments[{i}].duration: must be positive")
    return out


def _array(v):
    return np.asarray(v, dtype=float)


_TOP_KEYS = {"route", "world", "sensor", "teach_sensor", "repeat_sensor", "doppler", "icp",
             "teach", "repeat", "backend", "intervals", "seed", "threads", "out"}


def parse_config(data: dict, seed: Optional[int] = None) -> RunConfig:
    data = _check_keys("", data or {}, _TOP_KEYS)
    route = _check_keys("route", data.get("route"), {"name", "segments", "repeat_offset"})
    base_sensor = _check_keys("sensor", data.get("sensor"), {f.name for f in dataclasses.fields(SensorSpec)})

    _build("sensor", SensorSpec, base_sensor, _SENSOR_CONVERT)

    def sensor(section):
        over = _check_keys(section, data.get(section), {f.name for f in dataclasses.fields(SensorSpec)})
        return _build(section, SensorSpec, {**base_sensor, **over}, _SENSOR_CONVERT)

    teach_sensor, repeat_sensor = sensor("teach_sensor"), sensor("repeat_sensor")
    world = _build("world", WorldParams, data.get("world") or {})
    try:
        offset = np.asarray(route.get("repeat_offset", np.zeros(6)), dtype=float).reshape(6)
    except ValueError as exc:
        raise ConfigError(f"route.repeat_offset: {exc}") from exc
    run_seed = int(data.get("seed", 0) if seed is None else seed)
    scenario = Scenario(
        name=str(route.get("name", "synthetic")),
        segments=_segments(route["segments"]) if "segments" in route else Scenario().segments,
        repeat_offset=offset, world=world,
        teach_sensor=teach_sensor, repeat_sensor=repeat_sensor, seed=run_seed)

    dop = dict(data.get("doppler") or {})
    _check_keys("doppler", dop, {f.name for f in dataclasses.fields(DopplerConfig)} - {"T_sv"})
    bias = dop.pop("bias_model", None)
    dconv = {k: _array for k in ("Qc", "Qz", "R_gyro", "gyro_bias")}
    if bias is not None:
        dop["bias_model"] = _build("doppler.bias_model", DopplerBiasModel, bias)
    doppler = _build("doppler", DopplerConfig, dop, dconv, T_sv=repeat_sensor.T_sv)

    icp_raw = data.get("icp") or {}
    iconv = {k: _array for k in ("Qc", "R_gyro", "gyro_bias", "loc_prior_cov")}
    icp = _build("icp", IcpConfig, icp_raw, iconv, T_vs=teach_sensor.T_vs)
    if np.any(teach_sensor.T_vs.matrix() != repeat_sensor.T_vs.matrix()):
        raise ConfigError("repeat_sensor.T_vs: must match the teach sensor extrinsic")

    teach = _check_keys("teach", data.get("teach"), {"translation", "rotation_deg"})
    rep = _check_keys("repeat", data.get("repeat"), {"hop_radius"})
    try:
        cfg = RunConfig(
            scenario=scenario,
            backend=str(data.get("backend", "both")),
            intervals=tuple(data.get("intervals", DEFAULT_INTERVALS)),
            doppler=doppler, icp=icp,
            teach_translation=float(teach.get("translation", 10.0)),
            teach_rotation_deg=float(teach.get("rotation_deg", 30.0)),
            hop_radius=int(rep.get("hop_radius", 5)),
            threads=data.get("threads"),
            out=data.get("out"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data or {}, seed)
