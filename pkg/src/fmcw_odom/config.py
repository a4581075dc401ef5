"""Flat key-value pipeline configuration (YAML), validated on load."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .integrator import IntegratorConfig
from .lie import rot_rpy
from .measurement import Extrinsics, NoiseConfig
from .pointcloud import GridConfig
from .ransac import RansacConfig

MODES = ("filter", "batch")
PATH_KEYS = ("sequence_dir", "bias_model_path", "groundtruth_path", "sim_spline_path", "sim_bias_model_path")


@dataclass
class PipelineConfig:
    mode: str = "filter"
    sequence_dir: str | None = None
    output_dir: str = "out"
    bias_model_path: str | None = None
    groundtruth_path: str | None = None
    threads: int = 1

    # grid / ingestion
    azimuth_bin_deg: float = 0.2
    num_beam_rows: int = 80
    azimuth_min_deg: float = -60.0
    azimuth_max_deg: float = 60.0
    doppler_sign: float = 1.0
    time_tolerance_s: float = 1e-6

    # outlier rejection
    ransac_iterations: int = 20
    ransac_threshold_mps: float = 0.2
    ransac_seed: int = 0

    # noise model
    r_doppler: float = 0.01
    r_gyro_diag: list = field(default_factory=lambda: [1e-4, 1e-4, 1e-4])
    qc_diag: list = field(default_factory=lambda: [1.0, 0.1, 0.1, 0.01, 0.01, 0.1])
    qz_diag: list = field(default_factory=lambda: [0.01, 0.01, 0.01, 0.01])
    initial_prior_info: float = 1e-6
    use_gyro: bool = True
    gyro_gap_tolerance_s: float = 1e-3

    # integration
    integrator_steps: int = 100
    stationary_threshold_mps: float = 0.03
    stationary_clamp: bool = True

    # extrinsics
    lidar_position: list = field(default_factory=lambda: [1.2, 0.0, 1.8])
    lidar_rotation_rpy_deg: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gyro_position: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gyro_rotation_rpy_deg: list | None = None
    gyro_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    # calibration
    calib_min_samples: int = 50
    calib_min_range_spread_m: float = 5.0

    # simulator
    sim_trajectory: str = "figure_eight"
    sim_twist: list = field(default_factory=lambda: [-10.0, 0.0, 0.0, 0.0, 0.0, 0.05])
    sim_speed: float = 10.0
    sim_period: float = 100.0
    sim_spline_path: str | None = None
    sim_duration: float = 100.0
    sim_frame_rate: float = 10.0
    sim_gyro_rate: float = 100.0
    sim_returns_per_frame: int = 20000
    sim_occupancy: float = 0.3
    sim_doppler_noise: float = 0.0
    sim_gyro_noise: float = 0.0
    sim_outlier_fraction: float = 0.0
    sim_outlier_offset: float = 5.0
    sim_bias_b0: float = 0.0
    sim_bias_b1: float = 0.0
    sim_bias_model_path: str | None = None
    sim_gyro_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    sim_seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        _positive(self, "azimuth_bin_deg", "ransac_threshold_mps", "r_doppler",
                  "initial_prior_info", "sim_duration", "sim_frame_rate", "sim_gyro_rate",
                  "sim_period")
        _non_negative(self, "stationary_threshold_mps", "time_tolerance_s", "gyro_gap_tolerance_s",
                      "sim_doppler_noise", "sim_gyro_noise", "calib_min_range_spread_m", "sim_speed")
        for key in ("num_beam_rows", "ransac_iterations", "integrator_steps", "threads"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be at least 1")
        if self.doppler_sign not in (1.0, -1.0, 1, -1):
            raise ConfigError("doppler_sign must be +1 or -1")
        for key in ("sim_outlier_fraction", "sim_occupancy"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        _vector(self, "r_gyro_diag", 3)
        _vector(self, "qc_diag", 6)
        _vector(self, "lidar_position", 3)
        _vector(self, "lidar_rotation_rpy_deg", 3)
        _vector(self, "gyro_position", 3)
        _vector(self, "gyro_bias", 3)
        _vector(self, "sim_twist", 6)
        _vector(self, "sim_gyro_bias", 3)
        if self.gyro_rotation_rpy_deg is not None:
            _vector(self, "gyro_rotation_rpy_deg", 3)
        if self.sim_trajectory not in ("constant", "figure_eight", "spline"):
            raise ConfigError(f"unknown sim_trajectory {self.sim_trajectory!r}")
        try:
            self.grid()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.noise()

    # -- module configs ---------------------------------------------------
    def grid(self) -> GridConfig:
        return GridConfig(float(self.azimuth_bin_deg), int(self.num_beam_rows),
                          float(self.azimuth_min_deg), float(self.azimuth_max_deg))

    def ransac(self) -> RansacConfig:
        return RansacConfig(int(self.ransac_iterations), float(self.ransac_threshold_mps),
                            int(self.ransac_seed))

    def noise(self) -> NoiseConfig:
        return NoiseConfig(r_dop=float(self.r_doppler), r_gyro=np.diag(self.r_gyro_diag),
                           q_c=np.diag(self.qc_diag), q_z=np.diag(self.qz_diag))

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(int(self.integrator_steps), float(self.stationary_threshold_mps))

    def lidar_extrinsics(self) -> Extrinsics:
        rot = rot_rpy(*np.radians(self.lidar_rotation_rpy_deg))
        return Extrinsics.from_mounting(rot, self.lidar_position)

    def gyro_extrinsics(self) -> Extrinsics:
        if self.gyro_rotation_rpy_deg is None:
            return self.lidar_extrinsics()
        rot = rot_rpy(*np.radians(self.gyro_rotation_rpy_deg))
        return Extrinsics.from_mounting(rot, self.gyro_position)

    def sim_config(self):
        from .bias import load_bias_model
        from .sim import SimConfig

        bias = None
        if self.sim_bias_model_path:
            bias = load_bias_model(self.sim_bias_model_path, self.grid().shape)
        gyro = None if self.gyro_rotation_rpy_deg is None else self.gyro_extrinsics()
        return SimConfig(
            trajectory=self.sim_trajectory, twist=tuple(self.sim_twist), speed=self.sim_speed,
            period=self.sim_period, spline_path=self.sim_spline_path, duration=self.sim_duration,
            frame_rate=self.sim_frame_rate, gyro_rate=self.sim_gyro_rate,
            returns_per_frame=int(self.sim_returns_per_frame), occupancy=self.sim_occupancy,
            doppler_noise=self.sim_doppler_noise, gyro_noise=self.sim_gyro_noise,
            outlier_fraction=self.sim_outlier_fraction, outlier_offset=self.sim_outlier_offset,
            bias=bias, bias_b0=self.sim_bias_b0, bias_b1=self.sim_bias_b1,
            gyro_bias=tuple(self.sim_gyro_bias), seed=int(self.sim_seed),
            lidar=self.lidar_extrinsics(), gyro=gyro, grid=self.grid())

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> PipelineConfig:
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)


def _positive(cfg, *keys):
    for key in keys:
        v = getattr(cfg, key)
        if not (np.isfinite(v) and v > 0):
            raise ConfigError(f"{key} must be positive, got {v}")


def _non_negative(cfg, *keys):
    for key in keys:
        v = getattr(cfg, key)
        if not (np.isfinite(v) and v >= 0):
            raise ConfigError(f"{key} must be non-negative, got {v}")


def _vector(cfg, key, n):
    v = getattr(cfg, key)
    try:
        arr = np.asarray(v, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a list of {n} numbers") from None
    if arr.size != n or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} must be a list of {n} finite numbers")
    setattr(cfg, key, arr.tolist())


def _coerce(name: str, value, default):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: invalid value {value!r}") from None
    return value


def from_mapping(data: dict, base_dir=None) -> PipelineConfig:
    """Build a config from a flat mapping; unknown keys are rejected and
    relative paths are resolved against ``base_dir``."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a flat mapping of keys to values")
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _coerce(key, value, default)
    for key in PATH_KEYS:
        if kwargs.get(key):
            p = Path(kwargs[key]).expanduser()
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            if not p.exists():
                raise ConfigError(f"{key}: path does not exist: {p}")
            kwargs[key] = str(p)
    return PipelineConfig(**kwargs)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Parse, default and validate a YAML config; ``overrides`` win over the file."""
    data = {}
    base = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(data, base)
