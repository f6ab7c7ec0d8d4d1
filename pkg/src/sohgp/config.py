"""Dataclass configuration for every pipeline stage, loadable from JSON."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class SegmentConfig:
    min_duration: float = 6000.0
    start_voltage_min: float = 11.5
    start_voltage_max: float = 12.9
    start_current_max: float = 0.1
    min_peak_voltage: float = 14.0
    max_gap: float = 610.0
    sustain_samples: int = 2
    grid_step: float = 60.0
    truncate_voltage: float = 14.0
    min_current: float = 0.2


@dataclass
class SocConfig:
    ocv_file: Optional[str] = None
    gassing_file: Optional[str] = None
    rate_uncertainty: float = 0.1
    voltage_noise_var: float = 0.0225


@dataclass
class FitConfig:
    n_inducing: int = 20
    kmeans_seed: int = 0
    kmeans_max_iter: int = 100
    lower_bound: float = 1e-3
    upper_bound: float = 1e3
    initial: tuple = (0.2, 0.2, 1.0, 1.0, 1.0)
    maxiter: int = 100
    jitter: float = 1e-8
    fd_step: float = 1e-4
    benchmark_multiplier: float = 100.0
    benchmark_r_init: float = 0.0
    stride: int = 1


@dataclass
class PopulationConfig:
    bol_segments: int = 10
    horizons_days: tuple = (0, 14, 28, 42, 56)
    slice_points: int = 41
    max_calibration_distance: float = 3.0


@dataclass
class FeatureConfig:
    nominal_capacity_ah: float = 20.0
    cycle_depth_fraction: float = 0.05
    discharge_current: float = -0.05
    float_voltage: float = 13.5
    float_current: float = 0.5
    max_step: float = 3600.0


@dataclass
class ClassifierConfig:
    scenarios: tuple = ("A", "B", "C", "D")
    n_folds: int = 5
    failed_fractions: tuple = (0.4, 0.6, 0.8)
    repeats: int = 10
    restarts: int = 3
    seed: int = 0
    # "matched": one model per horizon; "end": horizon-0 model tested at all horizons;
    # "all": one model on every horizon pooled
    train_horizons: str = "matched"


def _fleet_default():
    from .synthfleet import FleetConfig

    return FleetConfig()


@dataclass
class PipelineConfig:
    input_dir: str = "fleet"
    work_dir: str = "work"
    output_dir: str = "report"
    jobs: int = 1
    seed: int = 7
    segments: SegmentConfig = field(default_factory=SegmentConfig)
    soc: SocConfig = field(default_factory=SocConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    fleet: object = field(default_factory=_fleet_default)

    def validate(self):
        h = list(self.population.horizons_days)
        if not h or h[0] != 0 or any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("horizon grid must be sorted ascending and start at 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        for name in ("ocv_file", "gassing_file"):
            p = getattr(self.soc, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"soc.{name} does not exist: {p}")
        return self


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, f"{where}.{key}")
        elif isinstance(current, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data):
    return _build(PipelineConfig, data, "config").validate()


def load_config(path=None):
    if path is None:
        return PipelineConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def config_hash(obj):
    blob = json.dumps(to_jsonable(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
