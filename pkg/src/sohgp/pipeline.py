"""Per-battery preparation, fitting and horizon inputs, shared by the CLI and experiment scripts."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .features import FEATURE_NAMES, compute_stress_features
from .population import OP_COLUMNS, calibrate_trajectory, days_to_model_time, extrapolate
from .soc import (GassingParams, NormalizationMoments, OcvCurve, OcvRangeError, coulomb_count,
                  init_concentration, normalize, normalize_time)
from .ssgp.benchmark import fit_benchmark
from .ssgp.model import BatteryData, fit_map
from .telemetry import FilterCounts, resample, select_segments, truncate_and_filter

PREPARED_FIELDS = ("segment", "t", "current", "voltage", "temperature", "concentration",
                   "conc_variance", "noise_var")


def load_physics(cfg):
    ocv = OcvCurve.from_csv(cfg.soc.ocv_file) if cfg.soc.ocv_file else OcvCurve.default()
    gas = GassingParams.from_json(cfg.soc.gassing_file) if cfg.soc.gassing_file else GassingParams.default()
    return ocv, gas


@dataclass
class PreparedBattery:
    """Conditioned observations of one battery in physical units (absolute timestamps)."""

    battery_id: str
    start: int
    end: int
    segment: np.ndarray
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray
    concentration: np.ndarray
    conc_variance: np.ndarray
    noise_var: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]


def prepare_battery(series, cfg=None, ocv=None, gas=None):
    """Select, resample, Coulomb-count and condition the charging segments of one battery."""
    cfg = cfg or PipelineConfig()
    if ocv is None or gas is None:
        ocv, gas = load_physics(cfg)
    raw, sel = select_segments(series, cfg.segments)
    cols = {k: [] for k in PREPARED_FIELDS}
    counts = FilterCounts()
    ocv_errors = 0
    dropped = 0
    clamped = 0
    for sid, seg in enumerate(raw):
        grid = resample(seg, sid, series.start, cfg.segments.grid_step)
        try:
            c0, _, k = init_concentration(grid, ocv)
        except OcvRangeError:
            ocv_errors += 1
            continue
        soc = coulomb_count(grid, c0, gas, ocv, k, cfg.soc.rate_uncertainty)
        clamped += soc.clamped
        cond, n = truncate_and_filter(grid, soc, ocv, cfg.segments)
        for name in ("over_voltage", "low_current", "non_positive_overpotential", "kept"):
            setattr(counts, name, getattr(counts, name) + getattr(n, name))
        if cond is None:
            dropped += 1
            continue
        noise = cfg.soc.voltage_noise_var + cond.conc_variance * ocv.slope(cond.concentration) ** 2
        cols["segment"].append(np.full(len(cond), sid))
        cols["t"].append(cond.t)
        cols["current"].append(cond.current)
        cols["voltage"].append(cond.voltage)
        cols["temperature"].append(cond.temperature)
        cols["concentration"].append(cond.concentration)
        cols["conc_variance"].append(cond.conc_variance)
        cols["noise_var"].append(noise)
    arrays = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in cols.items()}
    arrays["segment"] = arrays["segment"].astype(int)
    stats = {"candidates": sel.candidates, "accepted": sel.accepted, "rejected": dict(sel.rejected),
             "ocv_range_errors": ocv_errors, "segments_emptied": dropped, "clamped_segments": clamped,
             "steps_over_voltage": counts.over_voltage, "steps_low_current": counts.low_current,
             "steps_non_positive_overpotential": counts.non_positive_overpotential,
             "steps_kept": counts.kept}
    return PreparedBattery(series.battery_id, series.start, series.end, stats=stats, **arrays)


def compute_moments(prepared):
    """Population moments over all conditioned steps of all batteries."""
    T = np.concatenate([p.temperature for p in prepared])
    I = np.concatenate([p.current for p in prepared])
    c = np.concatenate([p.concentration for p in prepared])
    if T.shape[0] == 0:
        raise ValueError("no conditioned steps in the fleet")
    return NormalizationMoments.from_samples(T, I, c)


def battery_data(prep, moments, ocv):
    raw = {"I": prep.current, "T": prep.temperature, "c": prep.concentration}
    op = np.column_stack([normalize(raw[k], moments, k) for k in OP_COLUMNS])
    return BatteryData(
        battery_id=prep.battery_id,
        t=normalize_time(prep.t - prep.start, moments.time_scale),
        current=prep.current.copy(), op=op,
        y=prep.voltage - ocv.ocv(prep.concentration),
        noise_var=prep.noise_var.copy(), segment=prep.segment.copy(),
        t_end=float(normalize_time(prep.end - prep.start, moments.time_scale)))


def calibration_point_raw(moments):
    """Population calibration point in physical units, ordered like OP_COLUMNS."""
    return np.array([moments.mean[k] for k in OP_COLUMNS])


def fit_battery(prep, moments, cfg=None, ocv=None):
    """MAP fit of the health model and the random-walk benchmark for one battery."""
    cfg = cfg or PipelineConfig()
    if ocv is None:
        ocv, _ = load_physics(cfg)
    data = battery_data(prep, moments, ocv)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        health = fit_map(data, cfg.fit)
    bench = fit_benchmark(data, cfg.fit.benchmark_multiplier, cfg.fit.benchmark_r_init)
    return health, bench


def horizon_inputs(health, bench, series, horizons_days, feature_cfg=None):
    """Classifier inputs at each horizon: calibrated R0 and slope, benchmark R0, stress factors."""
    from .config import FeatureConfig

    out = model_inputs(health, bench, horizons_days)
    for h, row in stress_inputs(series, horizons_days, feature_cfg or FeatureConfig()).items():
        out[h].update(row)
    return out


def trajectory(health, cfg=None):
    cfg = cfg or PipelineConfig()
    return calibrate_trajectory(health, None, cfg.population.max_calibration_distance,
                                cfg.population.horizons_days)


@dataclass
class BatteryResult:
    battery_id: str
    health: object
    bench: object
    inputs: dict
    n_obs: int


def stress_inputs(series, horizons_days, feature_cfg):
    out = {}
    for h in horizons_days:
        f = compute_stress_features(series.t, series.current, series.voltage, series.temperature,
                                    series.end - h * 86400, feature_cfg)
        out[h] = dict(zip(FEATURE_NAMES, f.as_array().tolist()))
    return out


def model_inputs(health, bench, horizons_days):
    out = {}
    for h in horizons_days:
        r0, _, dr0, _ = extrapolate(health, h)
        b0, _ = bench.extrapolate(float(days_to_model_time(h)))
        out[h] = {"r0": r0, "dr0": dr0, "benchmark_r0": b0}
    return out


def run_in_memory(series_iter, cfg=None, progress=None):
    """Prepare, fit and extract horizon inputs for a stream of telemetry series.

    Raw series are consumed once (stress features are taken on the fly), so a
    large fleet never has to sit in memory or on disk as CSV.
    Returns ``(results, moments)`` with results ordered by battery id.
    """
    cfg = cfg or PipelineConfig()
    ocv, gas = load_physics(cfg)
    horizons = cfg.population.horizons_days
    prepared, stress = [], {}
    for series in series_iter:
        prepared.append(prepare_battery(series, cfg, ocv, gas))
        stress[series.battery_id] = stress_inputs(series, horizons, cfg.features)
    prepared.sort(key=lambda p: p.battery_id)
    moments = compute_moments(prepared)
    results = []
    for i, prep in enumerate(prepared):
        health, bench = fit_battery(prep, moments, cfg, ocv)
        inputs = model_inputs(health, bench, horizons)
        for h in horizons:
            inputs[h].update(stress[prep.battery_id][h])
        results.append(BatteryResult(prep.battery_id, health, bench, inputs, len(prep)))
        prepared[i] = None
        if progress:
            progress(i, prep.battery_id)
    return results, moments


def example_table(results, labels):
    """Assemble the classifier's per-horizon inputs; ``labels`` maps id to failed/healthy."""
    from .classifier import LABELS
    from .evaluation import ExampleTable

    ids = tuple(r.battery_id for r in results)
    y = np.array([LABELS[labels[i]] for i in ids])
    horizons = sorted(results[0].inputs)
    inputs = {h: {k: np.array([r.inputs[h][k] for r in results]) for k in results[0].inputs[h]}
              for h in horizons}
    return ExampleTable(ids, y, inputs)
