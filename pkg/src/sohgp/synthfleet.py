"""Synthetic solar-home battery fleets with known resistance surfaces and failure labels.

Each battery is simulated on a one-minute grid: a PV source and an evening
load drive a charge controller (absorption, then float once full), acid
concentration follows the same lumped gassing model the estimator uses, and the
terminal voltage is ``OCV(c) + I * R0(T, I, c, t)``. Samples are then drawn at
irregular telemetry intervals, with outages and sensor noise.

The true resistance surface is

    R0 = base * exp(-k_T (T - 25)) * (1 + k_c (c_max - c)) / (1 + |I| / i_ref) + aging(t),

with aging(t) linear plus an exponential knee for batteries whose stress
score is positive.
"""

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .config import ConfigError
from .soc import BODE_OFFSET, CELLS, FARADAY, GassingParams
from .telemetry import Telemetry, select_segments, write_telemetry

SECONDS_PER_DAY = 86400
MINUTES_PER_DAY = 1440


@dataclass
class FleetConfig:
    n_batteries: int = 50
    seed: int = 7
    length_days: tuple = (400.0, 760.0)
    start_epoch: int = 1_577_836_800
    start_offset_days: int = 365
    # telemetry sampling (seconds)
    day_interval: int = 300
    day_jitter: int = 60
    night_interval: int = 900
    night_jitter: int = 120
    # diurnal usage
    sunrise_hour: float = 6.0
    sunset_hour: float = 18.0
    season_shift_hours: float = 1.0
    load_start_hour: float = 18.0
    load_end_hour: float = 24.0
    sunny_probability: float = 0.4
    pv_wake_current: float = 0.15
    sunny_peak_a: tuple = (3.0, 4.0)
    cloudy_peak_a: tuple = (0.3, 1.2)
    daily_discharge_ah: tuple = (3.5, 8.0)
    # climate
    temperature_mean: float = 25.0
    temperature_sd: float = 3.0
    diurnal_amplitude: float = 4.0
    seasonal_amplitude: float = 3.0
    # electrochemistry
    v_elec: float = 0.3
    c_initial: float = 4.9
    c_full: float = 5.35
    c_disconnect: float = 3.2
    absorb_voltage: float = 14.4
    float_voltage: float = 13.7
    sg_intercept: float = 1.0
    sg_slope: float = 0.058
    # true R0 surface
    base_ohm: float = 0.9
    base_cv: float = 0.03
    k_temperature: float = 0.02
    k_concentration: float = 0.1
    c_max: float = 5.5
    i_ref: float = 4.0
    # aging (ohm per 400 days) and failure process
    aging_slope: float = 0.08
    aging_slope_spread: float = 0.3
    knee_enabled: bool = True
    knee_lead_days: tuple = (20.0, 50.0)
    failure_threshold_ohm: float = 0.95
    stress_temperature_weight: float = 1.0
    stress_discharge_weight: float = 0.5
    stress_noise: float = 0.6
    label_flip_rate: float = 0.0
    # sensors and gaps
    voltage_noise: float = 0.01
    current_noise: float = 0.01
    temperature_noise: float = 0.1
    outage_rate_per_day: float = 1.0 / 90.0
    outage_days: tuple = (0.5, 3.0)
    # nominal point for the ground-truth file
    ref_temperature: float = 25.0
    ref_current: float = 2.0
    ref_concentration: float = 4.6

    def validate(self):
        lo, hi = self.length_days
        if self.n_batteries < 1:
            raise ConfigError("fleet.n_batteries must be >= 1")
        if not 400.0 <= lo <= hi <= 760.0:
            raise ConfigError("fleet.length_days must lie within [400, 760]")
        if not 0.0 <= self.sunny_probability <= 1.0:
            raise ConfigError("fleet.sunny_probability must be a probability")
        if not 0.0 <= self.label_flip_rate <= 1.0:
            raise ConfigError("fleet.label_flip_rate must be a probability")
        for name in ("base_cv", "aging_slope", "aging_slope_spread", "voltage_noise", "current_noise",
                     "temperature_noise", "outage_rate_per_day", "temperature_sd", "stress_noise",
                     "diurnal_amplitude", "seasonal_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError(f"fleet.{name} must be non-negative")
        for name in ("base_ohm", "i_ref", "v_elec", "failure_threshold_ohm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"fleet.{name} must be positive")
        if self.knee_lead_days[0] <= 0 or self.knee_lead_days[0] > self.knee_lead_days[1]:
            raise ConfigError("fleet.knee_lead_days must be a positive, ordered range")
        if self.day_interval + self.day_jitter >= 610:
            raise ConfigError("daytime sampling interval must stay below the 610 s gap limit")
        return self


@dataclass
class BatteryParams:
    battery_id: str
    index: int
    start_epoch: int
    length_days: float
    temperature_offset: float
    daily_discharge_ah: float
    base_ohm: float
    slope_per_day: float
    stress: float
    knee_day: float = -1.0
    knee_amplitude: float = 0.0
    knee_tau_days: float = 1.0
    failure_day: float = -1.0
    failed: bool = False
    label_flipped: bool = False

    @property
    def label(self):
        failed = self.failed != self.label_flipped
        return "failed" if failed else "healthy"


def aging(t_days, p):
    """Additive resistance increase since beginning of life (ohm)."""
    t = np.asarray(t_days, dtype=float)
    out = p.slope_per_day * t
    if p.knee_day >= 0:
        dt = np.maximum(t - p.knee_day, 0.0)
        out = out + p.knee_amplitude * np.expm1(dt / p.knee_tau_days)
    return out


def static_r0(temperature, current, concentration, base, cfg):
    return (base * np.exp(-cfg.k_temperature * (np.asarray(temperature) - 25.0))
            * (1.0 + cfg.k_concentration * (cfg.c_max - np.asarray(concentration)))
            / (1.0 + np.abs(current) / cfg.i_ref))


def true_r0(p, cfg, temperature, current, concentration, t_days):
    return static_r0(temperature, current, concentration, p.base_ohm, cfg) + aging(t_days, p)


def ocv(c, cfg):
    return CELLS * (cfg.sg_intercept + cfg.sg_slope * np.asarray(c) + BODE_OFFSET)


@njit(cache=True)
def _simulate(pv, load, temp, t_days, c0, c_full, c_lo, c_hi, v_abs, v_float, sg0, sg1,
              base, kT, kc, cmax, iref, slope, knee_day, knee_amp, knee_tau,
              ig0, gct, gt0, gcv, gv0, denom):
    n = pv.shape[0]
    cur = np.empty(n)
    volt = np.empty(n)
    conc = np.empty(n)
    c = c0
    for k in range(n):
        T = temp[k]
        age = slope * t_days[k]
        if knee_day >= 0.0 and t_days[k] > knee_day:
            age += knee_amp * (math.exp((t_days[k] - knee_day) / knee_tau) - 1.0)
        stat = base * math.exp(-kT * (T - 25.0)) * (1.0 + kc * (cmax - c))
        v0 = 6.0 * (sg0 + sg1 * c + 0.845)
        lk = load[k] if c > c_lo else 0.0
        req = pv[k] - lk
        if req > 0.0:
            if c >= c_full:
                V = v_float
                I = ig0 * math.exp(gct * (T - gt0) + gcv * (V - gv0))
                if I > req:
                    I = req
            else:
                V = v0 + req * (stat / (1.0 + req / iref) + age)
                I = req
                if V > v_abs:
                    lo = 0.0
                    hi = req
                    for _ in range(60):
                        mid = 0.5 * (lo + hi)
                        if v0 + mid * (stat / (1.0 + mid / iref) + age) > v_abs:
                            hi = mid
                        else:
                            lo = mid
                    I = lo
                    V = v0 + I * (stat / (1.0 + I / iref) + age)
        else:
            I = req
            V = v0 + I * (stat / (1.0 - I / iref) + age)
        cur[k] = I
        volt[k] = V
        conc[k] = c
        gas = ig0 * math.exp(gct * (T - gt0) + gcv * (V - gv0))
        c += (I - gas) * 60.0 / denom
        if c < c_lo - 1.0:
            c = c_lo - 1.0
        if c > c_hi:
            c = c_hi
    return cur, volt, conc


@njit(cache=True)
def _sample_minutes(n_minutes, in_day, day_int, day_jit, night_int, night_jit, u):
    out = np.empty(n_minutes, dtype=np.int64)
    m = 0
    k = 0
    j = 0
    while k < n_minutes:
        out[m] = k
        m += 1
        if in_day[k]:
            lo, hi = (day_int - day_jit) // 60, (day_int + day_jit) // 60
        else:
            lo, hi = (night_int - night_jit) // 60, (night_int + night_jit) // 60
        step = lo + int(u[j % u.shape[0]] * (hi - lo + 1))
        if step > hi:
            step = hi
        k += max(step, 1)
        j += 1
    return out[:m]


def battery_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def draw_parameters(cfg, index):
    """Per-battery parameters from the battery's own seeded stream."""
    rng = battery_rng(cfg.seed, index)
    lo, hi = cfg.length_days
    t_off = rng.normal(0.0, 1.0)
    d_lo, d_hi = cfg.daily_discharge_ah
    daily = rng.uniform(d_lo, d_hi)
    d_z = (daily - 0.5 * (d_lo + d_hi)) / max((d_hi - d_lo) / math.sqrt(12.0), 1e-12)
    stress = (cfg.stress_temperature_weight * t_off + cfg.stress_discharge_weight * d_z
              + cfg.stress_noise * rng.normal())
    base = cfg.base_ohm * (1.0 + cfg.base_cv * rng.normal())
    slope = cfg.aging_slope / 400.0 * max(1.0 + cfg.aging_slope_spread * rng.uniform(-1, 1), 0.0)
    start = cfg.start_epoch + SECONDS_PER_DAY * int(rng.integers(0, cfg.start_offset_days + 1))
    p = BatteryParams(f"B{index:04d}", index, start, float(rng.uniform(lo, hi)),
                      float(cfg.temperature_sd * t_off), float(daily), float(base), float(slope),
                      float(stress))
    lead = rng.uniform(*cfg.knee_lead_days)
    t_fail = rng.uniform(lo, hi - 5.0)
    tail = rng.uniform(0.5, 3.0)
    flip = rng.uniform() < cfg.label_flip_rate
    if cfg.knee_enabled and stress > 0.0:
        ref = reference_static(p, cfg)
        remaining = cfg.failure_threshold_ohm - ref - slope * t_fail
        if remaining > 0:
            tau = lead / 2.0
            p.knee_day = float(t_fail - lead)
            p.knee_tau_days = float(tau)
            p.knee_amplitude = float(remaining / math.expm1(lead / tau))
            p.failure_day = float(t_fail)
            p.length_days = float(min(t_fail + tail, hi))
    p.label_flipped = bool(flip)
    p.failed = label_from_truth(p, cfg)
    return p


def reference_static(p, cfg):
    return float(static_r0(cfg.ref_temperature, cfg.ref_current, cfg.ref_concentration,
                           p.base_ohm, cfg))


def _daily_schedule(cfg, p, rng, n_days):
    doy0 = ((p.start_epoch // SECONDS_PER_DAY) % 365)
    doy = (doy0 + np.arange(n_days)) % 365
    season = np.sin(2 * np.pi * (doy - 80) / 365.0)
    sunrise = cfg.sunrise_hour - cfg.season_shift_hours * season
    sunset = cfg.sunset_hour + cfg.season_shift_hours * season
    sunny = rng.uniform(size=n_days) < cfg.sunny_probability
    guaranteed = np.full(n_days // 7 + 1, -1)
    for w in range(n_days // 7 + 1):
        days = np.arange(7 * w, min(7 * w + 7, n_days))
        if days.size == 0:
            continue
        if not sunny[days].any():
            sunny[days[rng.integers(0, days.size)]] = True
        guaranteed[w] = days[np.flatnonzero(sunny[days])[0]]
    peak = np.where(sunny, rng.uniform(*cfg.sunny_peak_a, size=n_days),
                    rng.uniform(*cfg.cloudy_peak_a, size=n_days))
    load_scale = rng.uniform(0.8, 1.2, size=n_days)
    day_temp = rng.normal(0.0, 1.0, size=n_days)
    return season, sunrise, sunset, peak, load_scale, day_temp, guaranteed


def _outages(cfg, rng, n_days, guaranteed):
    n = rng.poisson(cfg.outage_rate_per_day * n_days)
    out = []
    protected = [(d, d + 1) for d in guaranteed if d >= 0]
    for _ in range(n):
        start = rng.uniform(0, n_days)
        end = start + rng.uniform(*cfg.outage_days)
        # outages never cover the guaranteed sunny day of a week
        if any(start < b and end > a for a, b in protected):
            continue
        out.append((start, end))
    return out


def simulate_battery(cfg, index, params=None):
    """Simulate one battery. Returns ``(telemetry, params)``."""
    p = params or draw_parameters(cfg, index)
    rng = battery_rng(cfg.seed, 100_000 + index)
    n_days = int(math.ceil(p.length_days))
    n_min = int(round(p.length_days * MINUTES_PER_DAY))
    season, sunrise, sunset, peak, load_scale, day_temp, guaranteed = _daily_schedule(cfg, p, rng, n_days)
    minute = np.arange(n_min)
    day = minute // MINUTES_PER_DAY
    hour = (minute % MINUTES_PER_DAY) / 60.0
    sr, ss = sunrise[day], sunset[day]
    x = (hour - sr) / (ss - sr)
    pv = np.where((x > 0) & (x < 1), peak[day] * np.sin(np.pi * np.clip(x, 0, 1)) ** 2, 0.0)
    # clear-sky arc (slow morning ramp) with slow cloud modulation
    flicker = 1.0 + 0.05 * np.repeat(rng.normal(size=n_min // 10 + 1), 10)[:n_min]
    pv = np.maximum(pv * flicker, 0.0)
    # the controller only connects the array once it can deliver the wake-up current
    pv[pv < cfg.pv_wake_current] = 0.0
    load_i = p.daily_discharge_ah / (cfg.load_end_hour - cfg.load_start_hour)
    load = np.where((hour >= cfg.load_start_hour) & (hour < cfg.load_end_hour), load_i * load_scale[day], 0.0)
    temp = (cfg.temperature_mean + p.temperature_offset + cfg.seasonal_amplitude * season[day]
            + day_temp[day] + cfg.diurnal_amplitude * np.sin(2 * np.pi * (hour - 9.0) / 24.0))
    t_days = minute / MINUTES_PER_DAY
    gas = GassingParams(v_elec=cfg.v_elec)
    cur, volt, _ = _simulate(
        pv, load, temp, t_days, cfg.c_initial, cfg.c_full, cfg.c_disconnect, 6.0,
        cfg.absorb_voltage, cfg.float_voltage, cfg.sg_intercept, cfg.sg_slope,
        p.base_ohm, cfg.k_temperature, cfg.k_concentration, cfg.c_max, cfg.i_ref,
        p.slope_per_day, p.knee_day, p.knee_amplitude, p.knee_tau_days,
        gas.i_gas0, gas.c_t, gas.t0, gas.c_v, gas.v0_ref, FARADAY * cfg.v_elec)
    in_day = (hour >= sr - 1.0) & (hour <= ss + 1.0)
    idx = _sample_minutes(n_min, in_day, cfg.day_interval, cfg.day_jitter, cfg.night_interval,
                          cfg.night_jitter, rng.uniform(size=4096))
    keep = np.ones(idx.shape[0], dtype=bool)
    for a, b in _outages(cfg, rng, n_days, guaranteed):
        keep &= ~((t_days[idx] >= a) & (t_days[idx] < b))
    idx = idx[keep]
    m = idx.shape[0]
    series = Telemetry(
        p.battery_id, p.start_epoch + 60 * idx.astype(np.int64),
        cur[idx] + cfg.current_noise * rng.normal(size=m),
        volt[idx] + cfg.voltage_noise * rng.normal(size=m),
        temp[idx] + cfg.temperature_noise * rng.normal(size=m))
    return series, p


def weekly_coverage(series, segment_cfg=None):
    """Complete weeks of the series that contain no qualifying segment start."""
    from .config import SegmentConfig

    segs, _ = select_segments(series, segment_cfg or SegmentConfig())
    n_weeks = int((series.end - series.start) // (7 * SECONDS_PER_DAY))
    starts = np.array([s.t[0] for s in segs])
    weeks = set(((starts - series.start) // (7 * SECONDS_PER_DAY)).astype(int).tolist())
    return [w for w in range(n_weeks) if w not in weeks]


def truth_table(p, cfg, step_days=1.0):
    t = np.arange(0.0, p.length_days + 1e-9, step_days)
    r = reference_static(p, cfg) + aging(t, p)
    return t, r


def label_from_truth(p, cfg):
    t, r = truth_table(p, cfg, 0.25)
    return bool(np.any(r >= cfg.failure_threshold_ohm))


def _write_one(args):
    cfg, index, out, check_coverage, segment_cfg = args
    series, p = simulate_battery(cfg, index)
    if check_coverage:
        missing = weekly_coverage(series, segment_cfg)
        if missing:
            raise ConfigError(f"{p.battery_id}: no qualifying charging segment in week(s) "
                              f"{missing[:5]}; raise sunny_probability or reduce outages")
    write_telemetry(Path(out) / "telemetry" / f"{p.battery_id}.csv", [series])
    return p


def generate_fleet(cfg, out_dir, check_coverage=True, segment_cfg=None, jobs=1):
    """Write telemetry, ground truth, labels and the truth surface under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "telemetry").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, i, str(out), check_coverage, segment_cfg) for i in range(cfg.n_batteries)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            params = list(pool.map(_write_one, tasks))
    else:
        params = [_write_one(t) for t in tasks]
    write_truth(out, params, cfg)
    return params


def write_truth(out, params, cfg):
    out = Path(out)
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["battery_id", "t_days", "true_r0_ohm"])
        for p in params:
            for t, r in zip(*truth_table(p, cfg)):
                w.writerow([p.battery_id, f"{t:.1f}", f"{r:.6f}"])
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["battery_id", "label"])
        for p in params:
            w.writerow([p.battery_id, p.label])
    surface = {"fleet": _jsonable(asdict(cfg)), "batteries": [asdict(p) for p in params]}
    with open(out / "truth_surface.json", "w", encoding="utf-8") as fh:
        json.dump(surface, fh, sort_keys=True, indent=1)


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_truth(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    cfg = FleetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["fleet"].items()})
    return cfg, {b["battery_id"]: BatteryParams(**b) for b in d["batteries"]}


def read_labels(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if r["label"] not in ("failed", "healthy"):
            raise ValueError(f"bad label {r['label']!r} for {r['battery_id']}")
    return {r["battery_id"]: r["label"] for r in rows}


@dataclass
class TruthComparison:
    battery_id: str
    rmse: float
    coverage: float
    dynamic_range: float
    n: int

    @property
    def relative_rmse(self):
        return self.rmse / self.dynamic_range if self.dynamic_range > 0 else math.inf


def compare_arrays(battery_id, mean, var, truth):
    mean = np.asarray(mean, dtype=float)
    truth = np.asarray(truth, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    err = mean - truth
    rmse = float(np.sqrt(np.mean(err**2)))
    coverage = float(np.mean(np.abs(err) <= 2.0 * sd))
    return TruthComparison(battery_id, rmse, coverage, float(truth.max() - truth.min()), truth.shape[0])


def ground_truth_compare(trajectory, params, cfg, point_raw):
    """RMSE and +-2 sd coverage of a calibrated trajectory against the true surface.

    ``point_raw`` is the calibration point in physical units as
    ``(current, temperature, concentration)``.
    """
    if trajectory.battery_id != params.battery_id:
        raise ValueError(f"battery id mismatch: {trajectory.battery_id} vs {params.battery_id}")
    i_cal, t_cal, c_cal = point_raw
    t_days = trajectory.t_days
    truth = true_r0(params, cfg, t_cal, i_cal, c_cal, t_days)
    return compare_arrays(params.battery_id, trajectory.r0_mean, trajectory.r0_var, truth)
