"""Usage stress factors extracted from raw telemetry."""

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .config import FeatureConfig

FEATURE_NAMES = ("calendar_age", "charge_throughput", "cycle_count", "float_time",
                 "mean_temperature", "mean_voltage")


@dataclass(frozen=True)
class StressFeatures:
    calendar_age: float
    charge_throughput: float
    cycle_count: float
    float_time: float
    mean_temperature: float
    mean_voltage: float

    def as_array(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES])

    def to_dict(self):
        return asdict(self)


def _step_durations(t, as_of, max_step):
    # left Riemann sum: sample k holds until the next sample (or as_of), capped at max_step
    nxt = np.append(t[1:], as_of).astype(float)
    return np.clip(nxt - t, 0.0, max_step)


def compute_stress_features(t, current, voltage, temperature, as_of, cfg=FeatureConfig()):
    """Stress factors over ``[t[0], as_of]`` from time-sorted raw samples (seconds, A, V, degC)."""
    t = np.asarray(t)
    if t.shape[0] == 0:
        raise ValueError("empty telemetry series")
    start = t[0]
    if as_of < start:
        raise ValueError(f"as_of {as_of} precedes the series start {start}")
    n = int(np.searchsorted(t, as_of, side="right"))
    t = t[:n]
    i = np.asarray(current, dtype=float)[:n]
    v = np.asarray(voltage, dtype=float)[:n]
    temp = np.asarray(temperature, dtype=float)[:n]
    dt = _step_durations(t, as_of, cfg.max_step)
    total = dt.sum()
    throughput = float(np.sum(np.abs(i) * dt) / 3600.0 / 2.0)
    floating = (v >= cfg.float_voltage) & (np.abs(i) < cfg.float_current)
    float_time = float(np.sum(dt[floating]) / 3600.0)
    cycles = count_cycles(i, dt, cfg.discharge_current,
                          cfg.cycle_depth_fraction * cfg.nominal_capacity_ah)
    if total > 0:
        mean_t = float(np.sum(temp * dt) / total)
        mean_v = float(np.sum(v * dt) / total)
    else:
        mean_t = float(temp[-1])
        mean_v = float(v[-1])
    return StressFeatures((as_of - start) / 86400.0, throughput, float(cycles), float_time,
                          mean_t, mean_v)


def count_cycles(current, dt, threshold=-0.05, min_depth_ah=1.0):
    """Number of contiguous discharge runs removing at least ``min_depth_ah``."""
    dis = current < threshold
    if not dis.any():
        return 0
    edges = np.diff(np.concatenate([[0], dis.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    charge = np.concatenate([[0.0], np.cumsum(-current * dt * dis) / 3600.0])
    depth = charge[stops] - charge[starts]
    return int(np.sum(depth >= min_depth_ah))


def feature_correlations(matrix):
    """Pearson correlation of feature columns; zero-variance columns get 0 off-diagonal.

    Returns ``(corr, degenerate)`` where ``degenerate`` flags constant columns.
    """
    X = np.asarray(matrix, dtype=float)
    if X.shape[0] < 3:
        raise ValueError("need at least three batteries for a correlation matrix")
    sd = X.std(axis=0)
    degenerate = ~(sd > 0)
    Z = np.zeros_like(X)
    ok = ~degenerate
    Z[:, ok] = (X[:, ok] - X[:, ok].mean(0)) / sd[ok]
    corr = Z.T @ Z / X.shape[0]
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    return corr, degenerate


def write_correlations_csv(path, corr, names=FEATURE_NAMES):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", *names])
        for name, row in zip(names, corr):
            w.writerow([name, *(f"{x:.6f}" for x in row)])
