"""Benchmark resistance model: a scalar random walk with no operating-point dependence."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import kalman
from .model import time_steps


@dataclass
class BenchmarkModel:
    battery_id: str
    q: float
    multiplier: float
    r_init: float
    loglik: float
    t_end: float
    knot_t: np.ndarray
    knot_segment: np.ndarray
    smooth_mean: np.ndarray
    smooth_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray

    @property
    def initial_variance(self):
        return self.multiplier * self.q

    def extrapolate(self, horizon):
        """Predict R0 at ``t_end`` from data up to ``t_end - horizon`` (normalised time)."""
        cutoff = self.t_end - horizon
        k = int(np.searchsorted(self.knot_t, cutoff, side="right")) - 1
        if k < 0:
            raise ValueError(f"horizon {horizon} reaches before the first observation")
        return float(self.filt_mean[k]), float(self.filt_var[k] + self.q * (self.t_end - self.knot_t[k]))

    def to_dict(self):
        return {
            "battery_id": self.battery_id, "q": self.q, "multiplier": self.multiplier,
            "r_init": self.r_init, "loglik": self.loglik, "t_end": self.t_end,
            "knot_t": self.knot_t.tolist(), "knot_segment": self.knot_segment.tolist(),
            "smoothed_mean": self.smooth_mean.tolist(), "smoothed_variance": self.smooth_var.tolist(),
            "filtered_mean": self.filt_mean.tolist(), "filtered_variance": self.filt_var.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        a = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(d["battery_id"], d["q"], d["multiplier"], d["r_init"], d["loglik"], d["t_end"],
                   a("knot_t"), np.asarray(d["knot_segment"], dtype=int), a("smoothed_mean"),
                   a("smoothed_variance"), a("filtered_mean"), a("filtered_variance"))


def random_walk_loglik(q, data, multiplier=100.0, r_init=0.0):
    dt = time_steps(data.t)
    ll, _, _ = kalman.random_walk_filter(dt, data.current, data.y, data.noise_var, q,
                                         r_init, multiplier * q)
    return ll


def fit_benchmark(data, multiplier=100.0, r_init=0.0, log_q_bounds=(-25.0, 10.0)):
    """Maximum-likelihood process-noise density, then filter and smooth at that value."""
    if len(data) == 0:
        raise ValueError(f"battery {data.battery_id}: no qualifying observations")
    res = minimize_scalar(lambda lq: -random_walk_loglik(math.exp(lq), data, multiplier, r_init),
                          bounds=log_q_bounds, method="bounded", options={"xatol": 1e-6})
    q = math.exp(res.x)
    dt = time_steps(data.t)
    ll, mf, pf = kalman.random_walk_filter(dt, data.current, data.y, data.noise_var, q,
                                           r_init, multiplier * q)
    ms, ps = kalman.random_walk_smooth(dt, mf, pf, q)
    seg = data.segment
    last = np.flatnonzero(np.append(seg[1:] != seg[:-1], True))
    return BenchmarkModel(data.battery_id, q, multiplier, r_init, float(ll), float(data.t_end),
                          data.t[last].copy(), seg[last].copy(), ms[last].copy(), ps[last].copy(),
                          mf[last].copy(), pf[last].copy())
