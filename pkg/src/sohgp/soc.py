"""Acid-concentration (state of charge) estimation and input normalisation.

Concentration is Coulomb-counted on the uniform segment grid with a lumped,
exponential gassing side reaction, anchored at the rest voltage of the
lowest-current step of each segment. Its accumulated variance is then projected
through the OCV slope into a per-step voltage noise variance.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

FARADAY = 96485.0
TIME_SCALE = 34_560_000.0
BODE_OFFSET = 0.845
CELLS = 6


class OcvRangeError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class DegenerateMomentsError(ValueError):
    pass


def _data_path(name):
    return resources.files("sohgp").joinpath("data", name)


@dataclass(frozen=True)
class OcvCurve:
    """Open-circuit voltage as a monotone function of acid concentration (mol/L)."""

    concentration: np.ndarray
    voltage: np.ndarray
    _interp: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.concentration, dtype=float)
        v = np.asarray(self.voltage, dtype=float)
        if c.ndim != 1 or c.shape != v.shape or c.shape[0] < 2:
            raise ValueError("OCV table needs at least two (concentration, voltage) rows")
        order = np.argsort(c)
        c, v = c[order], v[order]
        if np.any(np.diff(c) <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("OCV must be strictly increasing in concentration")
        object.__setattr__(self, "concentration", c)
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "_interp", PchipInterpolator(c, v, extrapolate=False))

    @property
    def c_range(self):
        return float(self.concentration[0]), float(self.concentration[-1])

    @property
    def v_range(self):
        return float(self.voltage[0]), float(self.voltage[-1])

    def ocv(self, c):
        c = np.clip(np.asarray(c, dtype=float), *self.c_range)
        return self._interp(c)

    def slope(self, c):
        c = np.clip(np.asarray(c, dtype=float), *self.c_range)
        return self._interp.derivative()(c)

    def inverse(self, v):
        """Concentration whose OCV equals ``v`` (scalar)."""
        v = float(v)
        lo, hi = self.v_range
        if not lo <= v <= hi:
            raise OcvRangeError(f"voltage {v:.4f} V outside OCV table range [{lo:.4f}, {hi:.4f}] V")
        if v == lo:
            return self.c_range[0]
        if v == hi:
            return self.c_range[1]
        hit = np.flatnonzero(self.voltage == v)
        if hit.size:
            return float(self.concentration[hit[0]])
        return brentq(lambda c: float(self._interp(c)) - v, *self.c_range, xtol=1e-14, rtol=1e-15)

    @classmethod
    def from_csv(cls, path):
        data = np.genfromtxt(path, delimiter=",", names=True)
        return cls(data["concentration_mol_per_l"], data["ocv_v"])

    @classmethod
    def default(cls):
        with resources.as_file(_data_path("ocv_bode.csv")) as p:
            return cls.from_csv(p)

    def to_csv(self, path):
        rows = "\n".join(f"{c!r},{v!r}" for c, v in zip(self.concentration, self.voltage))
        Path(path).write_text("concentration_mol_per_l,ocv_v\n" + rows + "\n")


def bode_ocv(c, sg_intercept=1.0, sg_slope=0.058, cells=CELLS):
    """Battery OCV from the linear specific-gravity relation (per cell OCV = SG + 0.845)."""
    return cells * (sg_intercept + sg_slope * np.asarray(c, dtype=float) + BODE_OFFSET)


@dataclass(frozen=True)
class GassingParams:
    i_gas0: float = 0.004
    c_t: float = 0.06
    t0: float = 25.0
    c_v: float = 11.0 / 6.0
    v0_ref: float = 13.38
    faraday: float = FARADAY
    v_elec: float = 0.3

    def __post_init__(self):
        for name in ("i_gas0", "c_t", "c_v", "v0_ref", "faraday", "v_elec"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gassing parameter {name} must be positive")

    def current(self, temperature, voltage):
        """Lumped gassing current (A)."""
        return self.i_gas0 * np.exp(self.c_t * (np.asarray(temperature) - self.t0)
                                    + self.c_v * (np.asarray(voltage) - self.v0_ref))

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    @classmethod
    def default(cls):
        with resources.as_file(_data_path("gassing_params.json")) as p:
            return cls.from_json(p)


@dataclass
class SocSeries:
    concentration: np.ndarray
    variance: np.ndarray
    c0: float
    v_source: float
    anchor_index: int = 0
    anchor_current: float = 0.0
    clamped: bool = False


def init_concentration(segment, ocv):
    """Initial concentration from the voltage at the minimum-current step.

    Returns ``(c0, anchor_current, anchor_index)``; a larger anchor current
    means a less reliable rest voltage.
    """
    if len(segment) == 0:
        raise ValueError("empty segment")
    k = int(np.argmin(segment.current))
    return ocv.inverse(segment.voltage[k]), float(segment.current[k]), k


def coulomb_count(segment, c0, params, ocv, anchor_index=0, rate_uncertainty=0.1):
    """Forward-Euler Coulomb counting with gassing from ``anchor_index`` onward.

    Steps before the anchor are not part of the returned series.
    """
    sl = slice(anchor_index, None)
    t = np.asarray(segment.t[sl], dtype=float)
    current = np.asarray(segment.current[sl], dtype=float)
    i_gas = params.current(segment.temperature[sl], segment.voltage[sl])
    dt = np.diff(t)
    dc = (current[:-1] - i_gas[:-1]) * dt / (params.faraday * params.v_elec)
    c = np.empty_like(t)
    c[0] = c0
    np.cumsum(dc, out=c[1:])
    c[1:] += c0
    var = np.zeros_like(t)
    np.cumsum(rate_uncertainty**2 * dc**2, out=var[1:])
    lo, hi = ocv.c_range
    clamped = bool(np.any(c < lo) or np.any(c > hi))
    if clamped:
        c = np.clip(c, lo, hi)
    k = anchor_index
    return SocSeries(c, var, float(c0), float(segment.voltage[k]), k,
                     float(segment.current[k]), clamped)


def noise_variance(soc, ocv, voltage_noise_var=0.0225):
    """Per-step heteroskedastic noise variance (V^2)."""
    return voltage_noise_var + soc.variance * ocv.slope(soc.concentration) ** 2


def fit_electrolyte_volume(charge, rest_voltage, sg_intercept=1.0, sg_slope=0.058,
                           cells=CELLS, faraday=FARADAY):
    """Least-squares electrolyte volume from rest voltage against charge throughput.

    The rest voltage is modelled with the linear Bode relation, with
    concentration ``c_ref + Q / (F V_elec)``. Returns ``(v_elec, c_ref)``.
    """
    q = np.asarray(charge, dtype=float)
    v = np.asarray(rest_voltage, dtype=float)
    if q.shape[0] < 3:
        raise InsufficientDataError("need at least 3 calibration points")
    A = np.column_stack([np.ones_like(q), q])
    (a, b), *_ = np.linalg.lstsq(A, v, rcond=None)
    if b <= 0:
        raise InsufficientDataError("rest voltage does not increase with throughput")
    v_elec = cells * sg_slope / (faraday * b)
    c_ref = (a / cells - BODE_OFFSET - sg_intercept) / sg_slope
    return float(v_elec), float(c_ref)


INPUTS = ("T", "I", "c")


@dataclass
class NormalizationMoments:
    """Population mean/std (and 5th/95th percentiles) of temperature, current and concentration."""

    mean: dict
    std: dict
    p05: dict = field(default_factory=dict)
    p95: dict = field(default_factory=dict)
    time_scale: float = TIME_SCALE

    def __post_init__(self):
        for k, s in self.std.items():
            if not s > 0:
                raise DegenerateMomentsError(f"zero spread for input {k!r}")

    @classmethod
    def from_samples(cls, temperature, current, concentration):
        mean, std, p05, p95 = {}, {}, {}, {}
        for k, x in zip(INPUTS, (temperature, current, concentration)):
            x = np.asarray(x, dtype=float)
            mean[k] = float(np.mean(x))
            std[k] = float(np.std(x))
            p05[k], p95[k] = (float(v) for v in np.percentile(x, [5, 95]))
        return cls(mean, std, p05, p95)

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "p05": self.p05, "p95": self.p95,
                "time_scale": self.time_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"], d.get("p05", {}), d.get("p95", {}),
                   d.get("time_scale", TIME_SCALE))


def normalize(x, moments, name):
    return (np.asarray(x, dtype=float) - moments.mean[name]) / moments.std[name]


def denormalize(z, moments, name):
    return np.asarray(z, dtype=float) * moments.std[name] + moments.mean[name]


def normalize_time(t_seconds, time_scale=TIME_SCALE):
    return np.asarray(t_seconds, dtype=float) / time_scale
