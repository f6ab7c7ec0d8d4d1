"""Raw telemetry ingest, charging-segment selection, resampling and conditioning."""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from .config import SegmentConfig

COLUMNS = ("battery_id", "timestamp_s", "current_a", "voltage_v", "temperature_c")
VOLTAGE_BOUNDS = (0.0, 20.0)
TEMPERATURE_BOUNDS = (-20.0, 80.0)


class TelemetryParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class DegenerateSegmentError(ValueError):
    pass


class TelemetryRecord(NamedTuple):
    timestamp: int
    current: float
    voltage: float
    temperature: float


@dataclass
class Telemetry:
    """Time-sorted telemetry series of one battery."""

    battery_id: str
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    @property
    def start(self):
        return int(self.t[0]) if len(self) else 0

    @property
    def end(self):
        return int(self.t[-1]) if len(self) else 0

    def records(self):
        for row in zip(self.t, self.current, self.voltage, self.temperature):
            yield TelemetryRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]))

    def window(self, t_max):
        n = int(np.searchsorted(self.t, t_max, side="right"))
        return Telemetry(self.battery_id, self.t[:n], self.current[:n], self.voltage[:n],
                         self.temperature[:n])


@dataclass
class IngestStats:
    rows: int = 0
    dropped_out_of_range: int = 0
    duplicates: int = 0


@dataclass
class RawSegment:
    battery_id: str
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])


@dataclass
class ChargeSegment:
    """A charging segment on a uniform time grid."""

    battery_id: str
    segment_id: int
    start_time: int
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray
    age_seconds: float

    def __len__(self):
        return self.t.shape[0]

    def subset(self, mask):
        return ChargeSegment(self.battery_id, self.segment_id, int(self.t[mask][0]) if mask.any()
                             else self.start_time, self.t[mask], self.current[mask],
                             self.voltage[mask], self.temperature[mask], self.age_seconds)


@dataclass
class SelectionStats:
    candidates: int = 0
    accepted: int = 0
    rejected: dict = field(default_factory=lambda: {
        "duration": 0, "start_voltage": 0, "start_current": 0, "peak_voltage": 0, "gap": 0})


def _locate_bad_line(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return None, "empty file"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COLUMNS):
                return lineno, f"expected {len(COLUMNS)} fields, got {len(row)}"
            try:
                int(row[1])
                for v in row[2:]:
                    float(v)
            except ValueError:
                return lineno, f"non-numeric field in {row!r}"
    return None, "unparseable file"


def ingest(path):
    """Read a telemetry CSV into per-battery series.

    Returns ``(series, stats)`` where ``series`` maps battery id to
    :class:`Telemetry`. Rows outside the sanity bounds are dropped and counted;
    duplicate timestamps keep the last row.
    """
    stats = IngestStats()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            return {}, stats
    if tuple(h.strip() for h in header.split(",")) != COLUMNS:
        raise TelemetryParseError(f"bad header {header!r}, expected {','.join(COLUMNS)}", line=1)
    try:
        df = pd.read_csv(path, dtype={"battery_id": str, "timestamp_s": np.int64,
                                      "current_a": float, "voltage_v": float,
                                      "temperature_c": float})
    except (ValueError, pd.errors.ParserError) as exc:
        line, msg = _locate_bad_line(path)
        raise TelemetryParseError(msg if line else str(exc), line=line) from exc
    if df.isna().any().any():
        bad = int(np.flatnonzero(df.isna().any(axis=1).to_numpy())[0])
        raise TelemetryParseError("missing value", line=bad + 2)
    stats.rows = len(df)
    v = df["voltage_v"].to_numpy()
    temp = df["temperature_c"].to_numpy()
    ok = ((v > VOLTAGE_BOUNDS[0]) & (v < VOLTAGE_BOUNDS[1])
          & (temp > TEMPERATURE_BOUNDS[0]) & (temp < TEMPERATURE_BOUNDS[1]))
    stats.dropped_out_of_range = int((~ok).sum())
    df = df[ok]
    out = {}
    for bid, g in df.groupby("battery_id", sort=True):
        # stable sort keeps file order among equal timestamps, so "last" is the later row
        g = g.sort_values("timestamp_s", kind="mergesort")
        before = len(g)
        g = g.drop_duplicates("timestamp_s", keep="last")
        stats.duplicates += before - len(g)
        out[str(bid)] = Telemetry(str(bid), g["timestamp_s"].to_numpy(np.int64),
                                  g["current_a"].to_numpy(float), g["voltage_v"].to_numpy(float),
                                  g["temperature_c"].to_numpy(float))
    return out, stats


def write_telemetry(path, series):
    frames = []
    for s in series:
        frames.append(pd.DataFrame({
            "battery_id": s.battery_id, "timestamp_s": s.t.astype(np.int64),
            "current_a": s.current, "voltage_v": s.voltage, "temperature_c": s.temperature}))
    df = pd.concat(frames) if frames else pd.DataFrame(columns=list(COLUMNS))
    df.to_csv(path, index=False, float_format="%.6g")


def qualifies(seg, cfg=SegmentConfig()):
    """Evaluate the qualifying-segment predicates on raw data; returns a dict of bools."""
    t = seg.t
    gap = float(np.max(np.diff(t))) if t.shape[0] > 1 else 0.0
    return {
        "duration": seg.duration > cfg.min_duration,
        "start_voltage": cfg.start_voltage_min <= seg.voltage[0] <= cfg.start_voltage_max,
        "start_current": seg.current[0] < cfg.start_current_max,
        "peak_voltage": float(np.max(seg.voltage)) > cfg.min_peak_voltage,
        "gap": gap < cfg.max_gap,
    }


def candidate_bounds(t, current, voltage, cfg=SegmentConfig()):
    """Index ranges ``(start, stop)`` (stop exclusive) of candidate charging segments.

    A candidate starts at the last sample below the start-current threshold
    before the current stays at or above it for ``sustain_samples`` samples. It
    ends once the current has stayed below the threshold for longer than
    ``max_gap`` seconds (cut at the last charging sample), or once the voltage has
    stayed above the truncation voltage for longer than ``max_gap`` seconds.
    """
    t = np.asarray(t).tolist()
    current = np.asarray(current).tolist()
    voltage = np.asarray(voltage).tolist()
    n = len(t)
    thr = cfg.start_current_max
    ns = cfg.sustain_samples
    bounds = []
    i = 0
    while i + ns < n:
        if not (current[i] < thr and all(c >= thr for c in current[i + 1:i + 1 + ns])):
            i += 1
            continue
        start = i
        low_since = None
        high_since = None
        last_charge = i + 1
        stop = n
        j = i + 1
        while j < n:
            if current[j] >= thr:
                low_since = None
                last_charge = j
            elif low_since is None:
                low_since = t[j]
            if voltage[j] > cfg.truncate_voltage:
                if high_since is None:
                    high_since = t[j]
            else:
                high_since = None
            if low_since is not None and t[j] - low_since > cfg.max_gap:
                stop = last_charge + 1
                break
            if high_since is not None and t[j] - high_since > cfg.max_gap:
                stop = j + 1
                break
            j += 1
        bounds.append((start, stop))
        i = max(stop - 1, start + 1)
        # a fresh start needs the current to be below threshold again
        while i < n and current[i] >= thr:
            i += 1
    return bounds


def select_segments(series, cfg=SegmentConfig()):
    """Candidate segments of ``series`` that satisfy every qualifying predicate."""
    stats = SelectionStats()
    out = []
    if len(series) < 2:
        return out, stats
    for start, stop in candidate_bounds(series.t, series.current, series.voltage, cfg):
        seg = RawSegment(series.battery_id, series.t[start:stop], series.current[start:stop],
                         series.voltage[start:stop], series.temperature[start:stop])
        stats.candidates += 1
        if seg.t.shape[0] < 2:
            stats.rejected["duration"] += 1
            continue
        checks = qualifies(seg, cfg)
        failed = [k for k, ok in checks.items() if not ok]
        for k in failed:
            stats.rejected[k] += 1
        if not failed:
            stats.accepted += 1
            out.append(seg)
    return out, stats


def resample(seg, segment_id=0, bol=None, step=60.0):
    """Monotone piecewise-cubic Hermite resampling of a raw segment onto a ``step`` grid."""
    if seg.t.shape[0] < 2:
        raise DegenerateSegmentError("need at least two raw samples to resample")
    t0 = int(seg.t[0])
    n = int(np.floor((seg.t[-1] - t0) / step)) + 1
    grid = t0 + step * np.arange(n)
    x = seg.t.astype(float)

    def interp(values):
        return PchipInterpolator(x, values, extrapolate=False)(grid)

    bol = t0 if bol is None else bol
    return ChargeSegment(seg.battery_id, segment_id, t0, grid, interp(seg.current),
                         interp(seg.voltage), interp(seg.temperature), float(t0 - bol))


@dataclass
class FilterCounts:
    over_voltage: int = 0
    low_current: int = 0
    non_positive_overpotential: int = 0
    kept: int = 0


def condition_mask(voltage, current, ocv_voltage, cfg=SegmentConfig()):
    """Keep-mask plus per-rule removal counts (a step is charged to the first rule it hits)."""
    over = voltage > cfg.truncate_voltage
    low = ~over & (current < cfg.min_current)
    overpot = ~over & ~low & (ocv_voltage >= voltage)
    keep = ~(over | low | overpot)
    counts = FilterCounts(int(over.sum()), int(low.sum()), int(overpot.sum()), int(keep.sum()))
    return keep, counts


@dataclass
class ConditionedSegment:
    """Resampled segment restricted to steps usable for resistance estimation."""

    battery_id: str
    segment_id: int
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray
    concentration: np.ndarray
    conc_variance: np.ndarray
    counts: FilterCounts

    def __len__(self):
        return self.t.shape[0]


def truncate_and_filter(segment, soc, ocv, cfg=SegmentConfig()):
    """Drop over-voltage, low-current and non-positive-overpotential steps.

    ``soc`` covers ``segment`` from ``soc.anchor_index`` onward; steps before the
    anchor are dropped too. Returns ``None`` when nothing survives (the counts
    are still reported through the second return value).
    """
    k = soc.anchor_index
    v = segment.voltage[k:]
    i = segment.current[k:]
    keep, counts = condition_mask(v, i, ocv.ocv(soc.concentration), cfg)
    out = ConditionedSegment(segment.battery_id, segment.segment_id, segment.t[k:][keep],
                             i[keep], v[keep], segment.temperature[k:][keep],
                             soc.concentration[keep], soc.variance[keep], counts)
    return (out if counts.kept else None), counts
