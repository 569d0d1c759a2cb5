"""Sensor ingestion: wind aggregation, spike detection and background removal."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .site import MINUTE, Layout, TimeWindow, WindRecord, as_time

log = logging.getLogger(__name__)


class NoWindData(RuntimeError):
    """Some minutes had no reporting anemometer."""

    def __init__(self, minutes):
        self.minutes = list(minutes)
        super().__init__(f"{len(self.minutes)} minute(s) without wind data")


class IncompleteWindow(RuntimeError):
    pass


class LayoutMismatch(ValueError):
    pass


@dataclass
class ConcentrationSeries:
    sensor_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps.shape != self.values.shape:
            raise ValueError("timestamps and values differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= np.timedelta64(0, "s")):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(self.timestamps.astype("datetime64[m]") != self.timestamps):
            raise ValueError("timestamps must be minute-aligned")

    def on_grid(self) -> "ConcentrationSeries":
        """Fill interior minute gaps by carrying the previous value forward."""
        if len(self.timestamps) < 2:
            return self
        n = int((self.timestamps[-1] - self.timestamps[0]) // MINUTE) + 1
        if n == len(self.timestamps):
            return self
        grid = self.timestamps[0] + MINUTE * np.arange(n)
        idx = np.searchsorted(self.timestamps, grid, side="right") - 1
        return ConcentrationSeries(self.sensor_id, grid, self.values[idx])


@dataclass(frozen=True)
class SpikeInterval:
    start: int
    end: int
    local_background: float

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("spike start after end")


def circular_median(angles) -> float:
    """Angle minimising the summed arc distance to ``angles`` (degrees).

    When the minimisers form one arc its midpoint is returned; several disjoint
    minimising arcs resolve to the smallest midpoint.
    """
    a = np.mod(np.asarray(angles, dtype=float), 360.0)
    if a.size == 0:
        raise ValueError("no angles")
    if a.size == 1:
        return float(a[0])
    cand = np.unique(np.mod(np.concatenate([a, a + 180.0]), 360.0))

    def cost(phi):
        d = np.abs(np.mod(phi[:, None] - a[None, :] + 180.0, 360.0) - 180.0)
        return d.sum(axis=1)

    f = cost(cand)
    fmin = f.min()
    at_min = f <= fmin + 1e-9 * max(1.0, fmin)
    # Objective is piecewise linear between consecutive candidates, so two
    # neighbouring minimisers bound a flat minimising arc.
    k = len(cand)
    idx = np.flatnonzero(at_min)
    if len(idx) == k:
        return float(cand[0])
    # Start the scan just after a non-minimiser so arcs are not split at 0 deg.
    start = int(np.flatnonzero(~at_min)[0])
    order = [(start + j) % k for j in range(k)]
    arcs, cur = [], []
    for j in order:
        if at_min[j]:
            cur.append(j)
        elif cur:
            arcs.append(cur)
            cur = []
    if cur:
        arcs.append(cur)
    mids = []
    for arc in arcs:
        lo, hi = cand[arc[0]], cand[arc[-1]]
        span = np.mod(hi - lo, 360.0)
        mids.append(np.mod(lo + span / 2.0, 360.0))
    mid = float(min(mids))
    return 0.0 if np.isclose(mid, 360.0) else mid


def aggregate_wind(records: Mapping[str, Iterable[WindRecord]] | Iterable[WindRecord],
                   minutes: Optional[Sequence] = None, strict: bool = False) -> list[WindRecord]:
    """Collapse per-anemometer streams to one site record per minute.

    Speed is the median across reporting anemometers, direction the circular
    median. Minutes listed in ``minutes`` with no report are omitted (the gap is
    passed downstream) or raise :class:`NoWindData` when ``strict``.
    """
    if isinstance(records, Mapping):
        streams = records.values()
    else:
        streams = [records]
    by_minute = defaultdict(list)
    for stream in streams:
        for r in stream:
            by_minute[as_time(r.timestamp).astype("datetime64[m]")].append(r)
    missing = []
    if minutes is not None:
        missing = [as_time(t).astype("datetime64[m]") for t in minutes
                   if as_time(t).astype("datetime64[m]") not in by_minute]
        if missing:
            if strict:
                raise NoWindData(missing)
            log.warning("event=wind_gap minutes=%d first=%s", len(missing), missing[0])
    out = []
    for t in sorted(by_minute):
        rs = by_minute[t]
        speed = float(np.median([r.speed for r in rs]))
        direction = circular_median([r.direction for r in rs]) % 360.0
        out.append(WindRecord(t.astype("datetime64[s]"), speed, direction))
    return out


def _flank_mean(values, in_spike, lo, hi, flank):
    before = [i for i in range(lo - 1, max(lo - 1 - flank, -1), -1) if not in_spike[i]]
    after = [i for i in range(hi + 1, min(hi + 1 + flank, len(values))) if not in_spike[i]]
    idx = before + after
    if not idx:
        return None
    return float(np.mean(values[idx]))


def detect_spikes(series: ConcentrationSeries, grad_threshold: float = 0.25,
                  merge_gap: int = 5, flank: int = 5) -> list[SpikeInterval]:
    """Find sharply elevated runs in a minute series.

    A spike opens where the first difference exceeds ``grad_threshold``; it
    extends while the series stays more than ``grad_threshold`` above the level
    just before it opened. Intervals separated by fewer than ``merge_gap`` quiet minutes are
    merged. Each interval's local background is the mean of up to ``flank``
    non-spike minutes on each side.
    """
    y = np.asarray(series.values, dtype=float)
    n = len(y)
    if n < 2:
        return []
    diff = np.diff(y)
    raw = []
    t = 1
    while t < n:
        if diff[t - 1] > grad_threshold:
            base = y[t - 1]
            end = t
            while end + 1 < n and y[end + 1] > base + grad_threshold:
                end += 1
            raw.append([t, end])
            t = end + 1
        else:
            t += 1
    merged = []
    for s, e in raw:
        if merged and s - merged[-1][1] - 1 < merge_gap:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    in_spike = np.zeros(n, dtype=bool)
    for s, e in merged:
        in_spike[s:e + 1] = True
    out = []
    for s, e in merged:
        bg = _flank_mean(y, in_spike, s, e, flank)
        if bg is None:
            bg = float(y[s:e + 1].min())
        out.append(SpikeInterval(int(s), int(e), max(bg, 0.0)))
    return out


def remove_background(series: ConcentrationSeries, spikes: Sequence[SpikeInterval],
                      flank: int = 5) -> ConcentrationSeries:
    """Enhancement above local background inside spikes; zero elsewhere."""
    y = np.asarray(series.values, dtype=float)
    in_spike = np.zeros(len(y), dtype=bool)
    for sp in spikes:
        in_spike[sp.start:sp.end + 1] = True
    out = np.zeros_like(y)
    for sp in spikes:
        bg = _flank_mean(y, in_spike, sp.start, sp.end, flank)
        if bg is None:
            bg = float(y[sp.start:sp.end + 1].min())
        out[sp.start:sp.end + 1] = y[sp.start:sp.end + 1] - bg
    np.maximum(out, 0.0, out=out)
    return ConcentrationSeries(series.sensor_id, series.timestamps.copy(), out)


def background_removed(series: ConcentrationSeries, grad_threshold: float = 0.25,
                       merge_gap: int = 5, flank: int = 5) -> ConcentrationSeries:
    s = series.on_grid()
    return remove_background(s, detect_spikes(s, grad_threshold, merge_gap, flank), flank)


def assemble_observation(series: Sequence[ConcentrationSeries], window: TimeWindow,
                         layout: Optional[Layout] = None,
                         max_missing_frac: float = 0.2) -> tuple[np.ndarray, Layout]:
    """Concatenate per-sensor windowed series into ``y`` (sensor-major).

    Missing minutes count against ``max_missing_frac`` and are filled with 0.
    When ``layout`` is given (usually the design matrix's) the sensor order
    must match it exactly.
    """
    ids = tuple(s.sensor_id for s in series)
    built = Layout(ids, window.minutes)
    if layout is not None and built != layout:
        raise LayoutMismatch(f"sensor order {ids} does not match layout {layout.sensor_ids}")
    l = window.n_minutes
    y = np.zeros(l * len(series))
    for k, s in enumerate(series):
        ts = np.asarray(s.timestamps, dtype="datetime64[s]")
        sel = (ts >= window.start) & (ts < window.end)
        idx = ((ts[sel] - window.start) // MINUTE).astype(int)
        vals = np.asarray(s.values)[sel]
        ok = np.isfinite(vals)
        present = np.zeros(l, dtype=bool)
        present[idx[ok]] = True
        frac_missing = 1.0 - present.mean() if l else 0.0
        if frac_missing > max_missing_frac:
            raise IncompleteWindow(
                f"sensor {s.sensor_id!r} missing {frac_missing:.0%} of window starting {window.start}")
        y[k * l + idx[ok]] = vals[ok]
    return y, built
