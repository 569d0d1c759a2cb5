"""Synthetic sites, wind and emission schedules for studies and smoke runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .forward import DesignMatrix, SimConfig, build_design_matrix
from .site import MINUTE, SensorSpec, SourceSpec, TimeWindow, WindRecord, as_time


@dataclass(frozen=True)
class SiteGeometry:
    sources: tuple
    sensors: tuple


def synthetic_site(n_sources: int = 5, n_sensors: int = 10, radius: float = 40.0,
                   source_extent: float = 20.0, sensor_height: float = 2.0,
                   seed: int = 0) -> SiteGeometry:
    """Sources scattered in a square of half-width ``source_extent`` and sensors on a ring."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-source_extent, source_extent, size=(n_sources, 2))
    H = rng.uniform(1.0, 3.0, size=n_sources)
    sources = tuple(SourceSpec(f"src{i + 1}", float(x), float(y), float(h)) for i, ((x, y), h) in enumerate(zip(xy, H)))
    ang = np.linspace(0.0, 2.0 * np.pi, n_sensors, endpoint=False)
    sensors = tuple(SensorSpec(f"cms{k + 1:02d}", float(radius * np.cos(a)), float(radius * np.sin(a)),
                               sensor_height, has_anemometer=(k % 5 != 4)) for k, a in enumerate(ang))
    return SiteGeometry(sources, sensors)


def synthetic_winds(start, n_minutes: int, seed: int = 0, mean_speed: float = 3.0,
                    dir_step_sd: float = 6.0, speed_step_sd: float = 0.1,
                    speed_bounds: tuple = (0.5, 8.0)) -> list[WindRecord]:
    """Minute site wind: random-walk direction and mean-reverting speed."""
    rng = np.random.default_rng(seed)
    start = as_time(start)
    d0 = rng.uniform(0.0, 360.0)
    direction = np.mod(d0 + np.cumsum(rng.normal(0.0, dir_step_sd, n_minutes)), 360.0)
    speed = np.empty(n_minutes)
    s = mean_speed
    for t in range(n_minutes):
        s += 0.02 * (mean_speed - s) + rng.normal(0.0, speed_step_sd)
        s = min(max(s, speed_bounds[0]), speed_bounds[1])
        speed[t] = s
    return [WindRecord(start + t * MINUTE, float(speed[t]), float(direction[t]) % 360.0) for t in range(n_minutes)]


def random_rates(p: int, rng: np.random.Generator, on_prob: float = 0.6,
                 low: float = 0.5, high: float = 5.0) -> np.ndarray:
    """Independent per-source rates (kg/hr): uniform on ``[low, high]`` with probability ``on_prob``, else 0."""
    on = rng.random(p) < on_prob
    return np.where(on, rng.uniform(low, high, p), 0.0)


def piecewise_schedule(p: int, n_windows: int, rng: np.random.Generator, on_prob: float = 0.6,
                       low: float = 0.5, high: float = 5.0, min_run: int = 2, max_run: int = 6) -> np.ndarray:
    """``(n_windows, p)`` rates constant over runs of ``min_run``-``max_run`` windows."""
    out = np.zeros((n_windows, p))
    for i in range(p):
        w = 0
        while w < n_windows:
            run = int(rng.integers(min_run, max_run + 1))
            out[w:w + run, i] = random_rates(1, rng, on_prob, low, high)[0]
            w += run
    return out


def design_matrices(geometry: SiteGeometry, winds: Sequence[WindRecord], windows: Sequence[TimeWindow],
                    sim: SimConfig = SimConfig()) -> list[DesignMatrix]:
    return [build_design_matrix(list(geometry.sources), list(geometry.sensors), winds, w, sim) for w in windows]


def split_anemometers(winds: Sequence[WindRecord], sensors: Sequence[SensorSpec], seed: int = 0,
                      speed_sd: float = 0.1, dir_sd: float = 3.0) -> dict:
    """Per-anemometer streams scattered around a site wind series."""
    rng = np.random.default_rng(seed)
    out = {}
    for s in sensors:
        if not s.has_anemometer:
            continue
        recs = []
        for w in winds:
            sp = max(0.0, w.speed + rng.normal(0.0, speed_sd))
            d = float(np.mod(w.direction + rng.normal(0.0, dir_sd), 360.0)) % 360.0
            recs.append(WindRecord(w.timestamp, float(sp), d))
        out[s.id] = recs
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """A synthetic deployment: geometry, wind, window grid and true emission schedule.

    ``schedule="piecewise"`` holds rates over runs of several windows;
    ``"independent"`` redraws every window. Rates are in kg/hr; ``noise_sd``
    (ppm) and ``noise_r`` set the additive observation noise.
    """

    n_sources: int = 5
    n_sensors: int = 10
    radius: float = 40.0
    source_extent: float = 20.0
    start: str = "2024-06-01T00:00:00"
    n_windows: int = 48
    window_len: int = 30
    mean_speed: float = 3.0
    schedule: str = "piecewise"
    on_prob: float = 0.6
    low: float = 0.5
    high: float = 5.0
    noise_sd: float = 1.0
    noise_r: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1 or self.n_sensors < 1 or self.n_windows < 1 or self.window_len < 1:
            raise ValueError("scenario sizes must be >= 1")
        if self.schedule not in ("piecewise", "independent"):
            raise ValueError("schedule must be 'piecewise' or 'independent'")
        if not 0.0 <= self.on_prob <= 1.0:
            raise ValueError("on_prob must lie in [0, 1]")
        if not 0.0 <= self.low <= self.high:
            raise ValueError("need 0 <= low <= high")


@dataclass
class Scenario:
    geometry: SiteGeometry
    winds: list
    windows: list
    designs: list
    rates: np.ndarray  # (n_windows, p) kg/hr

    def truths(self, noise_sd: float = 1.0, noise_r: float = 0.0) -> list:
        from .simstudy import SyntheticTruth
        return [SyntheticTruth(tuple(float(v) for v in row), noise_sd, noise_r) for row in self.rates]


def build_scenario(sc: ScenarioConfig, sim: SimConfig = SimConfig(), designs: bool = True) -> Scenario:
    """Materialise a :class:`ScenarioConfig`. Each random component has its own seed stream."""
    def rng(k):
        return np.random.default_rng(np.random.SeedSequence(sc.seed, spawn_key=(k,)))

    geo = synthetic_site(sc.n_sources, sc.n_sensors, sc.radius, sc.source_extent,
                         seed=int(rng(0).integers(2**31)))
    start = as_time(sc.start)
    lead = sim.spinup_minutes + 1
    total = sc.n_windows * sc.window_len
    winds = synthetic_winds(start - lead * MINUTE, total + lead, seed=int(rng(1).integers(2**31)),
                            mean_speed=sc.mean_speed)
    windows = [TimeWindow(start + k * sc.window_len * MINUTE, start + (k + 1) * sc.window_len * MINUTE)
               for k in range(sc.n_windows)]
    r = rng(2)
    if sc.schedule == "piecewise":
        rates = piecewise_schedule(sc.n_sources, sc.n_windows, r, sc.on_prob, sc.low, sc.high)
    else:
        rates = np.vstack([random_rates(sc.n_sources, r, sc.on_prob, sc.low, sc.high) for _ in range(sc.n_windows)])
    X = design_matrices(geo, winds, windows, sim) if designs else []
    return Scenario(geo, winds, windows, X, rates)
