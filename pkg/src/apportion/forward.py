"""Gaussian puff transport from candidate sources to point sensors.

Each source releases a puff of mass ``q * dt`` every ``dt`` seconds. A puff
keeps the wind speed and direction of its creation minute for its whole life,
so it moves in a straight line and its travelled distance is ``u * age``.
Concentrations are summed over live puffs at every step and averaged to the
minute grid.

Puffs born in the same minute from the same source share a trajectory up to a
time shift; the simulator evaluates that trajectory once per (source, minute)
and adds the shifted copies with a running sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dispersion import StabilityClass, classify_stability, dispersion
from .site import (MINUTE, Layout, SensorSpec, SourceSpec, TimeWindow, WindRecord,
                   as_time, check_unique)

log = logging.getLogger(__name__)

# Methane mass concentration (g/m^3) to mole fraction (ppm) at 25 C, 101325 Pa.
GAS_CONSTANT = 8.314462618
STANDARD_T = 298.15
STANDARD_P = 101325.0
CH4_MOLAR_MASS = 16.04246
PPM_PER_G_M3 = 1e6 * GAS_CONSTANT * STANDARD_T / (STANDARD_P * CH4_MOLAR_MASS)

_NORM3 = (2.0 * np.pi) ** 1.5


class MissingWind(RuntimeError):
    """Wind series has a gap longer than the configured tolerance."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0
    q: float = 1.0
    cutoff: float = 1e-6
    sigma_floor: float = 0.5
    fixed_class: Optional[StabilityClass] = None
    max_age: float = 900.0
    spinup: Optional[float] = None
    max_wind_gap: int = 5
    insolation: str = "strong"
    night_cloud: str = "clear"
    day_hours: tuple = (7, 19)
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if self.dt <= 0 or self.q <= 0:
            raise ValueError("dt and q must be > 0")
        if self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        spm = 60.0 / self.dt
        if abs(spm - round(spm)) > 1e-9:
            raise ValueError("dt must divide one minute exactly")
        if self.fixed_class is not None:
            object.__setattr__(self, "fixed_class", StabilityClass.parse(self.fixed_class))

    @property
    def steps_per_minute(self) -> int:
        return int(round(60.0 / self.dt))

    @property
    def spinup_minutes(self) -> int:
        s = self.max_age if self.spinup is None else self.spinup
        return int(np.ceil(s / 60.0))

    def stability(self, speed: float, timestamp) -> StabilityClass:
        return classify_stability(speed, timestamp, insolation=self.insolation,
                                  night_cloud=self.night_cloud, day_hours=tuple(self.day_hours),
                                  utc_offset_hours=self.utc_offset_hours,
                                  fixed_class=self.fixed_class)


@dataclass
class PuffState:
    Q: float
    u: float
    dir: float
    birth: np.datetime64
    origin: tuple
    traveled: float = 0.0


@dataclass
class DesignMatrix:
    """``values[k*l + t, i]``: ppm at sensor k, minute t, per unit rate of source i."""

    values: np.ndarray
    source_ids: tuple
    layout: Layout
    q: float = 1.0

    @property
    def shape(self):
        return self.values.shape

    def subset(self, mask) -> "DesignMatrix":
        mask = np.asarray(mask, dtype=bool)
        return DesignMatrix(self.values[:, mask], tuple(np.asarray(self.source_ids, dtype=object)[mask]),
                            self.layout, self.q)


def downwind_frame(dx, dy, direction_deg):
    """Rotate site offsets into the frame whose +x' axis points downwind."""
    th = np.deg2rad(direction_deg)
    ex, ey = -np.sin(th), -np.cos(th)
    return dx * ex + dy * ey, -dx * ey + dy * ex


def puff_kernel(Q, xr, yr, z, H, sigma_y, sigma_z):
    """Mass concentration (g/m^3) of a reflected Gaussian puff.

    ``xr``, ``yr`` are offsets from the puff centre in the downwind frame and
    ``z`` the receptor height above ground.
    """
    horiz = np.exp(-(xr**2 + yr**2) / (2.0 * sigma_y**2))
    vert = np.exp(-(z - H) ** 2 / (2.0 * sigma_z**2)) + np.exp(-(z + H) ** 2 / (2.0 * sigma_z**2))
    return Q / (_NORM3 * sigma_y**2 * sigma_z) * horiz * vert


def puff_concentration(puff: PuffState, sensor: SensorSpec, t: float, stability,
                       sigma_floor: float = 0.5) -> float:
    """Concentration (ppm) at ``sensor`` from ``puff`` ``t`` seconds after its birth."""
    if t < 0:
        raise ValueError("t must be >= 0")
    x0, y0, H = puff.origin
    xs, ys = downwind_frame(sensor.x - x0, sensor.y - y0, puff.dir)
    traveled = puff.u * t
    sy, sz = dispersion(stability, traveled, sigma_floor)
    return float(PPM_PER_G_M3 * puff_kernel(puff.Q, xs - traveled, ys, sensor.z, H, sy, sz))


def _wind_arrays(winds: Sequence[WindRecord], start, n_minutes: int, max_gap: int,
                 free_prefix: int = 0):
    """Speed/direction per minute on ``[start, start + n_minutes)``, forward-filling short gaps.

    Unfillable gaps inside the first ``free_prefix`` minutes move the returned
    first valid index forward instead of raising. Returns ``(first, speed, direction)``.
    """
    start = as_time(start).astype("datetime64[m]")
    speed = np.full(n_minutes, np.nan)
    direc = np.full(n_minutes, np.nan)
    prior = None
    for w in winds:
        k = int((as_time(w.timestamp).astype("datetime64[m]") - start).astype(np.int64))
        if 0 <= k < n_minutes:
            speed[k] = w.speed
            direc[k] = w.direction
        elif k < 0 and (prior is None or k > prior[0]):
            prior = (k, w.speed, w.direction)
    first = 0
    last_k = None
    if prior is not None and -prior[0] <= max_gap:
        last_k, last_s, last_d = prior
    for k in range(n_minutes):
        if np.isnan(speed[k]):
            if last_k is not None and k - last_k <= max_gap:
                speed[k], direc[k] = last_s, last_d
                continue
            if k < free_prefix:
                first, last_k = k + 1, None
                continue
            when = start + np.timedelta64(k, "m")
            raise MissingWind(f"no wind within {max_gap} min of {when}")
        last_k, last_s, last_d = k, speed[k], direc[k]
    return first, speed, direc


def _simulate(sources: Sequence[SourceSpec], sensors: Sequence[SensorSpec],
              speed: np.ndarray, direc: np.ndarray, classes: np.ndarray,
              cfg: SimConfig) -> np.ndarray:
    """Minute-averaged ppm, shape ``(n_minutes, p, m)``, for puffs born on this grid."""
    n_min = len(speed)
    p, m = len(sources), len(sensors)
    spm = cfg.steps_per_minute
    n_age = int(np.floor(cfg.max_age / cfg.dt + 1e-9)) + 1
    total = n_min * spm
    acc = np.zeros((total + n_age + spm, p, m))
    if n_min == 0 or p == 0 or m == 0:
        return np.zeros((n_min, p, m))

    src_xy = np.array([[s.x, s.y] for s in sources], dtype=float)
    src_h = np.array([s.H for s in sources], dtype=float)
    sen = np.array([[s.x, s.y, s.z] for s in sensors], dtype=float)
    dx = sen[None, :, 0] - src_xy[:, None, 0]
    dy = sen[None, :, 1] - src_xy[:, None, 1]
    zs = sen[None, None, :, 2]
    H = src_h[None, :, None]
    ages = np.arange(n_age) * cfg.dt
    Q = cfg.q * cfg.dt
    dz_minus = (zs - H) ** 2
    dz_plus = (zs + H) ** 2

    for mi in range(n_min):
        u = speed[mi]
        traveled = u * ages
        sy, sz = dispersion(int(classes[mi]), traveled, cfg.sigma_floor)
        xr, yr = downwind_frame(dx, dy, direc[mi])
        sy2 = (2.0 * sy**2)[:, None, None]
        sz2 = (2.0 * sz**2)[:, None, None]
        along = xr[None, :, :] - traveled[:, None, None]
        K = (PPM_PER_G_M3 * Q / (_NORM3 * sy**2 * sz))[:, None, None] \
            * np.exp(-(along**2 + yr[None, :, :] ** 2) / sy2) \
            * (np.exp(-dz_minus / sz2) + np.exp(-dz_plus / sz2))

        # Retire puffs once they are past every sensor, below the cutoff
        # everywhere and not rising anywhere.
        past = traveled[:, None] >= xr.max(axis=1)[None, :]
        below = K.max(axis=2) < cfg.cutoff
        falling = np.ones_like(below)
        falling[1:] = np.all(K[1:] <= K[:-1], axis=2)
        done = past & below & falling
        K[K < cfg.cutoff] = 0.0
        for i in range(p):
            hit = np.flatnonzero(done[:, i])
            if hit.size:
                K[hit[0]:, i, :] = 0.0

        # Sum the spm time-shifted copies: S[t] = sum_{j<spm} K[t - j].
        cs = np.cumsum(np.concatenate([K, np.zeros((spm, p, m))]), axis=0)
        S = cs.copy()
        S[spm:] -= cs[:-spm]
        off = mi * spm
        acc[off:off + n_age + spm] += S

    steps = acc[:total].reshape(n_min, spm, p, m)
    return steps.mean(axis=1)


def _window_simulation(sources, sensors, winds, window: TimeWindow, cfg: SimConfig) -> np.ndarray:
    l = window.n_minutes
    if l == 0:
        return np.zeros((0, len(sources), len(sensors)))
    check_unique([s.id for s in sources], "source")
    check_unique([s.id for s in sensors], "sensor")
    spin = cfg.spinup_minutes
    sim_start = window.start - spin * MINUTE
    # Spin-up may start late if early wind is absent; the window itself must be covered.
    first, speed, direc = _wind_arrays(winds, sim_start, spin + l, cfg.max_wind_gap,
                                       free_prefix=spin)
    speed, direc = speed[first:], direc[first:]
    minutes = sim_start + MINUTE * np.arange(first, spin + l)
    classes = np.array([int(cfg.stability(s, t)) for s, t in zip(speed, minutes)], dtype=int)
    out = _simulate(sources, sensors, speed, direc, classes, cfg)
    return out[spin - first:]


def simulate_unit_source(source: SourceSpec, sensors: Sequence[SensorSpec],
                         winds: Sequence[WindRecord], window: TimeWindow,
                         cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Minute-averaged ppm at each sensor for ``source`` emitting ``cfg.q`` g/s.

    Returns an array of shape ``(len(sensors), window.n_minutes)``.
    """
    return _window_simulation([source], sensors, winds, window, cfg)[:, 0, :].T.copy()


def build_design_matrix(sources: Sequence[SourceSpec], sensors: Sequence[SensorSpec],
                        winds: Sequence[WindRecord], window: TimeWindow,
                        cfg: SimConfig = SimConfig()) -> DesignMatrix:
    """Stack unit-rate simulations into an ``(l*m) x p`` matrix, sensor-major rows."""
    if not sources or not sensors:
        raise ValueError("need at least one source and one sensor")
    sim = _window_simulation(sources, sensors, winds, window, cfg)  # (l, p, m)
    values = np.ascontiguousarray(sim.transpose(2, 0, 1).reshape(-1, len(sources)))
    layout = Layout(tuple(s.id for s in sensors), window.minutes)
    return DesignMatrix(values, tuple(s.id for s in sources), layout, cfg.q)
