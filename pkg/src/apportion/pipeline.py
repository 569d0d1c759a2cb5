"""Windowed inversion over a deployment.

The deployment span is cut into consecutive fixed-length windows, each solved
as an independent inverse problem: sources whose design column has too few
nonzero predictions are dropped, an all-zero observation vector short-cuts to
zero rates, and everything else goes through the Gibbs sampler.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .forward import DesignMatrix, MissingWind, SimConfig, build_design_matrix
from .model import (Hyperparams, PosteriorDraws, SamplerConfig, WindowData, credible_interval,
                    point_estimate, run_gibbs)
from .preprocess import (ConcentrationSeries, IncompleteWindow, LayoutMismatch, NoWindData,
                         assemble_observation)
from .site import MINUTE, SensorSpec, SourceSpec, TimeWindow, WindRecord, as_time

log = logging.getLogger(__name__)

DATA_ERRORS = (MissingWind, IncompleteWindow, NoWindData, LayoutMismatch)

STATUS_OK = "ok"
STATUS_ZERO = "zero_shortcut"
STATUS_NO_INFO = "no_information"
STATUS_SKIPPED = "skipped"


@dataclass(frozen=True)
class PipelineConfig:
    window_len: int = 30
    viability_threshold: int = 4
    nonzero_tol: float = 1e-9
    sampler: SamplerConfig = SamplerConfig()
    hyper: Hyperparams = Hyperparams()
    jobs: int = 1
    offset_minutes: int = 0
    master_seed: int = 0
    ci_level: float = 0.95
    keep_draws: bool = True

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if self.viability_threshold < 1:
            raise ValueError("viability_threshold must be >= 1")
        if self.nonzero_tol < 0:
            raise ValueError("nonzero_tol must be >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass
class WindowResult:
    """Outcome of one window.

    Arrays are indexed by the site's source order; entries of sources outside
    ``viable_mask`` are NaN (no estimate), never zero.
    """

    window: TimeWindow
    source_ids: tuple
    viable_mask: np.ndarray
    rate_kghr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    z_mean: np.ndarray
    status: str = STATUS_OK
    site_rate_kghr: float = float("nan")
    site_ci: tuple = (float("nan"), float("nan"))
    sigma2_mean: float = float("nan")
    r_mean: float = float("nan")
    seed: Optional[int] = None
    message: str = ""
    draws: Optional[PosteriorDraws] = field(default=None, repr=False)

    @property
    def window_id(self) -> int:
        return self.window.id

    @property
    def zero_shortcut(self) -> bool:
        return self.status == STATUS_ZERO

    @property
    def estimated(self) -> bool:
        return self.status in (STATUS_OK, STATUS_ZERO)

    def estimates(self) -> dict:
        """``{source_id: rate_kghr}`` for the estimated sources only."""
        return {sid: float(self.rate_kghr[k]) for k, sid in enumerate(self.source_ids)
                if self.viable_mask[k]}

    def rate_draws(self) -> Optional[np.ndarray]:
        """Posterior rate draws (kg/hr), columns aligned with the viable sources."""
        if self.zero_shortcut:
            return np.zeros((1, int(self.viable_mask.sum())))
        return None if self.draws is None else self.draws.rates_kghr()


class WindowInputs(Protocol):
    """Anything that yields the site sources and ``(y, X)`` for a window."""

    source_ids: tuple

    def observation(self, window: TimeWindow) -> tuple[np.ndarray, DesignMatrix]:
        ...


@dataclass
class SiteInputs:
    """Raw deployment data: geometry, site wind and background-removed series."""

    sources: Sequence[SourceSpec]
    sensors: Sequence[SensorSpec]
    winds: Sequence[WindRecord]
    series: Sequence[ConcentrationSeries]
    sim: SimConfig = SimConfig()
    max_missing_frac: float = 0.2

    def __post_init__(self):
        order = {s.id: k for k, s in enumerate(self.sensors)}
        missing = set(order) - {s.sensor_id for s in self.series}
        if missing:
            raise ValueError(f"no concentration series for sensors {sorted(missing)}")
        self.series = sorted((s for s in self.series if s.sensor_id in order),
                             key=lambda s: order[s.sensor_id])
        self.winds = sorted(self.winds, key=lambda w: as_time(w.timestamp))

    @property
    def source_ids(self) -> tuple:
        return tuple(s.id for s in self.sources)

    def span(self) -> tuple[np.datetime64, np.datetime64]:
        starts = [s.timestamps[0] for s in self.series if len(s.timestamps)]
        ends = [s.timestamps[-1] for s in self.series if len(s.timestamps)]
        if not starts:
            raise ValueError("no concentration data")
        return min(starts), max(ends) + MINUTE

    def observation(self, window: TimeWindow):
        lo = window.start - MINUTE * (self.sim.spinup_minutes + self.sim.max_wind_gap + 1)
        winds = [w for w in self.winds if lo <= as_time(w.timestamp) < window.end]
        X = build_design_matrix(self.sources, self.sensors, winds, window, self.sim)
        y, _ = assemble_observation(self.series, window, X.layout, self.max_missing_frac)
        return y, X


@dataclass
class PrecomputedInputs:
    """``(y, X)`` pairs prepared elsewhere, keyed by window id."""

    source_ids: tuple
    data: dict

    def observation(self, window: TimeWindow):
        try:
            return self.data[window.id]
        except KeyError:
            raise IncompleteWindow(f"no data for window starting {window.start}") from None

    def windows(self) -> list[TimeWindow]:
        out = []
        for wid in sorted(self.data):
            _, X = self.data[wid]
            mins = X.layout.minutes
            out.append(TimeWindow(mins[0], mins[-1] + MINUTE))
        return out


def partition_windows(start, end, window_len: int = 30, offset_minutes: int = 0) -> list[TimeWindow]:
    """Consecutive non-overlapping ``window_len``-minute windows in ``[start + offset, end)``.

    Windows are aligned to the deployment start shifted by ``offset_minutes``;
    a trailing partial window is dropped and logged.
    """
    start = as_time(start).astype("datetime64[m]").astype("datetime64[s]")
    end = as_time(end).astype("datetime64[m]").astype("datetime64[s]")
    first = start + offset_minutes * MINUTE
    total = int((end - first) // MINUTE) if end > first else 0
    n = total // window_len
    rem = total - n * window_len
    if rem:
        log.info("event=partial_window_dropped minutes=%d start=%s", rem, first + n * window_len * MINUTE)
    step = window_len * MINUTE
    return [TimeWindow(first + k * step, first + (k + 1) * step) for k in range(n)]


def viable_sources(X, threshold: int = 4, tol: float = 1e-9) -> np.ndarray:
    """Source ``i`` is viable iff its column has at least ``threshold`` entries above ``tol``."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    return (values > tol).sum(axis=0) >= threshold


def window_seed(master_seed: int, window_id: int) -> int:
    """Sampler seed derived from the master seed and the window id only."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(int(window_id),))
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def _empty(window, ids, mask, status, message="", seed=None) -> WindowResult:
    p = len(ids)
    nan = np.full(p, np.nan)
    return WindowResult(window, tuple(ids), mask, nan.copy(), nan.copy(), nan.copy(), nan.copy(),
                        status=status, seed=seed, message=message)


def process_window(window: TimeWindow, inputs: WindowInputs, cfg: PipelineConfig = PipelineConfig(),
                   _obs=None) -> WindowResult:
    """Gate sources, short-cut empty windows, otherwise sample and summarise."""
    ids = tuple(inputs.source_ids)
    seed = window_seed(cfg.master_seed, window.id)
    try:
        y, X = inputs.observation(window) if _obs is None else _obs
    except DATA_ERRORS as exc:
        log.warning("event=window_skipped window=%s reason=%s", window.start, exc)
        return _empty(window, ids, np.zeros(len(ids), dtype=bool), STATUS_SKIPPED, str(exc))
    if tuple(X.source_ids) != ids:
        raise ValueError("design matrix columns do not follow the site source order")
    y = np.asarray(y, dtype=float)
    mask = viable_sources(X, cfg.viability_threshold, cfg.nonzero_tol)
    p_v = int(mask.sum())
    if p_v == 0:
        return _empty(window, ids, mask, STATUS_NO_INFO, "no viable sources")
    if not np.any(y != 0.0):
        res = _empty(window, ids, mask, STATUS_ZERO)
        for arr in (res.rate_kghr, res.ci_low, res.ci_high, res.z_mean):
            arr[mask] = 0.0
        res.site_rate_kghr = 0.0
        res.site_ci = (0.0, 0.0)
        return res

    sub = X.subset(mask)
    wd = WindowData(y, sub.values, layout=X.layout, source_ids=sub.source_ids,
                    viable_mask=mask, window_id=window.id, q=X.q)
    draws = run_gibbs(wd, cfg.hyper.subset(mask), replace(cfg.sampler, seed=seed))
    pe = point_estimate(draws)
    lo, hi = credible_interval(draws, cfg.ci_level)
    res = _empty(window, ids, mask, STATUS_OK, seed=seed)
    res.rate_kghr[mask] = pe.rate_kghr
    res.z_mean[mask] = pe.z_mean
    res.ci_low[mask] = lo
    res.ci_high[mask] = hi
    site = draws.rates_kghr().sum(axis=1)
    tail = 50.0 * (1.0 - cfg.ci_level)
    res.site_rate_kghr = float(site.mean())
    res.site_ci = (float(np.percentile(site, tail)), float(np.percentile(site, 100.0 - tail)))
    res.sigma2_mean = float(draws.sigma2.mean())
    res.r_mean = float(draws.r.mean())
    if cfg.keep_draws:
        res.draws = draws
    log.info("event=window_done window=%s viable=%d accept_nu=%.2f accept_r=%.2f",
             window.start, p_v, draws.accept_nu, draws.accept_r)
    return res


def _process_one(args):
    window, inputs, cfg = args
    return process_window(window, inputs, cfg)


def run_deployment(inputs: WindowInputs, cfg: PipelineConfig = PipelineConfig(),
                   windows: Optional[Sequence[TimeWindow]] = None,
                   on_result: Optional[Callable[[WindowResult], None]] = None) -> list[WindowResult]:
    """Process every window; results are ordered by window start.

    Per-window seeds depend only on ``cfg.master_seed`` and the window id, so
    the output does not depend on ``cfg.jobs``. Data failures become
    ``skipped`` results rather than exceptions. ``on_result`` is called in the
    parent process as each window finishes (used for checkpointing).
    """
    if windows is None:
        if hasattr(inputs, "windows"):
            windows = inputs.windows()
        else:
            start, end = inputs.span()
            windows = partition_windows(start, end, cfg.window_len, cfg.offset_minutes)
    windows = list(windows)
    if not windows:
        return []
    tasks = [(w, inputs, cfg) for w in windows]
    results = []
    if cfg.jobs == 1 or len(windows) == 1:
        for res in map(_process_one, tasks):
            results.append(res)
            if on_result is not None:
                on_result(res)
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for res in pool.map(_process_one, tasks, chunksize=max(1, len(tasks) // (4 * cfg.jobs))):
                results.append(res)
                if on_result is not None:
                    on_result(res)
    results.sort(key=lambda r: r.window.start)
    failures = failure_report(results)
    if failures:
        log.warning("event=deployment_failures count=%d", len(failures))
    return results


def failure_report(results: Sequence[WindowResult]) -> list[tuple[str, str]]:
    """``(window_start, reason)`` for every skipped window."""
    return [(str(r.window.start), r.message) for r in results if r.status == STATUS_SKIPPED]
