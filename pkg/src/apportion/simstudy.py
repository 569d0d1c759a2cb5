"""Synthetic observations, controlled forward-model misalignment and baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .forward import DesignMatrix
from .model import KG_HR_PER_G_S
from .pipeline import (PipelineConfig, PrecomputedInputs, WindowResult, run_deployment)
from .preprocess import ConcentrationSeries, detect_spikes

log = logging.getLogger(__name__)

DEFAULT_MS = (0.0, 12.5, 25.0, 37.5, 50.0)


@dataclass(frozen=True)
class SyntheticTruth:
    """True rates (kg/hr, one per design column) and additive noise settings.

    ``noise_r > 0`` makes the noise AR(1) within each sensor series with
    marginal standard deviation ``noise_sd``.
    """

    beta_T: tuple
    noise_sd: float = 1.0
    noise_r: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.beta_T, dtype=float)
        if np.any(b < 0):
            raise ValueError("true rates must be >= 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0.0 <= self.noise_r < 1.0:
            raise ValueError("noise_r must lie in [0, 1)")

    def internal(self, q: float = 1.0) -> np.ndarray:
        """Rates in the units of a design matrix simulated at ``q`` g/s."""
        return np.asarray(self.beta_T, dtype=float) / (q * KG_HR_PER_G_S)


@dataclass(frozen=True)
class MisalignmentConfig:
    M: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.M <= 50.0:
            raise ValueError("M must lie in [0, 50]")


def _design(X):
    if isinstance(X, DesignMatrix):
        return X.values, X.q, X.layout.l
    return np.asarray(X, dtype=float), 1.0, None


def ar1_noise(n: int, sd: float, r: float, block_len: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) noise restarted at every block boundary."""
    e = rng.standard_normal(n) * sd
    if r == 0.0 or n == 0:
        return e
    L = block_len or n
    innov = math.sqrt(1.0 - r * r)
    out = np.empty(n)
    for k in range(0, n, L):
        blk = e[k:k + L]
        o = out[k:k + L]
        o[0] = blk[0]
        for t in range(1, len(blk)):
            o[t] = r * o[t - 1] + innov * blk[t]
    return out


def synthesize(X, truth: SyntheticTruth, rng: np.random.Generator, signal: Optional[np.ndarray] = None) -> np.ndarray:
    """``X beta_T`` plus noise. ``signal`` replaces ``X beta_T`` when given (e.g. after misalignment)."""
    values, q, L = _design(X)
    mean = values @ truth.internal(q) if signal is None else np.asarray(signal, dtype=float)
    if truth.noise_sd == 0.0:
        return mean.copy()
    return mean + ar1_noise(len(mean), truth.noise_sd, truth.noise_r, L, rng)


def _groups(series: np.ndarray, grad_threshold: float, merge_gap: int) -> list[tuple[int, int]]:
    cs = ConcentrationSeries("_", np.datetime64("2000-01-01T00:00") + np.arange(len(series)) * np.timedelta64(60, "s"),
                             series)
    return [(s.start, s.end) for s in detect_spikes(cs, grad_threshold, merge_gap)]


def _nearest_free(start: int, length: int, l: int, occupied: np.ndarray) -> Optional[int]:
    for d in range(l):
        for s in (start - d, start + d) if d else (start,):
            if 0 <= s <= l - length and not occupied[s:s + length].any():
                return s
    return None


def inject_misalignment(y: np.ndarray, M: float, rng: np.random.Generator, block_len: Optional[int] = None,
                        grad_threshold: float = 1e-3, merge_gap: int = 1) -> np.ndarray:
    """Move ``ceil(M% of groups)`` enhancement groups in each sensor series to random start minutes.

    Groups are runs found by the spike detector. A moved group keeps its shape;
    its old minutes are set to 0. A new start that would overlap another group
    is shifted to the nearest free start; with no free start the group is added
    on top at the sampled position. Apply this to the noiseless signal and add
    noise afterwards.
    """
    if not 0.0 <= M <= 100.0:
        raise ValueError("M must lie in [0, 100]")
    y = np.asarray(y, dtype=float)
    out = y.copy()
    if M == 0.0:
        return out
    L = block_len or len(y)
    for k in range(0, len(y), L):
        seg = y[k:k + L]
        groups = _groups(seg, grad_threshold, merge_gap)
        if not groups:
            continue
        n_move = min(len(groups), math.ceil(M / 100.0 * len(groups) - 1e-12))
        chosen = sorted(rng.choice(len(groups), size=n_move, replace=False)) if n_move else []
        new = seg.copy()
        occupied = np.zeros(L, dtype=bool)
        for j, (s, e) in enumerate(groups):
            if j not in chosen:
                occupied[s:e + 1] = True
        # vacate every chosen group first so a later move cannot erase an earlier placement
        for j in chosen:
            s, e = groups[j]
            new[s:e + 1] = 0.0
        for j in chosen:
            s, e = groups[j]
            vals = seg[s:e + 1]
            length = e - s + 1
            start = int(rng.integers(0, L - length + 1))
            free = _nearest_free(start, length, L, occupied)
            dest = start if free is None else free
            new[dest:dest + length] += vals
            occupied[dest:dest + length] = True
        out[k:k + L] = new
    return out


@dataclass(frozen=True)
class OLSResult:
    rates_kghr: np.ndarray
    emitting: np.ndarray
    rank_deficient: bool


def ols_baseline(y, X, threshold_kghr: float = 0.1) -> OLSResult:
    """Least-squares rates (negative values kept) and the ``> threshold_kghr`` emitting rule.

    A rank-deficient ``X`` is flagged and solved with the pseudo-inverse.
    """
    values, q, _ = _design(X)
    y = np.asarray(y, dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(values, y, rcond=None)
    deficient = rank < values.shape[1]
    if deficient:
        log.warning("event=ols_rank_deficient rank=%d p=%d", rank, values.shape[1])
    rates = coef * q * KG_HR_PER_G_S
    return OLSResult(rates, rates > threshold_kghr, bool(deficient))


def _window_seed(master: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key)))


def simulate_windows(designs: Sequence[DesignMatrix], truths: Sequence[SyntheticTruth], M: float = 0.0,
                     seed: int = 0) -> PrecomputedInputs:
    """Synthetic ``(y, X)`` for each window, with misalignment ``M``.

    Noise depends only on (seed, window) and misalignment only on
    (seed, M, window), so sweeps over ``M`` share their noise.
    """
    if len(designs) != len(truths):
        raise ValueError("one truth per design matrix required")
    if not designs:
        return PrecomputedInputs((), {})
    ids = tuple(designs[0].source_ids)
    data = {}
    for X, truth in zip(designs, truths):
        wid = int(np.asarray(X.layout.minutes[0]).astype("datetime64[m]").astype(np.int64))
        signal = X.values @ truth.internal(X.q)
        if M > 0:
            signal = inject_misalignment(signal, M, _window_seed(seed, 1, round(M * 1000), wid), X.layout.l)
        y = synthesize(X, truth, _window_seed(seed, 0, wid), signal=signal)
        data[wid] = (y, X)
    return PrecomputedInputs(ids, data)


def truth_frame(designs: Sequence[DesignMatrix], truths: Sequence[SyntheticTruth]) -> pd.DataFrame:
    rows = []
    for X, t in zip(designs, truths):
        for sid, b in zip(X.source_ids, t.beta_T):
            rows.append({"window_start": pd.Timestamp(X.layout.minutes[0]), "source_id": sid, "rate_kghr": float(b)})
    return pd.DataFrame(rows)


def sweep_records(results: Sequence[WindowResult], truths: Sequence[SyntheticTruth], M: float) -> pd.DataFrame:
    """Per-window and per-(window, source) outcomes used by the sweep summary."""
    rows = []
    for res, truth in zip(sorted(results, key=lambda r: r.window.start), truths):
        if res.status != "ok":
            continue
        bt = np.asarray(truth.beta_T, dtype=float)
        m = res.viable_mask
        rows.append({"M": M, "window_id": res.window.id, "scope": "window", "sigma2": res.sigma2_mean,
                     "r": res.r_mean})
        for k in np.flatnonzero(m):
            rows.append({"M": M, "window_id": res.window.id, "scope": "source", "source_id": res.source_ids[k],
                         "error": res.rate_kghr[k] - bt[k],
                         "covered": float(res.ci_low[k] <= bt[k] <= res.ci_high[k])})
        if m.all():
            st = bt.sum()
            rows.append({"M": M, "window_id": res.window.id, "scope": "site", "error": res.site_rate_kghr - st,
                         "covered": float(res.site_ci[0] <= st <= res.site_ci[1])})
    return pd.DataFrame(rows)


def _wilson(k: float, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    ph = k / n
    den = 1 + z * z / n
    c = (ph + z * z / (2 * n)) / den
    h = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return c - h, c + h


def summarize_sweep(records: pd.DataFrame) -> pd.DataFrame:
    """Collapse per-window records to ``M, metric, scope, mean, p2.5, p97.5``.

    For ``sigma2``, ``r`` and ``rate_error`` the bounds are the inner 95% range
    across windows; for ``coverage`` they are the Wilson 95% interval of the
    proportion.
    """
    rows = []
    for M, g in records.groupby("M", sort=True):
        w = g[g["scope"] == "window"]
        for metric in ("sigma2", "r"):
            v = w[metric].to_numpy(float)
            if len(v):
                rows.append((M, metric, "window", v.mean(), np.percentile(v, 2.5), np.percentile(v, 97.5)))
        for scope in ("source", "site"):
            s = g[g["scope"] == scope]
            if s.empty:
                continue
            e = s["error"].to_numpy(float)
            rows.append((M, "rate_error", scope, e.mean(), np.percentile(e, 2.5), np.percentile(e, 97.5)))
            c = s["covered"].to_numpy(float)
            lo, hi = _wilson(c.sum(), len(c))
            rows.append((M, "coverage", scope, c.mean(), lo, hi))
    return pd.DataFrame(rows, columns=["M", "metric", "scope", "mean", "p2.5", "p97.5"])


def trend_tests(records: pd.DataFrame) -> dict:
    """Spearman correlations with ``M`` over per-window values: source coverage and sigma2."""
    src = records[records["scope"] == "source"]
    win = records[records["scope"] == "window"]
    cov = stats.spearmanr(src["M"], src["covered"])
    s2 = stats.spearmanr(win["M"], win["sigma2"])
    return {"coverage_rho": float(cov.statistic), "coverage_p": float(cov.pvalue),
            "sigma2_rho": float(s2.statistic), "sigma2_p": float(s2.pvalue)}


@dataclass
class SweepReport:
    summary: pd.DataFrame
    records: pd.DataFrame

    def trends(self) -> dict:
        return trend_tests(self.records)


def run_bias_sweep(designs: Sequence[DesignMatrix], truths: Sequence[SyntheticTruth],
                   Ms: Sequence[float] = DEFAULT_MS, cfg: PipelineConfig = PipelineConfig(),
                   seed: int = 0) -> SweepReport:
    """Run the pipeline on synthetic data at each misalignment level ``M``."""
    cfg = replace(cfg, keep_draws=False)
    recs = []
    for M in Ms:
        MisalignmentConfig(M)
        inputs = simulate_windows(designs, truths, M, seed)
        results = run_deployment(inputs, replace(cfg, master_seed=seed))
        order = np.argsort([int(np.asarray(X.layout.minutes[0]).astype("datetime64[m]").astype(np.int64))
                            for X in designs])
        recs.append(sweep_records(results, [truths[i] for i in order], M))
        log.info("event=sweep_level M=%s windows=%d", M, len(results))
    records = pd.concat(recs, ignore_index=True) if recs else pd.DataFrame()
    return SweepReport(summarize_sweep(records) if len(records) else
                       pd.DataFrame(columns=["M", "metric", "scope", "mean", "p2.5", "p97.5"]), records)
