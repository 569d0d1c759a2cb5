"""Inventories, emission alerts and evaluation against a known schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .pipeline import WindowResult

log = logging.getLogger(__name__)

KG_PER_TONNE = 1000.0


class NonEstimableSource(ValueError):
    """A source was never viable, so it has no estimate to impute from."""


class InsufficientHistory(ValueError):
    """Fewer than two estimated windows for a source."""


class ScheduleMismatch(ValueError):
    """Truth schedule and results cover different windows."""


@dataclass
class InventoryReport:
    table: pd.DataFrame
    site_total_t: float
    site_ci_t: tuple
    replicates_t: Optional[np.ndarray] = field(default=None, repr=False)

    def source_total(self, source_id) -> float:
        return float(self.table.set_index("source_id").loc[source_id, "total_t"])


def build_inventory(results: Sequence[WindowResult], n_replicates: int = 1000, seed: int = 0,
                    level: float = 0.95, on_non_estimable: str = "raise") -> InventoryReport:
    """Total emitted mass per source and site over all windows in ``results``.

    The point total sums posterior mean rate times window length over windows
    where the source was estimated; every other window is imputed with the mean
    of those window estimates. The interval comes from ``n_replicates``
    resampled inventories: one posterior draw per estimated window and, for each
    window without an estimate, one draw from a uniformly chosen estimated
    window. The site interval sums per-replicate source totals.

    ``on_non_estimable="flag"`` reports never-viable sources with NaN totals
    instead of raising :class:`NonEstimableSource`.
    """
    if on_non_estimable not in ("raise", "flag"):
        raise ValueError("on_non_estimable must be 'raise' or 'flag'")
    results = list(results)
    if not results:
        table = pd.DataFrame(columns=["source_id", "total_t", "ci_low_t", "ci_high_t",
                                      "n_windows_estimated", "n_windows_imputed", "estimable"])
        return InventoryReport(table, 0.0, (0.0, 0.0), np.zeros(n_replicates))
    ids = results[0].source_ids
    rng = np.random.default_rng(seed)
    tail = 50.0 * (1.0 - level)
    rows = []
    site_reps = np.zeros(n_replicates)
    for k, sid in enumerate(ids):
        est_hours, est_means, est_draws, miss_hours = [], [], [], []
        for res in results:
            hours = res.window.hours
            if res.estimated and res.viable_mask[k]:
                col = int(res.viable_mask[:k].sum())
                draws = res.rate_draws()
                if draws is None:
                    raise ValueError(f"window {res.window.start} kept no posterior draws")
                est_hours.append(hours)
                est_means.append(float(res.rate_kghr[k]))
                est_draws.append(draws[:, col])
            else:
                miss_hours.append(hours)
        if not est_means:
            if on_non_estimable == "raise":
                raise NonEstimableSource(f"source {sid!r} was never viable")
            rows.append((sid, np.nan, np.nan, np.nan, 0, len(miss_hours), False))
            site_reps[:] = np.nan
            continue
        est_hours = np.asarray(est_hours)
        fill = float(np.mean(est_means))
        total_kg = float(np.dot(est_means, est_hours) + fill * np.sum(miss_hours))
        reps = np.zeros(n_replicates)
        for h, d in zip(est_hours, est_draws):
            reps += h * d[rng.integers(len(d), size=n_replicates)]
        for h in miss_hours:
            pick = rng.integers(len(est_draws), size=n_replicates)
            for w in np.unique(pick):
                sel = pick == w
                d = est_draws[w]
                reps[sel] += h * d[rng.integers(len(d), size=int(sel.sum()))]
        reps /= KG_PER_TONNE
        site_reps += reps
        rows.append((sid, total_kg / KG_PER_TONNE, float(np.percentile(reps, tail)),
                     float(np.percentile(reps, 100.0 - tail)), len(est_means), len(miss_hours), True))
    table = pd.DataFrame(rows, columns=["source_id", "total_t", "ci_low_t", "ci_high_t",
                                        "n_windows_estimated", "n_windows_imputed", "estimable"])
    site_total = float(table["total_t"].sum(min_count=1)) if table["estimable"].all() else float("nan")
    if np.all(np.isfinite(site_reps)):
        site_ci = (float(np.percentile(site_reps, tail)), float(np.percentile(site_reps, 100.0 - tail)))
    else:
        site_ci = (float("nan"), float("nan"))
    return InventoryReport(table, site_total, site_ci, site_reps)


@dataclass(frozen=True)
class AlertRecord:
    window_id: int
    window_start: np.datetime64
    source_id: str
    emitting: bool
    z_mean: float
    threshold: float


def generate_alerts(results: Sequence[WindowResult], include_zero_shortcut: bool = True,
                    on_insufficient: str = "raise") -> list[AlertRecord]:
    """Flag source ``i`` as emitting in a window when its posterior mean of ``z_i``
    strictly exceeds the average over all of its other estimated windows.

    Windows where the source had no estimate produce no record. Zero-shortcut
    windows enter with ``z_mean = 0``; with ``include_zero_shortcut=False`` they
    still get records but are left out of other windows' baselines.
    ``on_insufficient="skip"`` drops sources with fewer than two estimated
    windows instead of raising :class:`InsufficientHistory`.
    """
    if on_insufficient not in ("raise", "skip"):
        raise ValueError("on_insufficient must be 'raise' or 'skip'")
    results = sorted(results, key=lambda r: r.window.start)
    if not results:
        return []
    ids = results[0].source_ids
    out = []
    for k, sid in enumerate(ids):
        est = [r for r in results if r.estimated and r.viable_mask[k]]
        if len(est) < 2:
            if on_insufficient == "raise":
                raise InsufficientHistory(f"source {sid!r} has {len(est)} estimated window(s)")
            continue
        z = np.array([float(r.z_mean[k]) for r in est])
        counts = np.array([include_zero_shortcut or not r.zero_shortcut for r in est], dtype=float)
        tot_z, tot_n = float(np.dot(z, counts)), float(counts.sum())
        for r, zk, ck in zip(est, z, counts):
            n_other = tot_n - ck
            if n_other <= 0:
                continue
            base = (tot_z - zk * ck) / n_other
            out.append(AlertRecord(r.window.id, r.window.start, sid, bool(zk > base), float(zk), float(base)))
    out.sort(key=lambda a: (a.window_start, ids.index(a.source_id)))
    return out


def confusion_metrics(tp: int, fp: int, fn: int, tn: int) -> dict:
    """Detection rates from confusion counts; undefined ratios are NaN."""

    def ratio(a, b):
        return a / b if b else float("nan")

    return {"TPR": ratio(tp, tp + fn), "TNR": ratio(tn, tn + fp), "PPV": ratio(tp, tp + fp),
            "NPV": ratio(tn, tn + fn), "accuracy": ratio(tp + tn, tp + fp + fn + tn),
            "TP": tp, "FP": fp, "FN": fn, "TN": tn}


@dataclass
class EvaluationReport:
    table: pd.DataFrame
    errors: pd.DataFrame = field(repr=False, default=None)

    def value(self, metric: str, scope: str = "site") -> float:
        t = self.table
        sel = t[(t["metric"] == metric) & (t["scope"] == scope)]
        if sel.empty:
            raise KeyError((metric, scope))
        return float(sel["value"].iloc[0])


def _truth_matrix(results, truth: pd.DataFrame):
    truth = truth.copy()
    truth["window_start"] = pd.to_datetime(truth["window_start"], utc=True).dt.tz_localize(None)
    ids = results[0].source_ids
    starts = pd.to_datetime([np.datetime64(r.window.start, "ns") for r in results])
    got = set(truth["window_start"])
    want = set(starts)
    if got != want:
        raise ScheduleMismatch(f"truth covers {len(got)} windows, results {len(want)}; "
                               f"{len(want - got)} result windows missing from truth")
    unknown = set(truth["source_id"]) - set(ids)
    if unknown or set(ids) - set(truth["source_id"]):
        raise ScheduleMismatch("truth and results name different sources")
    piv = truth.pivot_table(index="window_start", columns="source_id", values="rate_kghr", aggfunc="first")
    return piv.loc[starts, list(ids)].to_numpy(float)


def evaluate(results: Sequence[WindowResult], truth: pd.DataFrame, decision: str = "alert") -> EvaluationReport:
    """Compare estimates with a truth schedule (``window_start, source_id, rate_kghr``).

    A source is truly emitting when its true rate is positive. The estimated
    state is the alert decision (``decision="alert"``) or ``z_mean > 0.5``
    (``decision="z"``). Source-level scores use the windows where the source was
    estimated; site-level scores (site emitting iff any source emits) and site
    rate errors use windows where every source was estimated. Coverage is the
    share of estimated (window, source) pairs, or full-information windows for
    the site, whose credible interval contains the true rate.
    """
    results = sorted(results, key=lambda r: r.window.start)
    if not results:
        return EvaluationReport(pd.DataFrame(columns=["metric", "scope", "value"]),
                                pd.DataFrame(columns=["window_start", "scope", "estimate", "truth", "error"]))
    ids = results[0].source_ids
    T = _truth_matrix(results, truth)
    n_w, p = T.shape
    est_mask = np.array([[r.estimated and bool(r.viable_mask[k]) for k in range(p)] for r in results])
    if decision == "alert":
        alerts = generate_alerts(results, on_insufficient="skip")
        D = np.zeros((n_w, p), dtype=bool)
        has_decision = np.zeros((n_w, p), dtype=bool)
        pos = {r.window.id: j for j, r in enumerate(results)}
        for a in alerts:
            j, k = pos[a.window_id], ids.index(a.source_id)
            D[j, k] = a.emitting
            has_decision[j, k] = True
    elif decision == "z":
        Z = np.array([r.z_mean for r in results])
        D = np.nan_to_num(Z) > 0.5
        has_decision = est_mask
    else:
        raise ValueError("decision must be 'alert' or 'z'")
    truth_on = T > 0

    rows = []
    err_rows = []

    def add(scope, tp, fp, fn, tn, n_excl):
        for k, v in confusion_metrics(tp, fp, fn, tn).items():
            rows.append((k, scope, float(v)))
        rows.append(("n_evaluated", scope, float(tp + fp + fn + tn)))
        rows.append(("n_excluded", scope, float(n_excl)))

    rate = np.array([r.rate_kghr for r in results])
    lo = np.array([r.ci_low for r in results])
    hi = np.array([r.ci_high for r in results])
    for k, sid in enumerate(ids):
        sel = has_decision[:, k]
        d, t = D[sel, k], truth_on[sel, k]
        add(sid, int(np.sum(d & t)), int(np.sum(d & ~t)), int(np.sum(~d & t)), int(np.sum(~d & ~t)),
            int(n_w - sel.sum()))
        e = est_mask[:, k]
        if e.any():
            err = rate[e, k] - T[e, k]
            cov = (lo[e, k] <= T[e, k]) & (T[e, k] <= hi[e, k])
            rows += [("coverage", sid, float(cov.mean())), ("rate_error_mean", sid, float(err.mean()))]
            for j in np.flatnonzero(e):
                err_rows.append((results[j].window.start, sid, rate[j, k], T[j, k], rate[j, k] - T[j, k]))

    full = est_mask.all(axis=1)
    site_dec = has_decision.all(axis=1)
    d, t = D[site_dec].any(axis=1), truth_on[site_dec].any(axis=1)
    add("site", int(np.sum(d & t)), int(np.sum(d & ~t)), int(np.sum(~d & t)), int(np.sum(~d & ~t)),
        int(n_w - site_dec.sum()))
    if full.any():
        site_est = np.array([r.site_rate_kghr for r in results])[full]
        site_true = T[full].sum(axis=1)
        site_lo = np.array([r.site_ci[0] for r in results])[full]
        site_hi = np.array([r.site_ci[1] for r in results])[full]
        err = site_est - site_true
        rows += [("coverage", "site", float(np.mean((site_lo <= site_true) & (site_true <= site_hi)))),
                 ("rate_error_mean", "site", float(err.mean())),
                 ("rate_error_median", "site", float(np.median(err))),
                 ("rate_error_p2.5", "site", float(np.percentile(err, 2.5))),
                 ("rate_error_p97.5", "site", float(np.percentile(err, 97.5))),
                 ("rate_error_iqr", "site", float(np.subtract(*np.percentile(err, [75, 25]))))]
        for j, se, st, e in zip(np.flatnonzero(full), site_est, site_true, err):
            err_rows.append((results[j].window.start, "site", float(se), float(st), float(e)))
    table = pd.DataFrame(rows, columns=["metric", "scope", "value"])
    errors = pd.DataFrame(err_rows, columns=["window_start", "scope", "estimate", "truth", "error"])
    return EvaluationReport(table, errors)


def error_histogram(errors: pd.DataFrame, scope: str = "site", bins: int = 30) -> pd.DataFrame:
    """Histogram of rate errors for plotting: ``bin_low, bin_high, count``."""
    e = errors.loc[errors["scope"] == scope, "error"].to_numpy(float)
    counts, edges = np.histogram(e, bins=bins)
    return pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:], "count": counts})


def inventory_frame(report: InventoryReport) -> pd.DataFrame:
    cols = ["source_id", "total_t", "ci_low_t", "ci_high_t", "n_windows_estimated", "n_windows_imputed"]
    site = pd.DataFrame([{"source_id": "SITE", "total_t": report.site_total_t, "ci_low_t": report.site_ci_t[0],
                          "ci_high_t": report.site_ci_t[1],
                          "n_windows_estimated": np.nan, "n_windows_imputed": np.nan}])
    if report.table.empty:
        return site[cols]
    return pd.concat([report.table[cols], site], ignore_index=True)


def alerts_frame(alerts: Sequence[AlertRecord]) -> pd.DataFrame:
    return pd.DataFrame([{"window_start": str(a.window_start), "source_id": a.source_id,
                          "emitting": a.emitting, "z_mean": a.z_mean} for a in alerts],
                        columns=["window_start", "source_id", "emitting", "z_mean"])
