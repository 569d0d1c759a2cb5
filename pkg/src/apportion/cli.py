"""Command-line entry point: ``apportion {simulate,invert,report,simstudy}``.

Every command writes into ``--out`` and leaves a ``manifest.json`` recording
the resolved configuration, its hash, input and output digests, the master
seed and library versions. Exit codes: 0 success, 1 runtime failure (output
directory locked, every window failed), 2 configuration error, 3 data error,
4 truth schedule does not match the results.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from . import io as aio
from .config import ConfigError, RunConfig, load_config
from .forward import MissingWind, build_design_matrix
from .pipeline import STATUS_SKIPPED, PrecomputedInputs, SiteInputs, partition_windows, run_deployment
from .preprocess import ConcentrationSeries, aggregate_wind, background_removed
from .reporting import (ScheduleMismatch, alerts_frame, build_inventory, error_histogram, evaluate,
                        generate_alerts, inventory_frame)
from .scenario import build_scenario, split_anemometers
from .simstudy import run_bias_sweep, simulate_windows, truth_frame
from .site import MINUTE, TimeWindow, as_time

log = logging.getLogger("apportion")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_SCHEDULE = 0, 1, 2, 3, 4
LOCK_NAME = ".apportion.lock"
MANIFEST = "manifest.json"


class Locked(RuntimeError):
    pass


class RunFailed(RuntimeError):
    pass


class KeyValueFormatter(logging.Formatter):
    """``ts=... level=... logger=... <message>``; messages are already key=value."""

    def format(self, record):
        ts = dt.datetime.fromtimestamp(record.created, dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        msg = record.getMessage()
        if "=" not in msg.split(" ", 1)[0]:
            msg = "msg=" + json.dumps(msg)
        return f"ts={ts} level={record.levelname.lower()} logger={record.name} {msg}"


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    root = logging.getLogger()
    for h in list(root.handlers):
        if isinstance(h.formatter, KeyValueFormatter):
            root.removeHandler(h)
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper()))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"apportion": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive lock on ``out``; a lock left by a dead process is taken over."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise Locked(f"output directory {out} is in use by process {pid}") from None
            log.warning("event=stale_lock_removed path=%s pid=%s", path, pid)
            path.unlink(missing_ok=True)
    else:  # pragma: no cover
        raise Locked(f"could not lock {out}")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class Manifest:
    def __init__(self, out: Path, command: str, cfg: RunConfig, argv: Sequence[str]):
        self.out = out
        self.doc = {"command": command, "argv": list(argv), "config": cfg.resolved(),
                    "config_hash": cfg.digest(), "master_seed": cfg.seed, "jobs": cfg.jobs,
                    "versions": _versions(), "inputs": {}, "outputs": {},
                    "started": _now(), "finished": None, "status": "running"}

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.doc["inputs"][str(path)] = sha256_file(path)

    def finish(self, status: str = "ok", **extra) -> None:
        outs = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name not in (MANIFEST, LOCK_NAME):
                outs[str(p.relative_to(self.out))] = sha256_file(p)
        self.doc.update(outputs=outs, finished=_now(), status=status, **extra)
        self.write()

    def write(self) -> None:
        tmp = self.out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.doc, indent=1, sort_keys=True, default=str))
        os.replace(tmp, self.out / MANIFEST)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _required(cfg: RunConfig, key: str) -> Path:
    p = cfg.path(key)
    if p is None:
        raise ConfigError(f"[data] {key} is required")
    return p


def _load_site(cfg: RunConfig, manifest: Manifest, need_conc: bool = True):
    """Sources, sensors, site wind and background-removed series from ``[data]`` files."""
    paths = {k: _required(cfg, k) for k in ("sources", "sensors", "wind")}
    if need_conc:
        paths["concentrations"] = _required(cfg, "concentrations")
    for p in paths.values():
        if not p.is_file():
            raise aio.DataError(f"missing input file: {p}")
        manifest.add_input(p)
    sources = aio.read_sources(paths["sources"])
    sensors = aio.read_sensors(paths["sensors"])
    winds = aggregate_wind(aio.read_wind(paths["wind"]))
    if not winds:
        raise aio.DataError(f"{paths['wind']}: no wind records")
    series = []
    if need_conc:
        pp = cfg.preprocess()
        series = aio.read_concentrations(paths["concentrations"])
        if not cfg.background_removed:
            series = [background_removed(s, pp["grad_threshold"], pp["merge_gap"], pp["flank"]) for s in series]
    return sources, sensors, winds, series


def _design_inputs(cfg: RunConfig, manifest: Manifest) -> PrecomputedInputs:
    d = cfg.path("design_dir")
    if not d.is_dir():
        raise aio.DataError(f"missing design directory: {d}")
    files = sorted(d.glob("X_*.csv"))
    if not files:
        raise aio.DataError(f"{d}: no X_*.csv design files")
    data, ids = {}, None
    for f in files:
        manifest.add_input(f)
        X, y = aio.read_design_matrix(f)
        if y is None:
            raise aio.DataError(f"{f}: design file has no y column")
        if ids is None:
            ids = tuple(X.source_ids)
        elif tuple(X.source_ids) != ids:
            raise aio.DataError(f"{f}: source columns differ from {files[0].name}")
        w = TimeWindow(X.layout.minutes[0], X.layout.minutes[-1] + MINUTE)
        data[w.id] = (y, X)
    return PrecomputedInputs(ids, data)


# simulate -------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    sim = cfg.sim()
    wdir = out / "windows"
    wdir.mkdir(exist_ok=True)
    if "scenario" in cfg.raw:
        sc = cfg.scenario()
        scen = build_scenario(sc, sim)
        truths = scen.truths(sc.noise_sd, sc.noise_r)
        inputs = simulate_windows(scen.designs, truths, 0.0, cfg.seed)
        for w, X in zip(scen.windows, scen.designs):
            y, _ = inputs.data[w.id]
            aio.write_design_matrix(wdir / f"X_{w.id}.csv", X, y)
        geo = scen.geometry
        aio.write_sources(out / "sources.csv", geo.sources)
        aio.write_sensors(out / "sensors.csv", geo.sensors)
        aio.write_wind(out / "wind.csv", split_anemometers(scen.winds, geo.sensors, seed=cfg.seed))
        aio.write_concentrations(out / "concentrations.csv", _series_from_windows(inputs, scen.windows))
        truth_frame(scen.designs, truths).assign(
            window_start=lambda d: d["window_start"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        ).to_csv(out / "truth.csv", index=False, float_format="%.17g")
        n = len(scen.windows)
    else:
        sources, sensors, winds, series = _load_site(cfg, manifest, need_conc=cfg.path("concentrations") is not None)
        if series:
            span = SiteInputs(sources, sensors, winds, series).span()
        else:
            span = (as_time(winds[0].timestamp), as_time(winds[-1].timestamp) + MINUTE)
        pl = cfg.pipeline()
        windows = partition_windows(span[0], span[1], pl.window_len, pl.offset_minutes)
        n = 0
        for w in windows:
            try:
                X = build_design_matrix(sources, sensors, winds, w, sim)
            except MissingWind as exc:
                log.warning("event=window_skipped window=%s reason=%s", w.start, json.dumps(str(exc)))
                continue
            aio.write_design_matrix(wdir / f"X_{w.id}.csv", X)
            n += 1
    log.info("event=simulate_done windows=%d out=%s", n, out)
    manifest.finish(windows=n)
    return EXIT_OK


def _series_from_windows(inputs: PrecomputedInputs, windows):
    per = {}
    for w in windows:
        y, X = inputs.data[w.id]
        l = X.layout.l
        for k, sid in enumerate(X.layout.sensor_ids):
            ts, vs = per.setdefault(sid, ([], []))
            ts.append(X.layout.minutes)
            vs.append(y[k * l:(k + 1) * l])
    return [ConcentrationSeries(sid, np.concatenate(ts), np.concatenate(vs)) for sid, (ts, vs) in per.items()]


# invert ---------------------------------------------------------------------

def cmd_invert(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    pl = cfg.pipeline()
    if cfg.path("design_dir") is not None:
        inputs = _design_inputs(cfg, manifest)
        windows = inputs.windows()
    else:
        sources, sensors, winds, series = _load_site(cfg, manifest)
        try:
            inputs = SiteInputs(sources, sensors, winds, series, cfg.sim(), cfg.preprocess()["max_missing_frac"])
            start, end = inputs.span()
        except ValueError as exc:
            raise aio.DataError(str(exc)) from None
        windows = partition_windows(start, end, pl.window_len, pl.offset_minutes)
    if not windows:
        raise aio.DataError("deployment is shorter than one window")

    edir = out / "windows"
    edir.mkdir(exist_ok=True)
    done = {}
    if args.resume:
        prev = _previous_manifest(out)
        if prev is not None and prev.get("config_hash") != manifest.doc["config_hash"]:
            raise ConfigError("--resume with a different configuration than the interrupted run")
        for f in edir.glob("window_*.json"):
            e = json.loads(f.read_text())
            done[int(e["window_id"])] = e
        log.info("event=resume completed=%d", len(done))
    else:
        for f in list(edir.glob("window_*.json")) + list(edir.glob("draws_*.csv")):
            f.unlink()
    manifest.write()

    todo = [w for w in windows if w.id not in done]

    def checkpoint(res):
        entry = aio.write_window_result(edir, res)
        tmp = edir / f"window_{res.window.id}.json.tmp"
        tmp.write_text(json.dumps(entry, sort_keys=True))
        os.replace(tmp, edir / f"window_{res.window.id}.json")
        done[res.window.id] = entry
        site = res.site_rate_kghr
        log.info("event=window window=%s status=%s viable=%d site_rate_kghr=%s progress=%d/%d",
                 aio.iso_time(res.window.start), res.status, int(np.sum(res.viable_mask)),
                 "nan" if not np.isfinite(site) else f"{site:.4g}", len(done), len(windows))

    run_deployment(inputs, pl, todo, on_result=checkpoint)
    entries = [done[w.id] for w in windows]
    results = [aio.result_from_entry(e, edir, load_draws=False) for e in entries]
    doc = {"meta": {"config_hash": manifest.doc["config_hash"], "master_seed": cfg.seed},
           "windows": [dict(e, draws=None if e["draws"] is None else f"windows/{e['draws']}") for e in entries]}
    (out / "results.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    aio.results_frame(results).to_csv(out / "results.csv", index=False, float_format="%.17g")
    n_fail = sum(r.status == STATUS_SKIPPED for r in results)
    status = "ok" if n_fail < len(results) else "failed"
    manifest.finish(status, windows=len(results), failed_windows=n_fail)
    log.info("event=invert_done windows=%d failed=%d", len(results), n_fail)
    if n_fail == len(results):
        raise RunFailed("every window failed")
    return EXIT_OK


def _previous_manifest(out: Path) -> Optional[dict]:
    p = out / MANIFEST
    if not p.is_file():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        return None


# report ---------------------------------------------------------------------

def cmd_report(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    src = Path(args.results)
    if not src.exists():
        raise aio.DataError(f"missing results archive: {src}")
    path = src / "results.json" if src.is_dir() else src
    manifest.add_input(path)
    results = aio.read_results_archive(src, load_draws=True)
    rc = cfg.report()
    truth_path = Path(args.truth) if args.truth else cfg.path("truth")
    truth = None
    if truth_path is not None:
        if not truth_path.is_file():
            raise aio.DataError(f"missing truth file: {truth_path}")
        manifest.add_input(truth_path)
        truth = pd.read_csv(truth_path)
        missing = {"window_start", "source_id", "rate_kghr"} - set(truth.columns)
        if missing:
            raise aio.DataError(f"{truth_path}: missing column(s) {sorted(missing)}")

    inv = build_inventory(results, n_replicates=int(rc["n_replicates"]), seed=int(rc["seed"]),
                          level=float(rc["level"]), on_non_estimable="flag")
    inventory_frame(inv).to_csv(out / "inventory.csv", index=False, float_format="%.17g")
    alerts = generate_alerts(results, on_insufficient="skip") if results else []
    alerts_frame(alerts).to_csv(out / "alerts.csv", index=False)
    if truth is None:
        log.info("event=evaluation_skipped reason=no_truth_file")
    else:
        ev = evaluate(results, truth, decision=rc["decision"])
        ev.table.to_csv(out / "evaluation.csv", index=False, float_format="%.17g")
        ev.errors.to_csv(out / "errors.csv", index=False, float_format="%.17g")
        if len(ev.errors):
            error_histogram(ev.errors, "site").to_csv(out / "error_histogram.csv", index=False)
    manifest.finish(windows=len(results))
    log.info("event=report_done windows=%d site_total_t=%s", len(results), inv.site_total_t)
    return EXIT_OK


# simstudy -------------------------------------------------------------------

def cmd_simstudy(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    sc = cfg.scenario()
    sim_kw = cfg.section("simstudy")
    scen = build_scenario(sc, cfg.sim())
    truths = scen.truths(float(sim_kw.get("noise_sd", sc.noise_sd)), float(sim_kw.get("noise_r", sc.noise_r)))
    rep = run_bias_sweep(scen.designs, truths, cfg.ms(), cfg.pipeline(), seed=cfg.seed)
    rep.summary.to_csv(out / "sweep.csv", index=False, float_format="%.17g")
    rep.records.to_csv(out / "records.csv", index=False, float_format="%.17g")
    trends = rep.trends() if len(cfg.ms()) > 1 and len(rep.records) else {}
    (out / "trends.json").write_text(json.dumps(trends, indent=1, sort_keys=True))
    manifest.finish(levels=list(cfg.ms()))
    log.info("event=simstudy_done levels=%d rows=%d", len(cfg.ms()), len(rep.summary))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "invert": cmd_invert, "report": cmd_report, "simstudy": cmd_simstudy}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apportion", description="Emission source apportionment from point-sensor data.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master seed (overrides APPORTION_SEED and the config)")
    common.add_argument("--jobs", type=int, help="parallel worker processes (overrides APPORTION_JOBS)")
    common.add_argument("--resume", action="store_true", help="skip windows completed by an interrupted run")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="build design matrices (and synthetic data)")
    sub.add_parser("invert", parents=[common], help="estimate per-window emission rates")
    r = sub.add_parser("report", parents=[common], help="inventories, alerts and evaluation")
    r.add_argument("results", help="results directory or results.json written by invert")
    r.add_argument("--truth", help="CSV with window_start, source_id, rate_kghr")
    sub.add_parser("simstudy", parents=[common], help="misalignment sweep on synthetic data")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed, args.jobs, os.environ)
        with output_lock(out):
            manifest = Manifest(out, args.command, cfg, argv)
            if args.config:
                manifest.add_input(args.config)
            return COMMANDS[args.command](args, cfg, out, manifest)
    except ConfigError as exc:
        log.error("event=config_error error=%s", json.dumps(str(exc)))
        return EXIT_CONFIG
    except aio.DataError as exc:
        log.error("event=data_error error=%s", json.dumps(str(exc)))
        return EXIT_DATA
    except ScheduleMismatch as exc:
        log.error("event=schedule_mismatch error=%s", json.dumps(str(exc)))
        return EXIT_SCHEDULE
    except (Locked, RunFailed) as exc:
        log.error("event=run_failed error=%s", json.dumps(str(exc)))
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
