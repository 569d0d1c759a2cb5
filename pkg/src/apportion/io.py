"""CSV readers and writers for site data, design matrices and window results."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .forward import DesignMatrix
from .model import PosteriorDraws
from .pipeline import WindowResult
from .preprocess import ConcentrationSeries
from .site import Layout, SensorSpec, SourceSpec, TimeWindow, WindRecord

SENSOR_COLUMNS = ["id", "x", "y", "z", "has_anemometer"]
SOURCE_COLUMNS = ["id", "x", "y", "H"]
WIND_COLUMNS = ["timestamp", "sensor_id", "speed_mps", "direction_deg"]
CONC_COLUMNS = ["timestamp", "sensor_id", "methane_ppm"]
RESULT_COLUMNS = ["window_start", "window_end", "source_id", "rate_kghr", "ci_low", "ci_high", "z_mean",
                  "viable", "zero_shortcut"]


class DataError(ValueError):
    """An input file is missing or malformed."""


def _read(path, columns) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input file: {path}")
    try:
        df = pd.read_csv(path, comment=None, float_precision="round_trip")
    except Exception as exc:  # parser errors vary by pandas version
        raise DataError(f"{path}: {exc}") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    return df


def _times(col: pd.Series) -> np.ndarray:
    t = pd.to_datetime(col, utc=True).dt.tz_localize(None)
    return t.to_numpy().astype("datetime64[s]")


def _bool(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "y", "t")
    return bool(v)


def read_sensors(path) -> list[SensorSpec]:
    df = _read(path, SENSOR_COLUMNS[:4])
    has = df["has_anemometer"] if "has_anemometer" in df.columns else [False] * len(df)
    try:
        return [SensorSpec(str(r.id), float(r.x), float(r.y), float(r.z), _bool(h))
                for r, h in zip(df.itertuples(index=False), has)]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def read_sources(path) -> list[SourceSpec]:
    df = _read(path, SOURCE_COLUMNS)
    try:
        return [SourceSpec(str(r.id), float(r.x), float(r.y), float(r.H)) for r in df.itertuples(index=False)]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def read_wind(path) -> dict[str, list[WindRecord]]:
    """Per-anemometer wind streams keyed by sensor id."""
    df = _read(path, WIND_COLUMNS)
    ts = _times(df["timestamp"])
    out = defaultdict(list)
    try:
        for t, sid, s, d in zip(ts, df["sensor_id"].astype(str), df["speed_mps"], df["direction_deg"]):
            out[sid].append(WindRecord(t, float(s), float(d) % 360.0))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return dict(out)


def read_concentrations(path) -> list[ConcentrationSeries]:
    df = _read(path, CONC_COLUMNS)
    df = df.assign(_t=_times(df["timestamp"])).sort_values(["sensor_id", "_t"])
    out = []
    try:
        for sid, g in df.groupby(df["sensor_id"].astype(str), sort=True):
            out.append(ConcentrationSeries(sid, g["_t"].to_numpy(), g["methane_ppm"].to_numpy(float)))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return out


def write_sensors(path, sensors: Sequence[SensorSpec]) -> None:
    pd.DataFrame([{"id": s.id, "x": s.x, "y": s.y, "z": s.z, "has_anemometer": s.has_anemometer}
                  for s in sensors], columns=SENSOR_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def write_sources(path, sources: Sequence[SourceSpec]) -> None:
    pd.DataFrame([{"id": s.id, "x": s.x, "y": s.y, "H": s.H} for s in sources],
                 columns=SOURCE_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def iso_time(t) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def write_wind(path, streams: dict) -> None:
    rows = [{"timestamp": iso_time(w.timestamp), "sensor_id": sid, "speed_mps": w.speed, "direction_deg": w.direction}
            for sid, recs in streams.items() for w in recs]
    pd.DataFrame(rows, columns=WIND_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def write_concentrations(path, series: Sequence[ConcentrationSeries]) -> None:
    rows = [{"timestamp": iso_time(t), "sensor_id": s.sensor_id, "methane_ppm": v}
            for s in series for t, v in zip(s.timestamps, s.values)]
    pd.DataFrame(rows, columns=CONC_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def write_design_matrix(path, X: DesignMatrix, y=None) -> None:
    """One row per (sensor, minute); one column per source, plus ``y`` when given."""
    rows = X.layout.rows()
    df = pd.DataFrame({"sensor_id": [r[0] for r in rows], "timestamp": [iso_time(r[1]) for r in rows]})
    for k, sid in enumerate(X.source_ids):
        df[str(sid)] = X.values[:, k]
    if y is not None:
        df["y"] = np.asarray(y, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"# q={X.q!r}\n")
        df.to_csv(fh, index=False, float_format="%.17g")


def read_design_matrix(path):
    """Inverse of :func:`write_design_matrix`; returns ``(X, y or None)``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input file: {path}")
    with open(path) as fh:
        first = fh.readline()
        q = float(first.split("=", 1)[1]) if first.startswith("# q=") else 1.0
        if not first.startswith("#"):
            fh.seek(0)
        df = pd.read_csv(fh, float_precision="round_trip")
    sensors = tuple(dict.fromkeys(df["sensor_id"].astype(str)))
    ts = _times(df["timestamp"])
    minutes = ts[: len(df) // len(sensors)]
    layout = Layout(sensors, minutes)
    ids = [c for c in df.columns if c not in ("sensor_id", "timestamp", "y")]
    X = DesignMatrix(df[ids].to_numpy(float), tuple(ids), layout, q)
    y = df["y"].to_numpy(float) if "y" in df.columns else None
    return X, y


def results_frame(results: Sequence[WindowResult]) -> pd.DataFrame:
    rows = []
    for r in results:
        for k, sid in enumerate(r.source_ids):
            rows.append({"window_start": iso_time(r.window.start), "window_end": iso_time(r.window.end), "source_id": sid,
                         "rate_kghr": r.rate_kghr[k], "ci_low": r.ci_low[k], "ci_high": r.ci_high[k],
                         "z_mean": r.z_mean[k], "viable": bool(r.viable_mask[k]),
                         "zero_shortcut": r.zero_shortcut})
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def draws_filename(window: TimeWindow) -> str:
    return f"draws_{window.id}.csv"


def write_window_result(directory, res: WindowResult) -> dict:
    """Write a result's draws (if any) and return its archive entry."""
    directory = Path(directory)
    entry = {
        "window_start": iso_time(res.window.start), "window_end": iso_time(res.window.end),
        "window_id": res.window.id, "source_ids": list(res.source_ids),
        "viable_mask": [bool(v) for v in res.viable_mask], "status": res.status,
        "rate_kghr": _nan_list(res.rate_kghr), "ci_low": _nan_list(res.ci_low), "ci_high": _nan_list(res.ci_high),
        "z_mean": _nan_list(res.z_mean), "site_rate_kghr": _nan_scalar(res.site_rate_kghr),
        "site_ci": [_nan_scalar(v) for v in res.site_ci], "sigma2_mean": _nan_scalar(res.sigma2_mean),
        "r_mean": _nan_scalar(res.r_mean), "seed": res.seed, "message": res.message, "draws": None,
    }
    if res.draws is not None:
        name = draws_filename(res.window)
        res.draws.to_csv(directory / name)
        entry["draws"] = name
    return entry


def _nan_list(a):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def _nan_scalar(v):
    return None if v is None or not np.isfinite(v) else float(v)


def _arr(v):
    return np.array([np.nan if x is None else x for x in v], dtype=float)


def result_from_entry(entry: dict, directory=None, load_draws: bool = True) -> WindowResult:
    w = TimeWindow(entry["window_start"], entry["window_end"])
    draws = None
    if load_draws and entry.get("draws") and directory is not None:
        draws = PosteriorDraws.from_csv(Path(directory) / entry["draws"])
    nanf = lambda v: float("nan") if v is None else float(v)  # noqa: E731
    return WindowResult(w, tuple(entry["source_ids"]), np.array(entry["viable_mask"], dtype=bool),
                        _arr(entry["rate_kghr"]), _arr(entry["ci_low"]), _arr(entry["ci_high"]),
                        _arr(entry["z_mean"]), status=entry["status"],
                        site_rate_kghr=nanf(entry["site_rate_kghr"]),
                        site_ci=tuple(nanf(v) for v in entry["site_ci"]), sigma2_mean=nanf(entry["sigma2_mean"]),
                        r_mean=nanf(entry["r_mean"]), seed=entry["seed"], message=entry["message"], draws=draws)


def write_results_archive(directory, results: Sequence[WindowResult], meta: dict | None = None) -> Path:
    """``results.json`` (one entry per window, referencing draw files) plus ``results.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [write_window_result(directory, r) for r in results]
    path = directory / "results.json"
    path.write_text(json.dumps({"meta": meta or {}, "windows": entries}, indent=1, sort_keys=True))
    results_frame(results).to_csv(directory / "results.csv", index=False, float_format="%.17g")
    return path


def read_results_archive(directory, load_draws: bool = True) -> list[WindowResult]:
    directory = Path(directory)
    path = directory / "results.json" if directory.is_dir() else directory
    if not path.is_file():
        raise DataError(f"missing results archive: {path}")
    doc = json.loads(path.read_text())
    return [result_from_entry(e, path.parent, load_draws) for e in doc["windows"]]
