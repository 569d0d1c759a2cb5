"""TOML run configuration mapped onto the module config dataclasses.

Sections and their targets::

    [data]        input file paths (relative to the config file)
    [forward]     forward.SimConfig
    [preprocess]  spike detection and missing-data tolerances
    [pipeline]    pipeline.PipelineConfig scalars
    [sampler]     model.SamplerConfig
    [hyper]       model.Hyperparams
    [scenario]    scenario.ScenarioConfig (synthetic deployments)
    [simstudy]    misalignment levels
    [report]      inventory and evaluation settings
    seed, jobs    top-level master seed and parallelism

Unknown sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .forward import SimConfig
from .model import Hyperparams, SamplerConfig
from .pipeline import PipelineConfig
from .scenario import ScenarioConfig
from .simstudy import DEFAULT_MS


class ConfigError(ValueError):
    """The configuration file is missing, unparsable or inconsistent."""


DATA_KEYS = {"sensors", "sources", "wind", "concentrations", "design_dir", "background_removed", "truth"}
PREPROCESS_KEYS = {"grad_threshold", "merge_gap", "flank", "max_missing_frac"}
PIPELINE_KEYS = {"window_len", "viability_threshold", "nonzero_tol", "offset_minutes", "ci_level", "keep_draws"}
REPORT_KEYS = {"n_replicates", "level", "decision", "seed"}
SIMSTUDY_KEYS = {"Ms", "noise_sd", "noise_r"}
SECTIONS = {"data", "forward", "preprocess", "pipeline", "sampler", "hyper", "scenario", "simstudy", "report"}
TOP_KEYS = {"seed", "jobs"}


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)
    base: Path = Path(".")
    seed: int = 0
    jobs: int = 1

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def path(self, key: str) -> Optional[Path]:
        v = self.raw.get("data", {}).get(key)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base / p

    @property
    def background_removed(self) -> bool:
        return bool(self.raw.get("data", {}).get("background_removed", False))

    def sim(self) -> SimConfig:
        return _build(SimConfig, self.section("forward"), "forward")

    def sampler(self) -> SamplerConfig:
        return _build(SamplerConfig, self.section("sampler"), "sampler")

    def hyper(self) -> Hyperparams:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.section("hyper").items()}
        return _build(Hyperparams, kw, "hyper")

    def preprocess(self) -> dict:
        out = {"grad_threshold": 0.25, "merge_gap": 5, "flank": 5, "max_missing_frac": 0.2}
        out.update(self.section("preprocess"))
        return out

    def pipeline(self) -> PipelineConfig:
        kw = self.section("pipeline")
        return _build(PipelineConfig, dict(kw, sampler=self.sampler(), hyper=self.hyper(), jobs=self.jobs,
                                           master_seed=self.seed), "pipeline")

    def scenario(self) -> ScenarioConfig:
        if "scenario" not in self.raw:
            raise ConfigError("a [scenario] section is required for this command")
        kw = self.section("scenario")
        kw.setdefault("seed", self.seed)
        return _build(ScenarioConfig, kw, "scenario")

    def ms(self) -> tuple:
        ms = self.raw.get("simstudy", {}).get("Ms", DEFAULT_MS)
        try:
            ms = tuple(float(m) for m in ms)
        except (TypeError, ValueError):
            raise ConfigError("simstudy.Ms must be a list of numbers") from None
        if not ms or any(not 0.0 <= m <= 50.0 for m in ms):
            raise ConfigError("simstudy.Ms must be a non-empty list within [0, 50]")
        return ms

    def report(self) -> dict:
        out = {"n_replicates": 1000, "level": 0.95, "decision": "alert", "seed": self.seed}
        out.update(self.section("report"))
        if out["decision"] not in ("alert", "z"):
            raise ConfigError("report.decision must be 'alert' or 'z'")
        return out

    def resolved(self) -> dict:
        """Canonical, fully-defaulted view of the run (excludes parallelism)."""
        out = {"seed": self.seed, "data": self.section("data"), "preprocess": self.preprocess(),
               "forward": _asdict(self.sim()), "sampler": _asdict(self.sampler()),
               "hyper": _asdict(self.hyper()), "report": self.report()}
        pl = _asdict(self.pipeline())
        for k in ("sampler", "hyper", "jobs", "master_seed"):
            pl.pop(k)
        out["pipeline"] = pl
        if "scenario" in self.raw:
            out["scenario"] = _asdict(self.scenario())
        if "simstudy" in self.raw:
            out["simstudy"] = dict(self.section("simstudy"), Ms=list(self.ms()))
        return out

    def digest(self) -> str:
        return config_hash(self.resolved())


def _asdict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d, default=str))


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _build(cls, kw: dict, where: str):
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def _check_keys(raw: dict) -> None:
    for k, v in raw.items():
        if k in TOP_KEYS:
            continue
        if k not in SECTIONS or not isinstance(v, dict):
            raise ConfigError(f"unknown config entry {k!r}")
    allowed = {"data": DATA_KEYS, "preprocess": PREPROCESS_KEYS, "pipeline": PIPELINE_KEYS,
               "report": REPORT_KEYS, "simstudy": SIMSTUDY_KEYS}
    for sec, keys in allowed.items():
        extra = set(raw.get(sec, {})) - keys
        if extra:
            raise ConfigError(f"[{sec}]: unknown key(s) {sorted(extra)}")


def _int(value, name) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None
    return v


def load_config(path=None, seed=None, jobs=None, env=None) -> RunConfig:
    """Read ``path`` (optional) and apply overrides.

    Seed and parallelism resolve as command-line flag, then the
    ``APPORTION_SEED`` / ``APPORTION_JOBS`` environment variables, then the
    file, then the defaults (0 and 1).
    """
    env = {} if env is None else env
    raw, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
    _check_keys(raw)
    s = seed if seed is not None else env.get("APPORTION_SEED", raw.get("seed", 0))
    j = jobs if jobs is not None else env.get("APPORTION_JOBS", raw.get("jobs", 1))
    cfg = RunConfig(raw, base, _int(s, "seed"), _int(j, "jobs"))
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    # build everything once so errors surface before any work starts
    cfg.resolved()
    return cfg
