"""Metropolis-within-Gibbs sampler for one inversion window."""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .conditionals import (mh_update_nu, mh_update_r, update_beta_z, update_sigma2, update_tau2,
                           update_theta)
from .state import Hyperparams, Quadratics, SamplerConfig, WindowData, initial_state

# g/s -> kg/hr
KG_HR_PER_G_S = 3.6


class EmptyDraws(ValueError):
    """No retained draws to summarise."""


@dataclass
class PosteriorDraws:
    """Retained draws, one row per kept iteration. ``beta`` is in units of ``q`` g/s."""

    beta: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    nu: np.ndarray
    r: np.ndarray
    accept_nu: float = float("nan")
    accept_r: float = float("nan")
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)
    window_id: Optional[int] = None
    source_ids: tuple = ()
    viable_mask: Optional[list] = None
    q: float = 1.0

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def rates_kghr(self) -> np.ndarray:
        return self.beta * (self.q * KG_HR_PER_G_S)

    def metadata(self) -> dict:
        return {
            "seed": self.seed, "config": self.config, "window_id": self.window_id,
            "source_ids": list(self.source_ids),
            "viable_mask": None if self.viable_mask is None else [bool(v) for v in self.viable_mask],
            "q": self.q, "accept_nu": self.accept_nu, "accept_r": self.accept_r,
        }

    def to_frame(self) -> pd.DataFrame:
        cols = {}
        for k, sid in enumerate(self.source_ids):
            cols[f"beta[{sid}]"] = self.beta[:, k]
            cols[f"z[{sid}]"] = self.z[:, k]
            cols[f"theta[{sid}]"] = self.theta[:, k]
            cols[f"tau2[{sid}]"] = self.tau2[:, k]
        cols["sigma2"] = self.sigma2
        cols["nu"] = self.nu
        cols["r"] = self.r
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        """Write draws as CSV preceded by one ``#``-prefixed JSON metadata line."""
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.metadata(), sort_keys=True) + "\n")
        self.to_frame().to_csv(buf, index=False, float_format="%.17g")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        text = Path(path).read_text()
        first, rest = text.split("\n", 1)
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing metadata header")
        meta = json.loads(first[2:])
        df = pd.read_csv(io.StringIO(rest), float_precision="round_trip")
        ids = tuple(meta["source_ids"])

        def block(name, dtype=float):
            if not ids:
                return np.zeros((len(df), 0), dtype=dtype)
            return np.column_stack([df[f"{name}[{sid}]"].to_numpy(dtype) for sid in ids])

        return cls(beta=block("beta"), z=block("z", np.int8), theta=block("theta"), tau2=block("tau2"),
                   sigma2=df["sigma2"].to_numpy(float), nu=df["nu"].to_numpy(float),
                   r=df["r"].to_numpy(float), accept_nu=meta["accept_nu"], accept_r=meta["accept_r"],
                   seed=meta["seed"], config=meta["config"], window_id=meta["window_id"],
                   source_ids=ids, viable_mask=meta["viable_mask"], q=meta["q"])


def _stream_key(sid, index: int, exchangeable: bool) -> int:
    return zlib.crc32(str(sid).encode()) if exchangeable else index


def run_gibbs(window: WindowData, hyper: Hyperparams = Hyperparams(),
              cfg: SamplerConfig = SamplerConfig()) -> PosteriorDraws:
    """Sample the posterior of one window.

    Each sweep updates ``(z_i, beta_i)``, ``theta_i`` and ``tau2_i`` for every
    source, then ``sigma2``, ``nu`` (Metropolis on ``log nu``) and ``r``
    (Metropolis). Iterations before ``burn_in`` are discarded and every
    ``thin``-th draw after it is kept. Identical ``cfg.seed`` gives identical
    draws.
    """
    p = window.p
    if p == 0:
        raise ValueError("window has no viable sources")
    hyper.per_source(p)  # shape check
    ss = np.random.SeedSequence(cfg.seed)
    entropy = int(ss.entropy)
    glob_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=(0,))))
    src_rngs = [np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy, spawn_key=(1, _stream_key(sid, i, cfg.exchangeable)))))
        for i, sid in enumerate(window.source_ids)]
    if cfg.exchangeable:
        order = sorted(range(p), key=lambda i: str(window.source_ids[i]))
    else:
        order = list(range(p))

    state = initial_state(window, hyper, cfg)
    quad = Quadratics(window, cfg.ar_structure)
    quad.set_r(state.r)

    keep = list(range(cfg.burn_in, cfg.iterations, cfg.thin))
    k = len(keep)
    out = {name: np.empty((k, p)) for name in ("beta", "theta", "tau2")}
    out["z"] = np.empty((k, p), dtype=np.int8)
    for name in ("sigma2", "nu", "r"):
        out[name] = np.empty(k)
    n_acc_nu = n_acc_r = 0
    row = 0
    next_keep = keep[0] if keep else -1

    for it in range(cfg.iterations):
        for i in order:
            rng = src_rngs[i]
            z, b = update_beta_z(i, state, quad, hyper, rng, cfg.force_inclusion)
            state.theta[i] = update_theta(i, z, hyper, rng)
            if cfg.fixed_tau2 is None:
                state.tau2[i] = update_tau2(i, z, b, hyper, rng)
        if cfg.fixed_sigma2 is None:
            update_sigma2(state, quad, glob_rng)
        if cfg.fixed_nu is None:
            n_acc_nu += mh_update_nu(state, hyper, glob_rng, cfg.prop_sd_nu)[1]
        if cfg.fixed_r is None:
            n_acc_r += mh_update_r(state, quad, glob_rng, cfg.prop_sd_r)[1]
        if it == next_keep:
            out["beta"][row] = state.beta
            out["z"][row] = state.z
            out["theta"][row] = state.theta
            out["tau2"][row] = state.tau2
            out["sigma2"][row] = state.sigma2
            out["nu"][row] = state.nu
            out["r"][row] = state.r
            row += 1
            next_keep = keep[row] if row < k else -1

    return PosteriorDraws(
        **out,
        accept_nu=n_acc_nu / cfg.iterations if cfg.fixed_nu is None else float("nan"),
        accept_r=n_acc_r / cfg.iterations if cfg.fixed_r is None else float("nan"),
        seed=entropy, config=cfg.to_dict(), window_id=window.window_id,
        source_ids=tuple(window.source_ids), viable_mask=list(map(bool, window.viable_mask)),
        q=window.q)


@dataclass(frozen=True)
class PointEstimate:
    source_ids: tuple
    rate_kghr: np.ndarray
    z_mean: np.ndarray


def point_estimate(draws: PosteriorDraws) -> PointEstimate:
    """Posterior means of the rate (kg/hr) and of the inclusion indicator."""
    if draws.n_draws == 0:
        raise EmptyDraws("no retained draws")
    return PointEstimate(tuple(draws.source_ids), draws.rates_kghr().mean(axis=0),
                         draws.z.mean(axis=0))


def credible_interval(draws: PosteriorDraws, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Equal-tailed interval of the rate (kg/hr) per source."""
    if draws.n_draws == 0:
        raise EmptyDraws("no retained draws")
    lo = 50.0 * (1.0 - level)
    rates = draws.rates_kghr()
    return np.percentile(rates, lo, axis=0), np.percentile(rates, 100.0 - lo, axis=0)
