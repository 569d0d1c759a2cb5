"""Parameter containers for a single inversion window."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..site import Layout
from .ar import AR_STRUCTURES, LagSums, block_lengths


@dataclass(frozen=True)
class Hyperparams:
    """Prior constants. ``a, b, c, d`` may be scalars or length-``p`` sequences."""

    a: float | tuple = 1.0
    b: float | tuple = 1.0
    c: float | tuple = 1.0
    d: float | tuple = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        for name in ("a", "b", "c", "d", "alpha1", "alpha2"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(~(v > 0)):
                raise ValueError(f"hyperparameter {name} must be > 0")

    def per_source(self, p: int) -> dict[str, np.ndarray]:
        out = {}
        for name in ("a", "b", "c", "d"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim == 0:
                v = np.full(p, float(v))
            elif v.shape != (p,):
                raise ValueError(f"hyperparameter {name} has {v.size} entries for {p} sources")
            out[name] = v
        return out

    def subset(self, mask) -> "Hyperparams":
        mask = np.asarray(mask, dtype=bool)
        kw = {}
        for name in ("a", "b", "c", "d"):
            v = np.asarray(getattr(self, name), dtype=float)
            kw[name] = float(v) if v.ndim == 0 else tuple(v[mask])
        return Hyperparams(alpha1=self.alpha1, alpha2=self.alpha2, **kw)


@dataclass
class ModelState:
    beta: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    tau2: np.ndarray
    sigma2: float
    nu: float
    r: float

    def check(self) -> None:
        if np.any((self.z == 0) & (self.beta != 0.0)):
            raise AssertionError("beta must be exactly 0 when z = 0")
        if np.any((self.z == 1) & ~(self.beta > 0.0)):
            raise AssertionError("beta must be > 0 when z = 1")
        if not 0.0 <= self.r < 1.0:
            raise AssertionError("r outside [0, 1)")

    def copy(self) -> "ModelState":
        return ModelState(self.beta.copy(), self.z.copy(), self.theta.copy(), self.tau2.copy(),
                          self.sigma2, self.nu, self.r)


@dataclass
class WindowData:
    """One inversion problem. ``X`` holds only the viable columns."""

    y: np.ndarray
    X: np.ndarray
    layout: Optional[Layout] = None
    source_ids: tuple = ()
    viable_mask: Optional[np.ndarray] = None
    window_id: Optional[int] = None
    q: float = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), -1)
        if not self.source_ids:
            self.source_ids = tuple(f"s{i}" for i in range(self.X.shape[1]))
        if len(self.source_ids) != self.X.shape[1]:
            raise ValueError("source_ids do not match the columns of X")
        if self.viable_mask is None:
            self.viable_mask = np.ones(self.X.shape[1], dtype=bool)
        self.viable_mask = np.asarray(self.viable_mask, dtype=bool)
        if self.layout is not None and self.layout.n != len(self.y):
            raise ValueError("layout size differs from y")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.layout.m if self.layout is not None else 1

    @property
    def l(self) -> int:
        return self.layout.l if self.layout is not None else self.n


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler controls.

    The ``fixed_*`` fields pin a parameter at the given value instead of
    updating it, and ``force_inclusion`` keeps every ``z_i = 1``. These exist
    for ablations (``fixed_r=0``) and for checks against closed-form limits.
    ``exchangeable`` keys random streams and update order on source ids so
    that permuting the columns of ``X`` permutes the output exactly.
    """

    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: Optional[int] = None
    prop_sd_nu: float = 0.5
    prop_sd_r: float = 0.05
    ar_structure: str = "block"
    fixed_sigma2: Optional[float] = None
    fixed_nu: Optional[float] = None
    fixed_r: Optional[float] = None
    fixed_tau2: Optional[float] = None
    force_inclusion: bool = False
    exchangeable: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1:
            raise ValueError("iterations and thin must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.prop_sd_nu <= 0 or self.prop_sd_r <= 0:
            raise ValueError("proposal standard deviations must be > 0")
        if self.ar_structure not in AR_STRUCTURES:
            raise ValueError(f"ar_structure must be one of {AR_STRUCTURES}")
        if self.fixed_r is not None and not 0.0 <= self.fixed_r < 1.0:
            raise ValueError("fixed_r must lie in [0, 1)")
        for name in ("fixed_sigma2", "fixed_nu", "fixed_tau2"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Quadratics:
    """Whitened quadratic forms of one window, refreshed when ``r`` changes."""

    def __init__(self, window: WindowData, ar_structure: str = "block"):
        self.n = window.n
        self.p = window.p
        blen = window.l if ar_structure == "block" else None
        self.lags = LagSums(np.column_stack([window.X, window.y]), block_lengths(self.n, ar_structure, blen))
        self.r = None
        self.set_r(0.0)

    def set_r(self, r: float) -> None:
        if r == self.r:
            return
        Q = self.lags.precision_form(r)
        p = self.p
        self.r = r
        self.G = Q[:p, :p].copy()
        self.h = Q[:p, p].copy()
        self.yQy = float(Q[p, p])
        self.logdet = self.lags.logdet(r)

    def residual_form(self, beta: np.ndarray, r: Optional[float] = None) -> float:
        """``e' R^{-1} e`` with ``e = y - X beta``, at ``r`` (default: current)."""
        if r is None or r == self.r:
            return max(self.yQy - 2.0 * float(self.h @ beta) + float(beta @ self.G @ beta), 0.0)
        w = np.append(-beta, 1.0)
        L = self.lags
        a0, aend, a1 = w @ L.S0 @ w, w @ L.Send @ w, w @ L.S1 @ w
        r2 = r * r
        return max(((1.0 + r2) * a0 - r2 * aend - r * a1) / (1.0 - r2), 0.0)


def initial_state(window: WindowData, hyper: Hyperparams, cfg: SamplerConfig) -> ModelState:
    p = window.p
    hp = hyper.per_source(p)
    theta = hp["a"] / (hp["a"] + hp["b"])
    tau2 = hp["d"] / (hp["c"] + 1.0)
    if cfg.fixed_tau2 is not None:
        tau2 = np.full(p, float(cfg.fixed_tau2))
    sigma2 = float(np.var(window.y)) if window.n > 1 else 1.0
    sigma2 = max(sigma2, 1e-6)
    if cfg.fixed_sigma2 is not None:
        sigma2 = float(cfg.fixed_sigma2)
    nu = 5.0 if cfg.fixed_nu is None else float(cfg.fixed_nu)
    r = 0.1 if cfg.fixed_r is None else float(cfg.fixed_r)
    return ModelState(beta=np.zeros(p), z=np.zeros(p, dtype=np.int8), theta=theta, tau2=tau2,
                      sigma2=sigma2, nu=nu, r=r)
