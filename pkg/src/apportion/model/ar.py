"""AR(1) whitening through the tridiagonal precision matrix.

For a unit-variance AR(1) block of length ``l`` with coefficient ``r``,

    (1 - r^2) R^{-1} = (1 + r^2) I - r^2 E - r S

where ``E`` marks the two block endpoints and ``S`` the first off-diagonals.
Any quadratic form ``u' R^{-1} v`` is therefore a fixed combination of three
lag sums of ``u`` and ``v`` that do not depend on ``r``. :class:`LagSums`
precomputes them once per window so that re-evaluating the forms at a new
``r`` costs ``O(p^2)``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

AR_STRUCTURES = ("block", "full")


def block_lengths(n: int, ar_structure: str = "block", block_len: int | None = None) -> list[int]:
    """Lengths of the independent AR(1) blocks covering ``n`` entries."""
    if ar_structure not in AR_STRUCTURES:
        raise ValueError(f"ar_structure must be one of {AR_STRUCTURES}")
    if ar_structure == "full" or block_len is None:
        return [n] if n else []
    if block_len <= 0 or n % block_len:
        raise ValueError(f"n={n} is not a multiple of block length {block_len}")
    return [block_len] * (n // block_len)


def ar_logdet(r: float, lengths: Sequence[int]) -> float:
    """``log det R`` for independent unit-variance AR(1) blocks."""
    if r == 0.0:
        return 0.0
    return sum(l - 1 for l in lengths) * math.log1p(-r * r)


def ar_correlation(r: float, lengths: Sequence[int]) -> np.ndarray:
    """Dense block-diagonal AR(1) correlation matrix (for checks and small problems)."""
    n = sum(lengths)
    R = np.zeros((n, n))
    off = 0
    for l in lengths:
        idx = np.arange(l)
        R[off:off + l, off:off + l] = r ** np.abs(idx[:, None] - idx[None, :])
        off += l
    return R


class LagSums:
    """Lag sums of the columns of ``Z`` over AR(1) blocks.

    ``S0 = Z'Z``; ``Send`` sums outer products of each block's first and last
    rows (a length-one block counts twice); ``S1`` sums symmetrised outer
    products of within-block neighbours.
    """

    def __init__(self, Z: np.ndarray, lengths: Sequence[int]):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if sum(lengths) != Z.shape[0]:
            raise ValueError("block lengths do not cover the rows of Z")
        self.lengths = list(lengths)
        self.S0 = Z.T @ Z
        k = Z.shape[1]
        self.Send = np.zeros((k, k))
        self.S1 = np.zeros((k, k))
        off = 0
        for l in self.lengths:
            first, last = Z[off], Z[off + l - 1]
            self.Send += np.outer(first, first) + np.outer(last, last)
            if l > 1:
                blk = Z[off:off + l]
                c = blk[:-1].T @ blk[1:]
                self.S1 += c + c.T
            off += l

    def precision_form(self, r: float) -> np.ndarray:
        """``Z' R^{-1} Z`` at coefficient ``r``."""
        if not 0.0 <= r < 1.0:
            raise ValueError("r must lie in [0, 1)")
        r2 = r * r
        return ((1.0 + r2) * self.S0 - r2 * self.Send - r * self.S1) / (1.0 - r2)

    def logdet(self, r: float) -> float:
        return ar_logdet(r, self.lengths)


def whitened_quadratics(y, X, r: float, ar_structure: str = "block", block_len: int | None = None):
    """Return ``(X'R^{-1}X, X'R^{-1}y, y'R^{-1}y, log det R)``.

    ``block_len`` is the per-sensor series length; it is required for the
    block structure and ignored for ``"full"``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    if ar_structure == "block" and block_len is None:
        raise ValueError("block structure needs block_len")
    lengths = block_lengths(len(y), ar_structure, block_len)
    Q = LagSums(np.column_stack([X, y]), lengths).precision_form(r)
    p = X.shape[1]
    return Q[:p, :p], Q[:p, p], float(Q[p, p]), ar_logdet(r, lengths)
