"""Dense linear-algebra primitives: datasets, OLS residualization, correlation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._backend import get_kernels
from .errors import DegenerateColumn, RankDeficient

_VAR_TOL = 1e-14


@dataclass(frozen=True)
class Dataset:
    """Aligned response ``y`` (n,) and predictor panel ``X`` (n, p)."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        # private copies, so freezing them never touches the caller's arrays
        y = np.array(self.y, dtype=float, order="C").reshape(-1)
        X = np.array(self.X, dtype=float, order="C")
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X must be (n, p) with n = len(y); got {X.shape} and {y.shape}")
        n, p = X.shape
        if n < 2 or p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("y and X must be finite")
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError(f"expected {p} names, got {len(names)}")
        if len(set(names)) != p:
            raise ValueError("column names must be unique")
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class OlsFit:
    theta: np.ndarray  # intercept first, then one slope per conditioning column
    residuals: np.ndarray
    sigma2: float


def _as_index(idx: Sequence[int]) -> np.ndarray:
    return np.asarray(list(idx), dtype=np.int64).reshape(-1)


def ols_fit(dataset: Dataset, target_col: int, cond_set: Sequence[int] = ()) -> OlsFit:
    """Least-squares fit of column ``target_col`` on an intercept plus ``cond_set``.

    ``sigma2`` is the mean squared residual (divide by n).
    """
    cond = _as_index(cond_set)
    if target_col in set(cond.tolist()):
        raise ValueError("target_col must not be in cond_set")
    k = get_kernels()
    slopes, icpt, R, s2, ok = k.ols_many(
        np.ascontiguousarray(dataset.X[:, cond]),
        np.ascontiguousarray(dataset.X[:, [target_col]]),
        1e-10,
    )
    if not ok:
        raise RankDeficient(f"conditioning columns {cond.tolist()} are collinear")
    theta = np.concatenate([[icpt[0]], slopes[:, 0]])
    return OlsFit(theta=theta, residuals=R[:, 0].copy(), sigma2=float(s2[0]))


def pearson_corr(x_a: np.ndarray, x_b: np.ndarray) -> float:
    a = np.asarray(x_a, dtype=float)
    b = np.asarray(x_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    a = a - a.mean()
    b = b - b.mean()
    va = float(a @ a) / a.size
    vb = float(b @ b) / b.size
    if va <= _VAR_TOL or vb <= _VAR_TOL:
        raise DegenerateColumn("zero-variance vector in correlation")
    r = float(a @ b) / a.size / np.sqrt(va * vb)
    return min(1.0, max(-1.0, r))


def abs_corr_matrix(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absolute Pearson correlations between all columns of ``X``.

    Zero-variance columns get correlation 0 with everything; the second return
    value flags them.
    """
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    var = (Xc * Xc).mean(axis=0)
    degenerate = var <= _VAR_TOL
    sd = np.sqrt(np.where(degenerate, 1.0, var))
    Z = Xc / sd
    Z[:, degenerate] = 0.0
    R = np.abs(Z.T @ Z) / X.shape[0]
    np.clip(R, 0.0, 1.0, out=R)
    return R, degenerate


def standardize(dataset: Dataset) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Center and scale every predictor column to mean 0, sd 1 (divide-by-n sd).

    Returns the new dataset and the per-column (means, sds) used.
    """
    X = dataset.X
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    bad = np.flatnonzero(sds**2 <= _VAR_TOL)
    if bad.size:
        raise DegenerateColumn(f"constant column(s): {[dataset.names[j] for j in bad]}")
    return Dataset(dataset.y, (X - means) / sds, dataset.names), means, sds


def destandardize(dataset: Dataset, means: np.ndarray, sds: np.ndarray) -> Dataset:
    return Dataset(dataset.y, dataset.X * sds + means, dataset.names)
