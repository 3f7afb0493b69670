"""Sample quantile partial correlation (QPC) of a candidate given a conditioning set."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._backend import get_kernels
from .errors import DegeneratePredictor, NotConverged, RankDeficient
from .numeric import Dataset
from .quantreg import DEFAULT_MAXIT, DEFAULT_TOL, validate_tau

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class QpcValue:
    value: float
    numerator: float
    sigma2: float
    alpha_hat: np.ndarray  # quantile fit of y on [1, X_S]
    theta_hat: np.ndarray  # OLS fit of x_j on [1, X_S]


def plugin_bound(tau: float) -> float:
    """Cauchy-Schwarz bound on |sample QPC|."""
    return float(np.sqrt(max(tau, 1 - tau) / min(tau, 1 - tau)))


def _index(S: Iterable[int]) -> np.ndarray:
    return np.asarray(list(S), dtype=np.int64).reshape(-1)


def _raise_for(status: int, kern, what: str):
    if status == kern.RANK_DEFICIENT:
        raise RankDeficient(f"{what}: conditioning design is rank deficient")
    if status == kern.NOT_CONVERGED:
        raise NotConverged(DEFAULT_MAXIT, f"{what}: quantile fit did not converge")
    if status == kern.DEGENERATE:
        raise DegeneratePredictor(f"{what}: candidate is explained by its conditioning set")


def sample_qpc(dataset: Dataset, j: int, S: Sequence[int] = (), tau: float = 0.5) -> QpcValue:
    """Sample QPC of column ``j`` with the response, given columns ``S``.

    The numerator averages psi_tau(y - [1, X_S] alpha_hat) times the OLS residual
    of x_j on [1, X_S]; it is normalized by sqrt(tau (1 - tau) sigma2).
    """
    tau = validate_tau(tau)
    cond = _index(S)
    if j in set(cond.tolist()):
        raise ValueError(f"candidate {j} is a member of its own conditioning set")
    if len(set(cond.tolist())) != cond.size:
        raise ValueError("conditioning set has duplicates")
    if cond.size + 1 >= dataset.n:
        raise ValueError("conditioning set too large for the sample size")
    kern = get_kernels()
    vals, numer, s2, st, alpha, theta, _ = kern.qpc_shared(
        dataset.X, dataset.y, tau, cond, np.array([j], dtype=np.int64),
        DEFAULT_TOL, DEFAULT_MAXIT, DEGENERATE_TOL,
    )
    _raise_for(int(st[0]), kern, f"candidate {j}")
    return QpcValue(value=float(vals[0]), numerator=float(numer[0]), sigma2=float(s2[0]),
                    alpha_hat=np.asarray(alpha), theta_hat=np.asarray(theta[:, 0]))


@dataclass(frozen=True)
class ScreenScores:
    """|QPC| per candidate; failed candidates are listed with a reason and no score."""

    scores: dict
    failures: dict

    def argmax(self) -> int | None:
        # ties go to the smallest column index
        best, best_val = None, -np.inf
        for j in sorted(self.scores):
            if self.scores[j] > best_val:
                best, best_val = j, self.scores[j]
        return best


_REASONS = {1: "RankDeficient", 2: "NotConverged", 3: "DegeneratePredictor"}


def _collect(cands: np.ndarray, values: np.ndarray, status: np.ndarray) -> ScreenScores:
    scores, failures = {}, {}
    for j, v, s in zip(cands.tolist(), values.tolist(), status.tolist()):
        if s == 0:
            scores[j] = abs(v)
        else:
            failures[j] = _REASONS[s]
    return ScreenScores(scores, failures)


def qpc_screen_scores(dataset: Dataset, candidates: Iterable[int], S: Sequence[int] = (),
                      tau: float = 0.5) -> ScreenScores:
    """|sample QPC| for every candidate against one shared conditioning set.

    The quantile fit on S is computed once and reused for all candidates.
    """
    tau = validate_tau(tau)
    cond = _index(S)
    cands = _index(candidates)
    if set(cands.tolist()) & set(cond.tolist()):
        raise ValueError("candidates must be disjoint from the conditioning set")
    if cands.size == 0:
        return ScreenScores({}, {})
    kern = get_kernels()
    vals, _, _, st, _, _, _ = kern.qpc_shared(
        dataset.X, dataset.y, tau, cond, cands, DEFAULT_TOL, DEFAULT_MAXIT, DEGENERATE_TOL
    )
    return _collect(cands, vals, st)


def qpc_scores_per_candidate(dataset: Dataset, candidates: Sequence[int],
                             cond_sets: Sequence[Sequence[int]], tau: float) -> ScreenScores:
    """|sample QPC| where each candidate carries its own conditioning set."""
    cands = _index(candidates)
    if cands.size == 0:
        return ScreenScores({}, {})
    width = max(1, max(len(c) for c in cond_sets))
    mat = np.full((cands.size, width), -1, dtype=np.int64)
    lens = np.zeros(cands.size, dtype=np.int64)
    for r, c in enumerate(cond_sets):
        mat[r, : len(c)] = list(c)
        lens[r] = len(c)
    kern = get_kernels()
    vals, st = kern.qpc_per_candidate(
        dataset.X, dataset.y, validate_tau(tau), mat, lens, cands,
        DEFAULT_TOL, DEFAULT_MAXIT, DEGENERATE_TOL,
    )
    return _collect(cands, vals, st)
