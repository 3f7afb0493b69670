"""QPCS and QPCFR forward screening with EBIC-based two-step selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (DegenerateColumn, NonPositiveLoss, NotConverged, QpcError,
                     RankDeficient, StalledSelection)
from .numeric import Dataset, abs_corr_matrix, standardize
from .qpc import qpc_scores_per_candidate, qpc_screen_scores
from .quantreg import QrFit, qr_fit, validate_tau

log = logging.getLogger(__name__)

ALGORITHMS = ("QPCS", "QPCFR")


def default_d_star(n: int, c1: float = 1.0) -> int:
    return max(1, int(math.floor(c1 * math.sqrt(n / math.log(n)))))


def default_m_cap(n: int, c2: float = 1.0) -> int:
    return int(math.floor(c2 * math.sqrt(n / math.log(n))))


def default_d_max(n: int) -> int:
    return max(1, int(math.floor(n / math.log(n))))


@dataclass(frozen=True)
class ScreenConfig:
    """Tuning for one screening run; ``None`` fields take the sample-size defaults."""

    tau: float = 0.5
    algorithm: str = "QPCS"
    d_star: int | None = None
    m_cap: int | None = None
    D_max: int | None = None
    literal_confounding: bool = False
    standardize: bool = False

    def __post_init__(self):
        validate_tau(self.tau)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("d_star", "D_max"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.m_cap is not None and self.m_cap < 0:
            raise ValueError("m_cap must be non-negative")

    def resolve(self, n: int) -> tuple[int, int, int]:
        """Return (d_star, m_cap, D_max) for sample size ``n``."""
        D_max = self.D_max if self.D_max is not None else default_d_max(n)
        d_star = self.d_star if self.d_star is not None else default_d_star(n)
        m_cap = self.m_cap if self.m_cap is not None else default_m_cap(n)
        d_star = min(d_star, D_max)
        if D_max + 1 >= n:
            raise ValueError(f"D_max={D_max} too large for n={n}")
        return d_star, m_cap, D_max


@dataclass(frozen=True)
class Step:
    index: int
    score: float  # |QPC| at selection
    conditioning: tuple[int, ...]
    failures: dict = field(default_factory=dict)  # candidate -> reason, at this step


@dataclass(frozen=True)
class SelectionTrace:
    algorithm: str
    tau: float
    n: int
    steps: tuple[Step, ...]
    losses: np.ndarray  # mean check loss of the refit on each prefix
    ebic: np.ndarray  # EBIC for prefixes D = 1..len(steps)
    chosen_D: int
    final_fit: QrFit | None
    names: tuple[str, ...] = ()
    stalled: bool = False
    d_star: int = 0
    m_cap: int = 0
    D_max: int = 0
    scaling: tuple | None = None  # (means, sds) when screening ran on standardized columns

    @property
    def path(self) -> list[int]:
        return [s.index for s in self.steps]

    @property
    def selected(self) -> list[int]:
        return self.path[: self.chosen_D]

    def predict(self, X_rows: np.ndarray) -> np.ndarray:
        X_rows = np.atleast_2d(np.asarray(X_rows, dtype=float))
        if self.scaling is not None:
            means, sds = self.scaling
            X_rows = (X_rows - means) / sds
        return self.final_fit.predict(X_rows[:, self.selected])

    def to_dict(self) -> dict:
        names = self.names

        def label(j):
            return names[j] if names else j

        return {
            "algorithm": self.algorithm,
            "tau": self.tau,
            "n": self.n,
            "d_star": self.d_star,
            "m_cap": self.m_cap,
            "D_max": self.D_max,
            "stalled": self.stalled,
            "steps": [
                {
                    "step": d + 1,
                    "index": s.index,
                    "name": label(s.index),
                    "abs_qpc": s.score,
                    "conditioning": [label(k) for k in s.conditioning],
                    "skipped": {str(label(j)): why for j, why in sorted(s.failures.items())},
                }
                for d, s in enumerate(self.steps)
            ],
            "loss": self.losses.tolist(),
            "ebic": [None if not np.isfinite(v) else float(v) for v in self.ebic],
            "chosen_D": self.chosen_D,
            "selected": [label(j) for j in self.selected],
            "coefficients": None if self.final_fit is None else self.final_fit.beta.tolist(),
        }


def ebic(mean_check_loss: float, D: int, n: int) -> float:
    """ln(loss) + D * ln(n) / (2n) * ln(D)."""
    if D < 1:
        raise ValueError("D must be at least 1")
    if not mean_check_loss > 1e-300:
        raise NonPositiveLoss(f"mean check loss {mean_check_loss!r} is not positive")
    return math.log(mean_check_loss) + D * math.log(n) / (2.0 * n) * math.log(D)


def _ebic_or_inf(loss: float, D: int, n: int) -> float:
    try:
        return ebic(loss, D, n)
    except NonPositiveLoss:
        return math.inf


def argmin_first(values: Sequence[float]) -> int:
    """Index of the smallest value; ties go to the earliest position."""
    best, best_i = math.inf, 0
    for i, v in enumerate(values):
        if v < best:
            best, best_i = v, i
    return best_i


class _Correlations:
    """Columns ordered by decreasing |corr| with each column (ties: smaller index)."""

    def __init__(self, X: np.ndarray):
        R, self.degenerate = abs_corr_matrix(X)
        self.order = np.argsort(-R, axis=1, kind="stable")

    def top(self, j: int, excluded: set, m: int, pool: set | None = None) -> list[int]:
        if m <= 0:
            return []
        out = []
        for k in self.order[j]:
            k = int(k)
            if k == j or k in excluded or self.degenerate[k]:
                continue
            if pool is not None and k not in pool:
                continue
            out.append(k)
            if len(out) == m:
                break
        return out


def confounding_set(dataset: Dataset, j: int, excluded: Iterable[int] = (), m: int = 0) -> list[int]:
    """The ``m`` columns (other than ``j`` and ``excluded``) most correlated with column ``j``."""
    if m < 0:
        raise ValueError("m must be non-negative")
    X = dataset.X
    xj = X[:, j] - X[:, j].mean()
    if (xj @ xj) / dataset.n <= 1e-14:
        raise DegenerateColumn(f"column {j} has zero variance")
    if m == 0:
        return []
    R, degenerate = abs_corr_matrix(X)
    order = np.argsort(-R[j], kind="stable")
    excluded = set(excluded)
    out = []
    for k in order.tolist():
        if k == j or k in excluded or degenerate[k]:
            continue
        out.append(k)
        if len(out) == m:
            break
    return out


def _prepare(dataset: Dataset, config: ScreenConfig):
    if config.standardize:
        ds, means, sds = standardize(dataset)
        return ds, (means, sds)
    return dataset, None


def qpcs_run(dataset: Dataset, config: ScreenConfig) -> SelectionTrace:
    """QPC screening with per-candidate confounding-set augmentation.

    Steps 1..d_star condition candidate j on the current selection plus the
    m_cap columns most correlated with j. Later steps condition on the first
    d_star - 1 selections plus the same kind of confounding set. Those scores
    do not change from step to step, so the remaining candidates are taken in
    the score order of step d_star.
    """
    ds, scaling = _prepare(dataset, config)
    tau = config.tau
    d_star, m_cap, D_max = config.resolve(ds.n)
    limit = min(D_max, ds.p)
    corr = _Correlations(ds.X)
    selected: list[int] = []
    steps: list[Step] = []
    stalled = False

    def conditioning(j, base):
        if config.literal_confounding:
            extra = corr.top(j, set(), m_cap, pool=set(base))
        else:
            extra = corr.top(j, set(base), m_cap)
        return tuple(base) + tuple(k for k in extra if k not in base)

    # steps d = 1..d_star: the conditioning set tracks the selection
    while len(selected) < min(d_star, limit):
        cands = [j for j in range(ds.p) if j not in set(selected)]
        conds = [conditioning(j, selected) for j in cands]
        res = qpc_scores_per_candidate(ds, cands, conds, tau)
        best = res.argmax()
        if best is None:
            stalled = True
            break
        steps.append(Step(best, res.scores[best], conds[cands.index(best)], res.failures))
        selected.append(best)

    # steps d > d_star: base frozen at the first d_star - 1 selections, which is
    # exactly the conditioning used at step d_star, so its scores carry over
    if not stalled and len(selected) < limit:
        cond_of = dict(zip(cands, conds))
        ranked = sorted((j for j in res.scores if j not in set(selected)),
                        key=lambda j: (-res.scores[j], j))
        for j in ranked[: limit - len(selected)]:
            steps.append(Step(j, res.scores[j], cond_of[j], res.failures))
            selected.append(j)
        if len(selected) < limit:
            stalled = True
    return _finish(ds, dataset, config, steps, stalled, scaling, d_star, m_cap, D_max)


def qpcfr_run(dataset: Dataset, config: ScreenConfig) -> SelectionTrace:
    """QPC forward selection: candidates are conditioned on the current selection only."""
    ds, scaling = _prepare(dataset, config)
    d_star, m_cap, D_max = config.resolve(ds.n)
    limit = min(D_max, ds.p)
    selected: list[int] = []
    steps: list[Step] = []
    stalled = False
    while len(selected) < limit:
        cands = [j for j in range(ds.p) if j not in set(selected)]
        res = qpc_screen_scores(ds, cands, selected, config.tau)
        best = res.argmax()
        if best is None:
            stalled = True
            break
        steps.append(Step(best, res.scores[best], tuple(selected), res.failures))
        selected.append(best)
    return _finish(ds, dataset, config, steps, stalled, scaling, d_star, m_cap, D_max)


def _refit(ds: Dataset, idx: Sequence[int], tau: float) -> QrFit | None:
    try:
        return qr_fit(ds.y, ds.X[:, list(idx)], tau)
    except (RankDeficient, NotConverged, ValueError) as exc:
        log.warning("prefix refit on %d columns failed: %s", len(idx), exc)
        return None


def _finish(ds, original, config, steps, stalled, scaling, d_star, m_cap, D_max):
    if not steps:
        raise StalledSelection("no candidate could be scored at the first step")
    if stalled:
        log.warning("%s stalled after %d steps", config.algorithm, len(steps))
    path = [s.index for s in steps]
    losses, values = [], []
    for D in range(1, len(path) + 1):
        fit = _refit(ds, path[:D], config.tau)
        loss = math.nan if fit is None else fit.objective
        losses.append(loss)
        values.append(math.inf if fit is None else _ebic_or_inf(loss, D, ds.n))
    chosen = argmin_first(values) + 1
    final = _refit(ds, path[:chosen], config.tau)
    return SelectionTrace(
        algorithm=config.algorithm, tau=config.tau, n=ds.n, steps=tuple(steps),
        losses=np.asarray(losses), ebic=np.asarray(values), chosen_D=chosen,
        final_fit=final, names=original.names, stalled=stalled,
        d_star=d_star, m_cap=m_cap, D_max=D_max, scaling=scaling,
    )


def run_screen(dataset: Dataset, config: ScreenConfig) -> SelectionTrace:
    if config.algorithm == "QPCS":
        return qpcs_run(dataset, config)
    return qpcfr_run(dataset, config)


def select_two_step(trace: SelectionTrace, dataset: Dataset, tau: float | None = None):
    """First EBIC-minimizing prefix of the path (smallest D on ties) and its refit."""
    if not trace.steps:
        raise ValueError("empty selection trace")
    tau = trace.tau if tau is None else validate_tau(tau)
    D = argmin_first(trace.ebic) + 1
    idx = trace.path[:D]
    ds = dataset
    if trace.scaling is not None:
        ds = Dataset(dataset.y, (dataset.X - trace.scaling[0]) / trace.scaling[1], dataset.names)
    return idx, qr_fit(ds.y, ds.X[:, idx], tau)


__all__ = [
    "ScreenConfig", "SelectionTrace", "Step", "confounding_set", "ebic", "qpcs_run",
    "qpcfr_run", "run_screen", "select_two_step", "default_d_star", "default_m_cap",
    "default_d_max", "QpcError",
]
