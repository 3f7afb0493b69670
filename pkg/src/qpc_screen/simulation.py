"""Monte Carlo designs A and B, replicated method comparisons, and runtime benchmarks."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter
from scipy.stats import norm

from .errors import CovarianceNotPD, NonPositiveLoss, QpcError
from .numeric import Dataset
from .quantreg import lambda_path, mean_check_loss, validate_tau
from .screening import ScreenConfig, default_d_max, ebic, run_screen

log = logging.getLogger(__name__)

METHODS = ("QPCS", "QPCFR", "L1QR")
TRUE_SET = frozenset({0, 1, 2, 3})


@dataclass(frozen=True)
class DgpSpec:
    family: str = "A"
    n: int = 200
    p: int = 1000
    rho: float = 0.5
    phi: float = 0.2
    tau: float = 0.5
    sigma: float = 1.0
    burn_in: int = 200
    holdout: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("A", "B"):
            raise ValueError(f"family must be 'A' or 'B', got {self.family!r}")
        validate_tau(self.tau)
        if not abs(self.phi) < 1.0:
            raise ValueError("|phi| must be below 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.family == "A" and self.p < 5:
            raise ValueError("family A needs p >= 5")
        if self.family == "B" and self.p < 4:
            raise ValueError("family B needs p >= 4")
        if self.n < 2 or self.burn_in < 0 or self.holdout < 0 or self.sigma <= 0:
            raise ValueError("invalid sizes or sigma")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def sigma_eta(spec: DgpSpec) -> np.ndarray:
    """Innovation covariance of the predictor VAR(1)."""
    p, rho, phi = spec.p, spec.rho, spec.phi
    if spec.family == "B":
        idx = np.arange(p)
        return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    S = np.full((p, p), rho * (1.0 - phi**2))
    S[3, :] = S[:, 3] = math.sqrt(rho) * (1.0 - phi**2)
    np.fill_diagonal(S, 1.0)
    return S


def beta_vector(spec: DgpSpec) -> np.ndarray:
    b = np.zeros(spec.p)
    if spec.family == "B":
        b[:4] = 1.0
    else:
        beta = 2.5 * (1.0 + abs(spec.tau - 0.5))
        b[:3] = beta
        b[3] = -3.0 * math.sqrt(spec.rho) * beta
    return b


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise CovarianceNotPD("innovation covariance is not positive definite") from exc


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep])))


def draw_epsilon(tau: float, size: int, rng: np.random.Generator, sigma: float = 1.0) -> np.ndarray:
    """sigma * z - sigma * Phi^{-1}(tau), whose tau-quantile is 0."""
    return sigma * (rng.standard_normal(size) - norm.ppf(tau))


@dataclass(frozen=True)
class SimData:
    train: Dataset
    X_holdout: np.ndarray
    y_holdout: np.ndarray


def simulate_panel(spec: DgpSpec, rep: int = 0, chol: np.ndarray | None = None):
    """Full post-burn-in path (X, y, eps) of length n + holdout."""
    L = _cholesky(sigma_eta(spec)) if chol is None else chol
    rng = replication_rng(spec.seed, rep)
    total = spec.burn_in + spec.n + spec.holdout
    eta = rng.standard_normal((total, spec.p)) @ L.T
    X = lfilter([1.0], [1.0, -spec.phi], eta, axis=0)  # X_t = phi X_{t-1} + eta_t, X_0 = 0
    eps = draw_epsilon(spec.tau, total, rng, spec.sigma)
    y = X @ beta_vector(spec) + eps
    keep = slice(spec.burn_in, total)
    return X[keep], y[keep], eps[keep]


def _generate(spec: DgpSpec, rep: int, chol=None) -> SimData:
    X, y, _ = simulate_panel(spec, rep, chol)
    n = spec.n
    return SimData(Dataset(y[:n], X[:n]), X[n:], y[n:])


def gen_dgp_a(spec: DgpSpec, rep: int = 0) -> SimData:
    if spec.family != "A":
        raise ValueError("spec is not family A")
    return _generate(spec, rep)


def gen_dgp_b(spec: DgpSpec, rep: int = 0) -> SimData:
    if spec.family != "B":
        raise ValueError("spec is not family B")
    return _generate(spec, rep)


def generate(spec: DgpSpec, rep: int = 0, chol=None) -> SimData:
    return _generate(spec, rep, chol)


# ---------------------------------------------------------------- methods

@dataclass(frozen=True)
class MethodResult:
    method: str
    rep: int
    selected: tuple  # in path order for screening methods, sorted for L1QR
    mqe: float
    seconds: float
    error: str | None = None


def l1qr_select(data: Dataset, tau: float, D_max: int | None = None, grid_size: int = 100,
                early_stop: bool = False):
    """EBIC over l1 path fits with 1 <= D <= D_max; returns (active indices, fit).

    The whole grid is fitted unless ``early_stop``, which ends the path after
    the first fit with more than D_max active slopes.
    """
    D_max = default_d_max(data.n) if D_max is None else D_max
    path = lambda_path(data.y, data.X, tau, grid_size,
                       max_active=D_max if early_stop else None)
    best, best_val = None, math.inf
    for fit, D in zip(path.fits, path.active_sizes):
        if not 1 <= D <= D_max:
            continue
        try:
            v = ebic(fit.loss, int(D), data.n)
        except NonPositiveLoss:
            v = math.inf
        if v < best_val:
            best, best_val = fit, v
    if best is None:
        best = path.fits[0]  # null model: nothing selected
    return tuple(int(j) for j in best.active()), best


def _run_method(method: str, sim: SimData, tau: float, rep: int, screen_kw: dict) -> MethodResult:
    t0 = time.perf_counter()
    try:
        if method == "L1QR":
            sel, fit = l1qr_select(sim.train, tau, screen_kw.get("D_max"))
            pred = fit.predict(sim.X_holdout)
        else:
            trace = run_screen(sim.train, ScreenConfig(tau=tau, algorithm=method, **screen_kw))
            if trace.final_fit is None:
                raise QpcError("final refit failed")
            sel = tuple(trace.selected)
            pred = trace.predict(sim.X_holdout)
        mqe = mean_check_loss(sim.y_holdout - pred, tau)
        return MethodResult(method, rep, sel, mqe, time.perf_counter() - t0)
    except (QpcError, ValueError) as exc:
        return MethodResult(method, rep, (), math.nan, time.perf_counter() - t0,
                            error=f"{type(exc).__name__}: {exc}")


def _replicate(args) -> list[MethodResult]:
    spec, methods, rep, screen_kw = args
    sim = generate(spec, rep)
    return [_run_method(m, sim, spec.tau, rep, screen_kw) for m in methods]


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class SimulationReport:
    method: str
    spec: DgpSpec
    replications: int
    mqe: float
    crate: int
    tp: float
    fp: float
    ranks: tuple  # per true covariate: float, None for NA, or "-" when not applicable
    failures: int
    records: tuple = field(default=(), repr=False)

    def row(self) -> dict:
        def rank(r):
            return r if isinstance(r, str) else ("NA" if r is None else _fmt(r))

        out = {"family": self.spec.family, "n": self.spec.n, "p": self.spec.p,
               "rho": _fmt(self.spec.rho), "phi": _fmt(self.spec.phi),
               "tau": _fmt(self.spec.tau), "method": self.method,
               "replications": self.replications, "MQE": _fmt(self.mqe),
               "Crate": self.crate, "TP": _fmt(self.tp), "FP": _fmt(self.fp)}
        for i, r in enumerate(self.ranks, start=1):
            out[f"R{i}"] = rank(r)
        out["failures"] = self.failures
        return out

    def to_dict(self) -> dict:
        d = self.row()
        d["spec"] = asdict(self.spec)
        d["records"] = [
            {"rep": r.rep, "selected": [j + 1 for j in r.selected],
             "mqe": None if math.isnan(r.mqe) else _fmt(r.mqe), "error": r.error}
            for r in self.records
        ]
        return d


def _fmt(x: float) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def summarize(method: str, spec: DgpSpec, records: Sequence[MethodResult]) -> SimulationReport:
    ok = [r for r in records if r.error is None]
    if len(ok) < len(records):
        log.warning("%s: %d of %d replications failed", method, len(records) - len(ok), len(records))
    k = len(ok)
    sel_sets = [set(r.selected) for r in ok]
    tp = sum(len(s & TRUE_SET) for s in sel_sets) / k if k else math.nan
    fp = sum(len(s - TRUE_SET) for s in sel_sets) / k if k else math.nan
    crate = sum(s == TRUE_SET for s in sel_sets)
    mqe = float(np.mean([r.mqe for r in ok])) if k else math.nan
    if method == "L1QR":
        ranks = ("-",) * 4
    else:
        ranks = []
        for i in sorted(TRUE_SET):
            if k and all(i in s for s in sel_sets):
                ranks.append(float(np.mean([r.selected.index(i) + 1 for r in ok])))
            else:
                ranks.append(None)
        ranks = tuple(ranks)
    return SimulationReport(method, spec, len(records), mqe, crate, tp, fp, ranks,
                            len(records) - k, tuple(records))


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))  # map preserves task order


def run_study(spec: DgpSpec, methods: Sequence[str] = METHODS, replications: int = 50,
              jobs: int = 1, screen_kw: dict | None = None) -> dict[str, SimulationReport]:
    """Replicated comparison; reports do not depend on ``jobs``."""
    if replications < 1:
        raise ValueError("replications must be at least 1")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    _cholesky(sigma_eta(spec))  # fail fast on a bad covariance
    tasks = [(spec, tuple(methods), rep, dict(screen_kw or {})) for rep in range(replications)]
    results = _map(_replicate, tasks, jobs)
    return {m: summarize(m, spec, [res[i] for res in results]) for i, m in enumerate(methods)}


def bench_runtime(spec: DgpSpec, methods: Sequence[str] = METHODS, replications: int = 1,
                  screen_kw: dict | None = None) -> dict[str, float]:
    """Average wall-clock seconds per replication, with the same datasets for every method."""
    if replications < 1:
        raise ValueError("replications must be at least 1")
    screen_kw = dict(screen_kw or {})
    chol = _cholesky(sigma_eta(spec))
    totals = {m: 0.0 for m in methods}
    for rep in range(replications):
        sim = generate(spec, rep, chol)
        for m in methods:
            totals[m] += _run_method(m, sim, spec.tau, rep, screen_kw).seconds
    return {m: totals[m] / replications for m in methods}


def reports_to_csv(reports: Sequence[SimulationReport]) -> str:
    rows = [r.row() for r in reports]
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(str(row[c]) for c in cols) for row in rows]
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[SimulationReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def spec_grid(base: DgpSpec, taus=None, phis=None, rhos=None) -> list[DgpSpec]:
    out = []
    for tau in taus or [base.tau]:
        for phi in phis or [base.phi]:
            for rho in rhos or [base.rho]:
                out.append(replace(base, tau=tau, phi=phi, rho=rho))
    return out
