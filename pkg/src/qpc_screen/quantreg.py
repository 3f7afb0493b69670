"""Check loss and exact solvers for linear and l1-penalized quantile regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ._backend import get_kernels
from .errors import NotConverged, RankDeficient

DEFAULT_TOL = 1e-9
DEFAULT_MAXIT = 200
ACTIVE_TOL = 1e-8


def validate_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def check_loss(u, tau: float):
    """rho_tau(u) = u * (tau - 1{u < 0}); works elementwise on arrays."""
    tau = validate_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0.0))
    return float(out) if out.ndim == 0 else out


def psi(u, tau: float):
    """tau - 1{u < 0}; note psi(0) = tau."""
    tau = validate_tau(tau)
    u = np.asarray(u, dtype=float)
    out = tau - (u < 0.0).astype(float)
    return float(out) if out.ndim == 0 else out


def mean_check_loss(r: np.ndarray, tau: float) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.mean(r * (tau - (r < 0.0))))


@dataclass(frozen=True)
class QrFit:
    beta: np.ndarray  # intercept first
    residuals: np.ndarray
    objective: float  # mean check loss, plus lam * ||slopes||_1 when penalized
    iterations: int
    converged: bool
    tau: float
    lam: float = 0.0

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.beta[1:]

    @property
    def loss(self) -> float:
        """Mean check loss without the penalty term."""
        return mean_check_loss(self.residuals, self.tau)

    def active(self, tol: float = ACTIVE_TOL) -> np.ndarray:
        return np.flatnonzero(np.abs(self.slopes) > tol)

    def predict(self, X_cols: np.ndarray) -> np.ndarray:
        X_cols = np.asarray(X_cols, dtype=float).reshape(-1, self.beta.size - 1)
        return self.beta[0] + X_cols @ self.beta[1:]


def _columns(X_cols, n: int) -> np.ndarray:
    if X_cols is None:
        return np.empty((n, 0))
    X = np.asarray(X_cols, dtype=float)
    if X.ndim == 1:
        X = X.reshape(n, -1)
    if X.shape[0] != n:
        raise ValueError(f"X_cols has {X.shape[0]} rows, expected {n}")
    return X


def qr_fit(y, X_cols=None, tau: float = 0.5, *, tol: float = DEFAULT_TOL,
           maxit: int = DEFAULT_MAXIT) -> QrFit:
    """Unpenalized linear quantile regression of ``y`` on an intercept plus ``X_cols``.

    Solved by a Frisch-Newton interior point method, then rounded to an
    optimal basic solution whenever a dual certificate confirms it.
    Intercept-only fits return the lower (type-1) sample quantile.
    """
    tau = validate_tau(tau)
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    n = y.size
    X = _columns(X_cols, n)
    if X.shape[1] + 1 > n:
        raise ValueError("need at least as many observations as coefficients")
    design = np.ascontiguousarray(np.column_stack([np.ones(n), X]))
    kern = get_kernels()
    beta, res, iters, status = kern.qr_fn(design, y, tau, tol, maxit)
    if status == kern.RANK_DEFICIENT:
        raise RankDeficient("quantile regression design is rank deficient")
    if status == kern.NOT_CONVERGED:
        raise NotConverged(iters)
    return QrFit(beta=np.asarray(beta), residuals=np.asarray(res),
                 objective=mean_check_loss(res, tau), iterations=int(iters),
                 converged=True, tau=tau)


def null_subgradient(y: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Intercept-only fit and a valid subgradient vector at the zero-slope model.

    Zero residuals share whatever weight makes the subgradient sum to zero.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    idx = min(max(int(np.ceil(n * tau - 1e-10 * n)) - 1, 0), n - 1)
    q = float(np.sort(y)[idx])
    r = y - q
    a = np.where(r < 0.0, tau - 1.0, tau)
    zero = r == 0.0
    if zero.any():
        rest = a[~zero].sum()
        a[zero] = np.clip(-rest / zero.sum(), tau - 1.0, tau)
    return q, a


def lambda_max(y, X_cols, tau: float) -> float:
    """Smallest penalty at which the all-zero-slope model satisfies the KKT conditions."""
    tau = validate_tau(tau)
    y = np.asarray(y, dtype=float).reshape(-1)
    X = _columns(X_cols, y.size)
    if X.shape[1] == 0:
        return 0.0
    _, a = null_subgradient(y, tau)
    return float(np.max(np.abs(X.T @ a)) / y.size)


def _null_fit(y: np.ndarray, p: int, tau: float, lam: float) -> QrFit:
    q, _ = null_subgradient(y, tau)
    r = y - q
    beta = np.zeros(p + 1)
    beta[0] = q
    return QrFit(beta=beta, residuals=r, objective=mean_check_loss(r, tau),
                 iterations=0, converged=True, tau=tau, lam=lam)


def _l1_ipm(y, X, tau, lam, tol, maxit):
    """Mehrotra predictor-corrector on the primal LP of l1-penalized QR.

    Variables: slopes split into (b+, b-) >= 0, residual parts (u, v) >= 0 and a
    free intercept f; one equality row per observation. Each Newton step solves
    the (n+1) x (n+1) system [[X diag(th+ + th-) X' + diag(th_u + th_v), 1], [1', 0]].
    """
    n, p = X.shape
    c = np.concatenate([np.full(2 * p, n * lam), np.full(n, tau), np.full(n, 1.0 - tau)])
    N = c.size

    def A_mul(x):
        return X @ (x[:p] - x[p:2 * p]) + x[2 * p:2 * p + n] - x[2 * p + n:]

    def At_mul(w):
        xw = X.T @ w
        return np.concatenate([xw, -xw, w, -w])

    f = float(np.median(y))
    r0 = y - f
    x = np.concatenate([np.ones(2 * p), np.maximum(r0, 0.0) + 1.0, np.maximum(-r0, 0.0) + 1.0])
    z = c + 1.0
    lam_d = np.zeros(n)
    ynorm = 1.0 + np.linalg.norm(y)
    cnorm = 1.0 + np.linalg.norm(c)

    def solve(theta, lu, rp, rd, rf, rxz):
        t = (rxz - x * rd) / z
        sol = sla.lu_solve(lu, np.append(rp - A_mul(t), rf), check_finite=False)
        dl, df = sol[:n], sol[n]
        atdl = At_mul(dl)
        dz = rd - atdl
        dx = theta * atdl + t
        return dx, df, dl, dz

    it = 0
    while True:
        rp = y - A_mul(x) - f
        rd = c - At_mul(lam_d) - z
        rf = -lam_d.sum()
        pobj = c @ x
        dobj = y @ lam_d
        mu = x @ z / N
        if (np.linalg.norm(rp) / ynorm < tol and np.linalg.norm(rd) / cnorm < tol
                and abs(rf) / ynorm < tol and abs(pobj - dobj) / (1.0 + abs(pobj)) < tol):
            return x[:p] - x[p:2 * p], f, it, True
        if abs(pobj - dobj) / (1.0 + abs(pobj)) < 1e-6:
            # near the optimum the (n+1) system degrades; try to certify a vertex instead
            cand = _l1_certified(y, X, tau, lam, x[:p] - x[p:2 * p], f, lam_d, tol)
            if cand is not None:
                return cand[0], cand[1], it, True
        if it >= maxit:
            cand = _l1_certified(y, X, tau, lam, x[:p] - x[p:2 * p], f, lam_d, tol, thorough=True)
            if cand is not None:
                return cand[0], cand[1], it, True
            return x[:p] - x[p:2 * p], f, it, False
        it += 1
        theta = x / z
        # bordered system keeps the free intercept out of the near-singular block
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = (X * (theta[:p] + theta[p:2 * p])) @ X.T
        K[np.diag_indices(n)] += theta[2 * p:2 * p + n] + theta[2 * p + n:]
        K[:n, n] = 1.0
        K[n, :n] = 1.0
        if not np.all(np.isfinite(K)):
            return x[:p] - x[p:2 * p], f, it, False
        lu = sla.lu_factor(K, check_finite=False)
        dx, df, dl, dz = solve(theta, lu, rp, rd, rf, -x * z)
        ap = _step(x, dx, 1.0)
        ad = _step(z, dz, 1.0)
        mu_aff = (x + ap * dx) @ (z + ad * dz) / N
        sigma = (mu_aff / mu) ** 3
        dx, df, dl, dz = solve(theta, lu, rp, rd, rf, sigma * mu - x * z - dx * dz)
        ap = _step(x, dx, 0.995)
        ad = _step(z, dz, 0.995)
        x = x + ap * dx
        f = f + ap * df
        lam_d = lam_d + ad * dl
        z = z + ad * dz


def _l1_dual_value(y, X, tau, lam, w):
    """Objective (per observation) of the dual point nearest ``w`` after scaling into feasibility."""
    n = y.size
    if lam == 0.0 and X.shape[1]:
        # no slack in |X'w| <= 0: project onto the null space of [1, X]'
        D = np.column_stack([np.ones(n), X])
        w = w - D @ np.linalg.lstsq(D, w, rcond=None)[0]
        X = X[:, :0]
    w = w - w.mean()
    a = 1.0
    pos, neg = w > 0.0, w < 0.0
    if pos.any():
        a = min(a, float(np.min(tau / w[pos])))
    if neg.any():
        a = min(a, float(np.min((tau - 1.0) / w[neg])))
    g = float(np.max(np.abs(X.T @ w))) if X.shape[1] else 0.0
    if g > 0.0:
        a = min(a, n * lam / g)
    return a * float(y @ w) / n


def _l1_objective(y, X, tau, lam, b, f):
    r = y - f - X @ b
    return mean_check_loss(r, tau) + lam * float(np.abs(b).sum())


def _l1_kkt(y, X, tau, lam, b, f, tol):
    """Exact optimality check of (b, f) through a subgradient built from its residuals.

    Rows with nonzero residual fix w_i = psi(r_i); the zero-residual rows must
    then carry a w in [tau-1, tau] that zeroes the intercept equation, meets
    X_j'w = n * lam * sign(b_j) on active slopes and |X_j'w| <= n * lam elsewhere.
    """
    n = y.size
    r = y - f - X @ b
    zero = np.abs(r) <= 1e-9 * (1.0 + np.abs(y))
    act = b != 0.0
    E = np.column_stack([np.ones(n), X[:, act]])
    w = np.where(r < 0.0, tau - 1.0, tau)
    w[zero] = 0.0
    rhs = np.concatenate([[0.0], n * lam * np.sign(b[act])]) - E.T @ w
    if zero.any():
        w[zero] = np.linalg.lstsq(E[zero].T, rhs, rcond=None)[0]
    scale = tol * n * (1.0 + np.abs(X).max(initial=1.0))
    if np.abs(E.T @ w - np.concatenate([[0.0], n * lam * np.sign(b[act])])).max() > scale:
        return False
    if np.any(w < tau - 1.0 - 1e-9) or np.any(w > tau + 1e-9):
        return False
    return bool(np.all(np.abs(X[:, ~act].T @ w) <= n * lam + scale))


def _l1_certified(y, X, tau, lam, b, f, w, tol, thorough=False):
    """Return a certified optimal (b, f) near the iterate, else None.

    Candidates are the current iterate and basic solutions implied by
    complementary slackness with ``w``: zero residuals where w is strictly inside
    [tau-1, tau] or where the iterate nearly interpolates, nonzero slopes only
    where |X'w| meets n * lam. A candidate is accepted when its objective is
    within ``tol`` of a feasible dual value or when it passes the exact KKT check.
    ``thorough`` also tries every basis that swaps in the next-nearest row, which
    resolves degenerate ties at a higher cost.
    """
    n = y.size
    dual = _l1_dual_value(y, X, tau, lam, w)
    cands = [(b, f)]
    act = np.flatnonzero(np.abs(X.T @ w) >= n * lam * (1.0 - 1e-6))

    def vertex(rows, exact):
        A = np.column_stack([np.ones(rows.size), X[np.ix_(rows, act)]])
        if exact:
            if np.linalg.matrix_rank(A) < rows.size:
                return
            sol = np.linalg.solve(A, y[rows])
        else:
            sol = np.linalg.lstsq(A, y[rows], rcond=None)[0]
        bv = np.zeros(X.shape[1])
        bv[act] = sol[1:]
        cands.append((bv, float(sol[0])))

    inner = np.flatnonzero((w > tau - 1.0 + 1e-6) & (w < tau - 1e-6))
    if inner.size:
        vertex(inner, exact=False)
    # basic solutions through the rows the iterate nearly interpolates; one spare
    # row covers a degenerate tie for the last basis slot
    k = act.size + 1
    if k <= n:
        near = np.argsort(np.abs(y - f - X @ b), kind="stable")[:k + 1]
        vertex(near[:k], exact=True)
        if thorough and near.size > k:
            for drop in range(k):
                vertex(np.delete(near, drop), exact=True)
    objs = [_l1_objective(y, X, tau, lam, *c) for c in cands]
    order = np.argsort(objs, kind="stable")
    best = cands[order[0]]
    if objs[order[0]] - dual <= tol * (1.0 + abs(objs[order[0]])):
        return best
    for i in order:
        if _l1_kkt(y, X, tau, lam, *cands[i], tol):
            return cands[i]
    return None


def _step(v, dv, frac):
    neg = dv < 0.0
    if not neg.any():
        return 1.0
    return min(1.0, frac * float(np.min(-v[neg] / dv[neg])))


def qr_fit_l1(y, X_cols, tau: float, lam: float, *, tol: float = DEFAULT_TOL,
              maxit: int = DEFAULT_MAXIT, certify_null: bool = True) -> QrFit:
    """Minimize mean check loss + ``lam`` * ||slopes||_1 (intercept unpenalized)."""
    tau = validate_tau(tau)
    if lam < 0:
        raise ValueError("penalty must be non-negative")
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    n = y.size
    X = _columns(X_cols, n)
    p = X.shape[1]
    if p == 0 or (certify_null and lam >= lambda_max(y, X, tau)):
        return _null_fit(y, p, tau, lam)
    kern = get_kernels()
    if lam == 0.0 and not kern.design_rank_ok(np.column_stack([np.ones(n), X]), 1e-10):
        raise RankDeficient("quantile regression design is rank deficient")
    b, f, iters, ok = _l1_ipm(y, X, tau, float(lam), tol, maxit)
    if not ok:
        raise NotConverged(iters)
    b = np.where(np.abs(b) <= ACTIVE_TOL, 0.0, b)
    beta = np.concatenate([[f], b])
    r = y - f - X @ b
    obj = mean_check_loss(r, tau) + lam * float(np.abs(b).sum())
    return QrFit(beta=beta, residuals=r, objective=obj, iterations=iters,
                 converged=True, tau=tau, lam=float(lam))


@dataclass(frozen=True)
class LambdaPath:
    lambdas: np.ndarray
    fits: list
    active_sizes: np.ndarray


def lambda_grid(lmax: float, grid_size: int, min_ratio: float = 1e-3) -> np.ndarray:
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    return lmax * np.geomspace(1.0, min_ratio, grid_size)


def lambda_path(y, X_cols, tau: float, grid_size: int = 100, *, min_ratio: float = 1e-3,
                max_active: int | None = None, tol: float = DEFAULT_TOL,
                maxit: int = DEFAULT_MAXIT) -> LambdaPath:
    """Fit the l1 path on a geometric grid from lambda_max down to lambda_max * min_ratio.

    With ``max_active`` set, the path stops after the first fit whose active set
    exceeds it (the remaining grid points are not fitted).
    """
    tau = validate_tau(tau)
    y = np.asarray(y, dtype=float).reshape(-1)
    X = _columns(X_cols, y.size)
    grid = lambda_grid(lambda_max(y, X, tau), grid_size, min_ratio)
    fits, sizes = [], []
    for lam in grid:
        fit = qr_fit_l1(y, X, tau, lam, tol=tol, maxit=maxit)
        fits.append(fit)
        sizes.append(fit.active().size)
        if max_active is not None and sizes[-1] > max_active:
            break
    return LambdaPath(lambdas=grid[: len(fits)], fits=fits, active_sizes=np.asarray(sizes))
