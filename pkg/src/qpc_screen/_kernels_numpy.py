"""Vectorized numpy kernels; drop-in replacement for ``_kernels_numba``."""
import numpy as np
import scipy.linalg as sla

OK = 0
RANK_DEFICIENT = 1
NOT_CONVERGED = 2
DEGENERATE = 3

_STEP = 0.99995


def _cholesky(G, tol):
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None, False
    d = np.diag(G)
    if np.any(~(d > 0.0)) or np.any(np.diag(L) ** 2 <= tol * d):
        return None, False
    return L, True


def _chol_solve(L, b):
    z = sla.solve_triangular(L, b, lower=True, check_finite=False)
    return sla.solve_triangular(L.T, z, lower=False, check_finite=False)


def _lu_solve(A, b, transpose):
    M = A.T if transpose else A
    scale = np.abs(M).max()
    if scale == 0.0:
        return b.copy(), False
    try:
        lu, piv = sla.lu_factor(M, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return b.copy(), False
    if np.min(np.abs(np.diag(lu))) <= 1e-13 * scale:
        return b.copy(), False
    return sla.lu_solve((lu, piv), b, check_finite=False), True


def _bound(v, dv):
    neg = dv < 0.0
    if not neg.any():
        return 1e20
    return float(np.min(-v[neg] / dv[neg]))


def check_loss_sum(r, tau):
    return float(np.sum(np.where(r < 0.0, (tau - 1.0) * r, tau * r)))


def _type1_quantile(y, tau):
    n = y.shape[0]
    idx = int(np.ceil(n * tau - 1e-10 * n)) - 1
    idx = min(max(idx, 0), n - 1)
    return np.sort(y)[idx]


def design_rank_ok(X, tol):
    if X.shape[1] == 1:
        return True
    C = X[:, 1:] - X[:, 1:].mean(axis=0)
    _, ok = _cholesky(C.T @ C, tol)
    return ok


def _purify(X, y, beta, tau):
    n, k = X.shape
    r = y - X @ beta
    h = np.argsort(np.abs(r), kind="stable")[:k]
    Xh = X[h]
    bv, ok = _lu_solve(Xh, y[h], False)
    if not ok:
        return beta, r, False
    rv = y - X @ bv
    rv[h] = 0.0
    mask = np.ones(n, dtype=bool)
    mask[h] = False
    a = np.where(rv[mask] < 0.0, tau - 1.0, tau)
    g = -(X[mask].T @ a)
    ah, ok = _lu_solve(Xh, g, True)
    if not ok or np.any(ah < tau - 1.0 - 1e-9) or np.any(ah > tau + 1e-9):
        return beta, r, False
    return bv, rv, True


def qr_fn(X, y, tau, tol, maxit):
    """Frisch-Newton interior point on the bounded dual of linear quantile regression."""
    n, k = X.shape
    if k == 1:
        q = _type1_quantile(y, tau)
        return np.array([q]), y - q, 0, OK
    if not design_rank_ok(X, 1e-10):
        return np.zeros(k), y.copy(), 0, RANK_DEFICIENT

    c = -y
    x = np.full(n, 1.0 - tau)
    s = np.full(n, tau)
    b = X.T @ x
    L, ok = _cholesky(X.T @ X, 1e-14)
    if not ok:
        return np.zeros(k), y.copy(), 0, RANK_DEFICIENT
    lam = _chol_solve(L, X.T @ c)
    r = c - X @ lam
    r[r == 0.0] = 0.001
    z = np.where(r > 0.0, r, 0.0)
    w = z - r
    yscale = 1.0 + np.abs(y).sum()
    gap = c @ x - lam @ b + w.sum()
    it = 0
    status = NOT_CONVERGED
    while True:
        if gap <= tol * yscale:
            status = OK
            break
        if it >= maxit:
            break
        it += 1
        q = 1.0 / (z / x + w / s)
        r = z - w
        L, ok = _cholesky((X.T * q) @ X, 1e-15)
        if not ok:
            break
        rhs = X.T @ (q * r)
        dy = _chol_solve(L, rhs)
        dx = q * (X @ dy - r)
        ds = -dx
        dz = -z * (dx / x + 1.0)
        dw = -w * (ds / s + 1.0)
        fp = min(_STEP * min(_bound(x, dx), _bound(s, ds)), 1.0)
        fd = min(_STEP * min(_bound(w, dw), _bound(z, dz)), 1.0)
        if min(fp, fd) < 1.0:
            mu = z @ x + w @ s
            g = (z + fd * dz) @ (x + fp * dx) + (w + fd * dw) @ (s + fp * ds)
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            dxdz = dx * dz
            dsdw = ds * dw
            xinv = 1.0 / x
            sinv = 1.0 / s
            xi = mu * (xinv - sinv)
            rhs = rhs + X.T @ (q * (dxdz - dsdw - xi))
            dy = _chol_solve(L, rhs)
            dx = q * (X @ dy + xi - r - dxdz + dsdw)
            ds = -dx
            dz = mu * xinv - z - xinv * z * dx - dxdz
            dw = mu * sinv - w - sinv * w * ds - dsdw
            fp = min(_STEP * min(_bound(x, dx), _bound(s, ds)), 1.0)
            fd = min(_STEP * min(_bound(w, dw), _bound(z, dz)), 1.0)
        x = x + fp * dx
        s = s + fp * ds
        lam = lam + fd * dy
        w = w + fd * dw
        z = z + fd * dz
        gap = c @ x - lam @ b + w.sum()

    beta = -lam
    if status != OK:
        return beta, y - X @ beta, it, status
    beta, r, vertex = _purify(X, y, beta, tau)
    if not vertex:
        r = np.where(np.abs(r) <= 1e-9 * (1.0 + np.abs(y)), 0.0, r)
    return beta, r, it, OK


def ols_many(C, T, tol):
    """OLS of each column of T on [1, C]; the factorization of C is shared.

    Per-column arithmetic uses the same 1-D operations whatever the number of
    columns, so a batch reproduces single-column calls bit for bit.
    """
    n, k = C.shape
    m = T.shape[1]
    R = np.empty((n, m), order="F")
    tmean = np.empty(m)
    for j in range(m):
        t = np.ascontiguousarray(T[:, j])
        tmean[j] = t.mean()
        R[:, j] = t - tmean[j]
    if k == 0:
        return np.zeros((0, m)), tmean, R, _colmeans_sq(R), True
    cmean = C.mean(axis=0)
    Cc = np.ascontiguousarray(C - cmean)
    L, ok = _cholesky(Cc.T @ Cc, tol)
    if not ok:
        return np.zeros((k, m)), tmean, R, np.zeros(m), False
    slopes = np.empty((k, m))
    for j in range(m):
        r = R[:, j]
        slopes[:, j] = _chol_solve(L, Cc.T @ r)
        R[:, j] = r - Cc @ slopes[:, j]
    intercepts = np.array([tmean[j] - cmean @ slopes[:, j] for j in range(m)])
    return slopes, intercepts, R, _colmeans_sq(R), True


def _colmeans_sq(R):
    return np.array([R[:, j] @ R[:, j] for j in range(R.shape[1])]) / R.shape[0]


def _design(X, idx):
    return np.column_stack([np.ones(X.shape[0]), X[:, idx]])


def qpc_shared(X, y, tau, cond, cands, tol, maxit, deg_tol):
    n = X.shape[0]
    m = cands.shape[0]
    k = cond.shape[0]
    values = np.zeros(m)
    numer = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    theta = np.zeros((k + 1, m))
    alpha, res, iters, st = qr_fn(_design(X, cond), y, tau, tol, maxit)
    if st != OK:
        status[:] = st
        return values, numer, np.zeros(m), status, alpha, theta, iters
    psi = np.where(res < 0.0, tau - 1.0, tau)
    slopes, icpt, R, s2, ok = ols_many(X[:, cond], X[:, cands], 1e-10)
    if not ok:
        status[:] = RANK_DEFICIENT
        return values, numer, s2, status, alpha, theta, iters
    theta[0] = icpt
    theta[1:] = slopes
    degenerate = s2 <= deg_tol
    status[degenerate] = DEGENERATE
    good = ~degenerate
    for c in np.flatnonzero(good):
        numer[c] = (psi @ R[:, c]) / n
    values[good] = numer[good] / np.sqrt(tau * (1.0 - tau) * s2[good])
    return values, numer, s2, status, alpha, theta, iters


def qpc_per_candidate(X, y, tau, cond_mat, cond_len, cands, tol, maxit, deg_tol):
    m = cands.shape[0]
    values = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    for c in range(m):
        cond = cond_mat[c, : cond_len[c]]
        v, _, _, st, _, _, _ = qpc_shared(
            X, y, tau, cond, cands[c : c + 1], tol, maxit, deg_tol
        )
        values[c] = v[0]
        status[c] = st[0]
    return values, status
