"""numba-compiled hot kernels.

Loop-oriented versions of the kernels in ``_kernels_numpy``; both modules
expose the same functions and status codes. Designs passed to the quantile
solver carry the intercept as their first column.
"""
import numpy as np
from numba import njit

OK = 0
RANK_DEFICIENT = 1
NOT_CONVERGED = 2
DEGENERATE = 3

_STEP = 0.99995


@njit(cache=True)
def _cholesky(G, tol):
    # pivot j is rejected when it falls below tol * G[j, j]
    k = G.shape[0]
    L = np.zeros((k, k))
    for j in range(k):
        gjj = G[j, j]
        s = gjj
        for t in range(j):
            s -= L[j, t] * L[j, t]
        if not (gjj > 0.0) or not (s > tol * gjj):
            return L, False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, k):
            v = G[i, j]
            for t in range(j):
                v -= L[i, t] * L[j, t]
            L[i, j] = v / d
    return L, True


@njit(cache=True)
def _chol_solve(L, b):
    k = L.shape[0]
    z = np.empty(k)
    for i in range(k):
        v = b[i]
        for t in range(i):
            v -= L[i, t] * z[t]
        z[i] = v / L[i, i]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        v = z[i]
        for t in range(i + 1, k):
            v -= L[t, i] * x[t]
        x[i] = v / L[i, i]
    return x


@njit(cache=True)
def _lu_solve(A, b, transpose):
    # Gaussian elimination with partial pivoting; returns (x, ok)
    k = A.shape[0]
    M = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            M[i, j] = A[j, i] if transpose else A[i, j]
    x = b.copy()
    scale = 0.0
    for i in range(k):
        for j in range(k):
            scale = max(scale, abs(M[i, j]))
    if scale == 0.0:
        return x, False
    for c in range(k):
        piv = c
        best = abs(M[c, c])
        for r in range(c + 1, k):
            if abs(M[r, c]) > best:
                best = abs(M[r, c])
                piv = r
        if best <= 1e-13 * scale:
            return x, False
        if piv != c:
            for j in range(k):
                tmp = M[c, j]
                M[c, j] = M[piv, j]
                M[piv, j] = tmp
            tmp = x[c]
            x[c] = x[piv]
            x[piv] = tmp
        for r in range(c + 1, k):
            f = M[r, c] / M[c, c]
            if f != 0.0:
                for j in range(c, k):
                    M[r, j] -= f * M[c, j]
                x[r] -= f * x[c]
    for i in range(k - 1, -1, -1):
        v = x[i]
        for j in range(i + 1, k):
            v -= M[i, j] * x[j]
        x[i] = v / M[i, i]
    return x, True


@njit(cache=True)
def _weighted_gram(X, q):
    n, k = X.shape
    G = np.zeros((k, k))
    for i in range(n):
        qi = q[i]
        for a in range(k):
            xa = X[i, a] * qi
            for b in range(a + 1):
                G[a, b] += xa * X[i, b]
    for a in range(k):
        for b in range(a):
            G[b, a] = G[a, b]
    return G


@njit(cache=True)
def _xt_v(X, v):
    n, k = X.shape
    out = np.zeros(k)
    for i in range(n):
        vi = v[i]
        for a in range(k):
            out[a] += X[i, a] * vi
    return out


@njit(cache=True)
def _x_v(X, v):
    n, k = X.shape
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for a in range(k):
            s += X[i, a] * v[a]
        out[i] = s
    return out


@njit(cache=True)
def _bound(v, dv):
    m = 1e20
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            r = -v[i] / dv[i]
            if r < m:
                m = r
    return m


@njit(cache=True)
def check_loss_sum(r, tau):
    s = 0.0
    for i in range(r.shape[0]):
        u = r[i]
        s += u * (tau - 1.0) if u < 0.0 else u * tau
    return s


@njit(cache=True)
def _type1_quantile(y, tau):
    n = y.shape[0]
    ys = np.sort(y)
    idx = int(np.ceil(n * tau - 1e-10 * n)) - 1
    if idx < 0:
        idx = 0
    if idx > n - 1:
        idx = n - 1
    return ys[idx]


@njit(cache=True)
def design_rank_ok(X, tol):
    # centered Gram of the non-intercept columns must be numerically PD
    n, k = X.shape
    if k == 1:
        return True
    C = np.empty((n, k - 1))
    for a in range(1, k):
        m = 0.0
        for i in range(n):
            m += X[i, a]
        m /= n
        for i in range(n):
            C[i, a - 1] = X[i, a] - m
    G = _weighted_gram(C, np.ones(n))
    _, ok = _cholesky(G, tol)
    return ok


@njit(cache=True)
def _purify(X, y, beta, tau):
    """Round an interior solution to an optimal basic solution when certifiable."""
    n, k = X.shape
    r = y - _x_v(X, beta)
    order = np.argsort(np.abs(r))
    h = order[:k]
    Xh = np.empty((k, k))
    yh = np.empty(k)
    for a in range(k):
        for b in range(k):
            Xh[a, b] = X[h[a], b]
        yh[a] = y[h[a]]
    bv, ok = _lu_solve(Xh, yh, False)
    if not ok:
        return beta, r, False
    rv = y - _x_v(X, bv)
    inbasis = np.zeros(n, dtype=np.bool_)
    for a in range(k):
        inbasis[h[a]] = True
        rv[h[a]] = 0.0
    g = np.zeros(k)
    for i in range(n):
        if not inbasis[i]:
            a_i = tau - 1.0 if rv[i] < 0.0 else tau
            for b in range(k):
                g[b] -= a_i * X[i, b]
    ah, ok = _lu_solve(Xh, g, True)
    if not ok:
        return beta, r, False
    for a in range(k):
        if ah[a] < tau - 1.0 - 1e-9 or ah[a] > tau + 1e-9:
            return beta, r, False
    return bv, rv, True


@njit(cache=True)
def qr_fn(X, y, tau, tol, maxit):
    """Frisch-Newton interior point on the bounded dual of linear quantile regression.

    Returns (beta, residuals, iterations, status).
    """
    n, k = X.shape
    if k == 1:
        q = _type1_quantile(y, tau)
        beta = np.empty(1)
        beta[0] = q
        return beta, y - q, 0, OK
    if not design_rank_ok(X, 1e-10):
        return np.zeros(k), y.copy(), 0, RANK_DEFICIENT

    c = -y
    x = np.full(n, 1.0 - tau)
    s = np.full(n, tau)
    b = _xt_v(X, x)
    G = _weighted_gram(X, np.ones(n))
    L, ok = _cholesky(G, 1e-14)
    if not ok:
        return np.zeros(k), y.copy(), 0, RANK_DEFICIENT
    lam = _chol_solve(L, _xt_v(X, c))
    r = c - _x_v(X, lam)
    for i in range(n):
        if r[i] == 0.0:
            r[i] = 0.001
    z = np.where(r > 0.0, r, 0.0)
    w = z - r
    yscale = 1.0 + np.sum(np.abs(y))
    gap = np.dot(c, x) - np.dot(lam, b) + np.sum(w)
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
        Q = _weighted_gram(X, q)
        L, ok = _cholesky(Q, 1e-15)
        if not ok:
            break
        rhs = _xt_v(X, q * r)
        dy = _chol_solve(L, rhs)
        dx = q * (_x_v(X, dy) - r)
        ds = -dx
        dz = -z * (dx / x + 1.0)
        dw = -w * (ds / s + 1.0)
        fp = min(_STEP * min(_bound(x, dx), _bound(s, ds)), 1.0)
        fd = min(_STEP * min(_bound(w, dw), _bound(z, dz)), 1.0)
        if min(fp, fd) < 1.0:
            mu = np.dot(z, x) + np.dot(w, s)
            g = np.dot(z + fd * dz, x + fp * dx) + np.dot(w + fd * dw, s + fp * ds)
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            dxdz = dx * dz
            dsdw = ds * dw
            xinv = 1.0 / x
            sinv = 1.0 / s
            xi = mu * (xinv - sinv)
            rhs = rhs + _xt_v(X, q * (dxdz - dsdw - xi))
            dy = _chol_solve(L, rhs)
            dx = q * (_x_v(X, dy) + xi - r - dxdz + dsdw)
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
        gap = np.dot(c, x) - np.dot(lam, b) + np.sum(w)

    beta = -lam
    if status != OK:
        return beta, y - _x_v(X, beta), it, status
    beta, r, vertex = _purify(X, y, beta, tau)
    if not vertex:
        for i in range(n):
            if abs(r[i]) <= 1e-9 * (1.0 + abs(y[i])):
                r[i] = 0.0
    return beta, r, it, OK


@njit(cache=True)
def ols_many(C, T, tol):
    """Regress every column of T on [1, C].

    Returns (slopes k x m, intercepts m, residuals n x m, sigma2 m, ok).
    """
    n, k = C.shape
    m = T.shape[1]
    tmean = np.zeros(m)
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += T[i, j]
        tmean[j] = s / n
    R = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            R[i, j] = T[i, j] - tmean[j]
    slopes = np.zeros((k, m))
    if k > 0:
        cmean = np.zeros(k)
        for a in range(k):
            s = 0.0
            for i in range(n):
                s += C[i, a]
            cmean[a] = s / n
        Cc = np.empty((n, k))
        for i in range(n):
            for a in range(k):
                Cc[i, a] = C[i, a] - cmean[a]
        G = _weighted_gram(Cc, np.ones(n))
        L, ok = _cholesky(G, tol)
        if not ok:
            return slopes, tmean, R, np.zeros(m), False
        for j in range(m):
            rhs = np.zeros(k)
            for i in range(n):
                rij = R[i, j]
                for a in range(k):
                    rhs[a] += Cc[i, a] * rij
            th = _chol_solve(L, rhs)
            for a in range(k):
                slopes[a, j] = th[a]
            for i in range(n):
                v = R[i, j]
                for a in range(k):
                    v -= Cc[i, a] * th[a]
                R[i, j] = v
        intercepts = tmean.copy()
        for j in range(m):
            for a in range(k):
                intercepts[j] -= cmean[a] * slopes[a, j]
    else:
        intercepts = tmean.copy()
    sigma2 = np.zeros(m)
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += R[i, j] * R[i, j]
        sigma2[j] = s / n
    return slopes, intercepts, R, sigma2, True


@njit(cache=True)
def _design(X, idx):
    n = X.shape[0]
    k = idx.shape[0]
    D = np.empty((n, k + 1))
    for i in range(n):
        D[i, 0] = 1.0
        for a in range(k):
            D[i, a + 1] = X[i, idx[a]]
    return D


@njit(cache=True)
def _columns(X, idx):
    n = X.shape[0]
    k = idx.shape[0]
    D = np.empty((n, k))
    for i in range(n):
        for a in range(k):
            D[i, a] = X[i, idx[a]]
    return D


@njit(cache=True)
def qpc_shared(X, y, tau, cond, cands, tol, maxit, deg_tol):
    """Sample QPC of each candidate given one shared conditioning set.

    Returns (values, numerators, sigma2, status, alpha, theta, iterations);
    theta is (k+1) x m with intercepts in row 0.
    """
    n = X.shape[0]
    m = cands.shape[0]
    k = cond.shape[0]
    values = np.zeros(m)
    numer = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    theta = np.zeros((k + 1, m))
    D = _design(X, cond)
    alpha, res, iters, st = qr_fn(D, y, tau, tol, maxit)
    if st != OK:
        status[:] = st
        return values, numer, np.zeros(m), status, alpha, theta, iters
    psi = np.empty(n)
    for i in range(n):
        psi[i] = tau - 1.0 if res[i] < 0.0 else tau
    slopes, icpt, R, s2, ok = ols_many(_columns(X, cond), _columns(X, cands), 1e-10)
    if not ok:
        status[:] = RANK_DEFICIENT
        return values, numer, s2, status, alpha, theta, iters
    for j in range(m):
        theta[0, j] = icpt[j]
        for a in range(k):
            theta[a + 1, j] = slopes[a, j]
        if s2[j] <= deg_tol:
            status[j] = DEGENERATE
            continue
        acc = 0.0
        for i in range(n):
            acc += psi[i] * R[i, j]
        numer[j] = acc / n
        values[j] = numer[j] / np.sqrt(tau * (1.0 - tau) * s2[j])
    return values, numer, s2, status, alpha, theta, iters


@njit(cache=True)
def qpc_per_candidate(X, y, tau, cond_mat, cond_len, cands, tol, maxit, deg_tol):
    """Sample QPC where candidate c uses conditioning set cond_mat[c, :cond_len[c]]."""
    m = cands.shape[0]
    values = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    one = np.empty(1, dtype=np.int64)
    for c in range(m):
        one[0] = cands[c]
        cond = cond_mat[c, : cond_len[c]].copy()
        v, _, _, st, _, _, _ = qpc_shared(X, y, tau, cond, one, tol, maxit, deg_tol)
        values[c] = v[0]
        status[c] = st[0]
    return values, status
