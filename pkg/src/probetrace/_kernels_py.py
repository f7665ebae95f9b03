"""Pure numpy twin of the compiled ``_kernels`` module.

Same signatures and the same BiCGSTAB variant; the solver advances all rows
of a batch in lock-step and freezes rows as they finish.
"""
import numpy as np

BREAKDOWN = 1e-14


def _check(sub, sup, V):
    sub = np.ascontiguousarray(sub, dtype=np.float64)
    sup = np.ascontiguousarray(sup, dtype=np.float64)
    V = np.ascontiguousarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("expected a 2-d batch of row vectors")
    L = sub.shape[0]
    if sup.shape[0] != L or V.shape[1] != L:
        raise ValueError("dimension mismatch")
    if L < 3:
        raise ValueError("cyclic tridiagonal kernels need L >= 3")
    return sub, sup, V


def _apply(sub, sup, diag, V, transpose):
    prev = np.roll(V, 1, axis=1)   # v_{i-1}
    nxt = np.roll(V, -1, axis=1)   # v_{i+1}
    if not transpose:
        return diag * V + sub * prev + sup * nxt
    return diag * V + np.roll(sup, 1) * prev + np.roll(sub, -1) * nxt


def tridiag_apply(sub, sup, diag, V, transpose=False):
    """Apply M (or M^T) to every row of ``V``."""
    sub, sup, V = _check(sub, sup, V)
    return _apply(sub, sup, float(diag), V, bool(transpose))


def _rowdot(a, b):
    return np.einsum("ij,ij->i", a, b)


def bicgstab(sub, sup, diag, B, tol, max_iter, transpose=False):
    """Solve ``M x = b`` (or ``M^T x = b``) for every row ``b`` of ``B``.

    Returns ``(X, iters, relres, status)`` with status 0 (converged),
    1 (iteration cap reached) or 2 (breakdown after the single restart).
    """
    sub, sup, B = _check(sub, sup, B)
    diag = float(diag)
    transpose = bool(transpose)
    k, L = B.shape

    def matvec(V):
        return _apply(sub, sup, diag, V, transpose)

    X = np.zeros_like(B)
    R = B.copy()
    Rhat = B.copy()
    P = np.zeros_like(B)
    Vv = np.zeros_like(B)
    bnorm = np.sqrt(_rowdot(B, B))
    rnorm = bnorm.copy()
    rhat_norm = bnorm.copy()
    rho_old = np.ones(k)
    alpha = np.ones(k)
    omega = np.ones(k)
    fresh = np.ones(k, dtype=bool)
    restarts_left = np.ones(k, dtype=np.int32)
    iters = np.zeros(k, dtype=np.int32)
    relres = np.zeros(k)
    status = np.full(k, -1, dtype=np.int32)
    status[bnorm == 0.0] = 0
    thresh = tol * bnorm

    def finish(rows, code):
        status[rows] = code
        relres[rows] = rnorm[rows] / bnorm[rows]

    def new_cycle(rows):
        Rhat[rows] = R[rows]
        rhat_norm[rows] = rnorm[rows]
        P[rows] = 0.0
        Vv[rows] = 0.0
        rho_old[rows] = 1.0
        alpha[rows] = 1.0
        omega[rows] = 1.0
        fresh[rows] = True

    def true_residual(rows):
        R[rows] = B[rows] - matvec(X[rows])
        rnorm[rows] = np.sqrt(_rowdot(R[rows], R[rows]))

    def converged_check(rows):
        # rows whose recursive residual passed: confirm with the true one
        true_residual(rows)
        ok = rnorm[rows] <= thresh[rows]
        finish(rows[ok], 0)
        new_cycle(rows[~ok])

    def breakdown(rows):
        spent = restarts_left[rows] == 0
        finish(rows[spent], 2)
        rows = rows[~spent]
        restarts_left[rows] -= 1
        true_residual(rows)
        ok = rnorm[rows] <= thresh[rows]
        finish(rows[ok], 0)
        new_cycle(rows[~ok])

    while True:
        act = np.flatnonzero(status < 0)
        if act.size == 0:
            break
        capped = iters[act] >= max_iter
        finish(act[capped], 1)
        act = act[~capped]
        if act.size == 0:
            continue

        rho = _rowdot(Rhat[act], R[act])
        brk = (np.abs(rho) <= BREAKDOWN * rhat_norm[act] * rnorm[act]) & ~fresh[act]
        breakdown(act[brk])
        act, rho = act[~brk], rho[~brk]
        if act.size == 0:
            continue
        fresh[act] = False
        iters[act] += 1

        beta = (rho / rho_old[act]) * (alpha[act] / omega[act])
        P[act] = R[act] + beta[:, None] * (P[act] - omega[act, None] * Vv[act])
        Vv[act] = matvec(P[act])
        rv = _rowdot(Rhat[act], Vv[act])
        zero = rv == 0.0
        breakdown(act[zero])
        act, rho, rv = act[~zero], rho[~zero], rv[~zero]

        alpha[act] = rho / rv
        S = R[act] - alpha[act, None] * Vv[act]
        snorm = np.sqrt(_rowdot(S, S))
        early = snorm <= thresh[act]
        rows = act[early]
        X[rows] += alpha[rows, None] * P[rows]
        converged_check(rows)
        act, rho, S = act[~early], rho[~early], S[~early]

        T = matvec(S)
        tt = _rowdot(T, T)
        ts = _rowdot(T, S)
        with np.errstate(divide="ignore", invalid="ignore"):
            om = np.where(tt > 0.0, ts / np.where(tt > 0.0, tt, 1.0), 0.0)
        omega[act] = om
        X[act] += alpha[act, None] * P[act] + om[:, None] * S
        R[act] = S - om[:, None] * T
        rnorm[act] = np.sqrt(_rowdot(R[act], R[act]))
        done = rnorm[act] <= thresh[act]
        converged_check(act[done])
        act, rho, om = act[~done], rho[~done], om[~done]

        stall = om == 0.0
        breakdown(act[stall])
        act, rho = act[~stall], rho[~stall]
        rho_old[act] = rho

    return X, iters, relres, status
