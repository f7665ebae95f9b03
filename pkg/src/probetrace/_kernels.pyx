# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for cyclic tridiagonal matrices.

Batches are 2-d C-contiguous arrays of shape (k, L); each row is one vector.
The pure-Python twin lives in ``_kernels_py`` and has the same signatures.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

cnp.import_array()

cdef double BREAKDOWN = 1e-14

cdef inline void _matvec(const double* sub, const double* sup, double diag,
                         const double* v, double* out, Py_ssize_t L,
                         bint transpose) noexcept nogil:
    cdef Py_ssize_t i
    if not transpose:
        # (Mv)_i = d v_i + sub_i v_{i-1} + sup_i v_{i+1}
        out[0] = diag * v[0] + sub[0] * v[L - 1] + sup[0] * v[1]
        for i in range(1, L - 1):
            out[i] = diag * v[i] + sub[i] * v[i - 1] + sup[i] * v[i + 1]
        out[L - 1] = diag * v[L - 1] + sub[L - 1] * v[L - 2] + sup[L - 1] * v[0]
    else:
        # (M^T v)_i = d v_i + sup_{i-1} v_{i-1} + sub_{i+1} v_{i+1}
        out[0] = diag * v[0] + sup[L - 1] * v[L - 1] + sub[1] * v[1]
        for i in range(1, L - 1):
            out[i] = diag * v[i] + sup[i - 1] * v[i - 1] + sub[i + 1] * v[i + 1]
        out[L - 1] = diag * v[L - 1] + sup[L - 2] * v[L - 2] + sub[0] * v[0]


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += a[i] * b[i]
    return s


cdef inline void _residual(const double* sub, const double* sup, double diag,
                           const double* b, const double* x, double* r,
                           Py_ssize_t L, bint transpose) noexcept nogil:
    cdef Py_ssize_t i
    _matvec(sub, sup, diag, x, r, L, transpose)
    for i in range(L):
        r[i] = b[i] - r[i]


cdef int _solve(const double* sub, const double* sup, double diag,
                const double* b, double* x, Py_ssize_t L, double tol,
                int max_iter, bint transpose, double* work,
                int* iters_out, double* relres_out) noexcept nogil:
    cdef double* r = work
    cdef double* rhat = work + L
    cdef double* p = work + 2 * L
    cdef double* v = work + 3 * L
    cdef double* s = work + 4 * L
    cdef double* t = work + 5 * L
    cdef double bnorm, rnorm, snorm, rhat_norm, rho, rho_old, alpha, omega, beta
    cdef double rv, tt, ts
    cdef int it = 0
    cdef int restarts_left = 1
    cdef bint fresh
    cdef Py_ssize_t i

    memset(x, 0, L * sizeof(double))
    bnorm = sqrt(_dot(b, b, L))
    if bnorm == 0.0:
        iters_out[0] = 0
        relres_out[0] = 0.0
        return 0
    memcpy(r, b, L * sizeof(double))
    rnorm = bnorm

    while True:
        # (re)start a cycle from the current iterate and residual
        memcpy(rhat, r, L * sizeof(double))
        rhat_norm = rnorm
        memset(p, 0, L * sizeof(double))
        memset(v, 0, L * sizeof(double))
        rho_old = 1.0
        alpha = 1.0
        omega = 1.0
        fresh = True
        while True:
            if it >= max_iter:
                iters_out[0] = it
                relres_out[0] = rnorm / bnorm
                return 1
            rho = _dot(rhat, r, L)
            if fabs(rho) <= BREAKDOWN * rhat_norm * rnorm and not fresh:
                break
            fresh = False
            it += 1
            beta = (rho / rho_old) * (alpha / omega)
            for i in range(L):
                p[i] = r[i] + beta * (p[i] - omega * v[i])
            _matvec(sub, sup, diag, p, v, L, transpose)
            rv = _dot(rhat, v, L)
            if rv == 0.0:
                break
            alpha = rho / rv
            for i in range(L):
                s[i] = r[i] - alpha * v[i]
            snorm = sqrt(_dot(s, s, L))
            if snorm <= tol * bnorm:
                for i in range(L):
                    x[i] += alpha * p[i]
                _residual(sub, sup, diag, b, x, r, L, transpose)
                rnorm = sqrt(_dot(r, r, L))
                if rnorm <= tol * bnorm:
                    iters_out[0] = it
                    relres_out[0] = rnorm / bnorm
                    return 0
                # recursive residual drifted; continue from the true one
                fresh = True
                break
            _matvec(sub, sup, diag, s, t, L, transpose)
            tt = _dot(t, t, L)
            ts = _dot(t, s, L)
            omega = ts / tt if tt > 0.0 else 0.0
            for i in range(L):
                x[i] += alpha * p[i] + omega * s[i]
                r[i] = s[i] - omega * t[i]
            rnorm = sqrt(_dot(r, r, L))
            if rnorm <= tol * bnorm:
                _residual(sub, sup, diag, b, x, r, L, transpose)
                rnorm = sqrt(_dot(r, r, L))
                if rnorm <= tol * bnorm:
                    iters_out[0] = it
                    relres_out[0] = rnorm / bnorm
                    return 0
                fresh = True
                break
            if omega == 0.0:
                break
            rho_old = rho
        if fresh:
            continue
        # breakdown: one restart from the current iterate
        if restarts_left == 0:
            iters_out[0] = it
            relres_out[0] = rnorm / bnorm
            return 2
        restarts_left -= 1
        _residual(sub, sup, diag, b, x, r, L, transpose)
        rnorm = sqrt(_dot(r, r, L))
        if rnorm <= tol * bnorm:
            iters_out[0] = it
            relres_out[0] = rnorm / bnorm
            return 0


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


def tridiag_apply(sub, sup, double diag, V, bint transpose=False):
    """Apply M (or M^T) to every row of ``V``."""
    sub, sup, V = _check(sub, sup, V)
    cdef const double[::1] sub_v = sub
    cdef const double[::1] sup_v = sup
    cdef const double[:, ::1] V_v = V
    out = np.empty_like(V)
    cdef double[:, ::1] out_v = out
    cdef Py_ssize_t k = V.shape[0], L = V.shape[1], j
    with nogil:
        for j in range(k):
            _matvec(&sub_v[0], &sup_v[0], diag, &V_v[j, 0], &out_v[j, 0], L, transpose)
    return out


def bicgstab(sub, sup, double diag, B, double tol, int max_iter, bint transpose=False):
    """Solve ``M x = b`` (or ``M^T x = b``) for every row ``b`` of ``B``.

    Returns ``(X, iters, relres, status)`` where status is 0 (converged),
    1 (iteration cap reached) or 2 (breakdown after the single restart).
    """
    sub, sup, B = _check(sub, sup, B)
    cdef const double[::1] sub_v = sub
    cdef const double[::1] sup_v = sup
    cdef const double[:, ::1] B_v = B
    cdef Py_ssize_t k = B.shape[0], L = B.shape[1], j
    X = np.empty_like(B)
    iters = np.zeros(k, dtype=np.int32)
    relres = np.zeros(k, dtype=np.float64)
    status = np.zeros(k, dtype=np.int32)
    cdef double[:, ::1] X_v = X
    cdef int[::1] it_v = iters
    cdef double[::1] rr_v = relres
    cdef int[::1] st_v = status
    cdef double* work = <double*> malloc(6 * L * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        with nogil:
            for j in range(k):
                st_v[j] = _solve(&sub_v[0], &sup_v[0], diag, &B_v[j, 0], &X_v[j, 0],
                                 L, tol, max_iter, transpose, work, &it_v[j], &rr_v[j])
    finally:
        free(work)
    return X, iters, relres, status
