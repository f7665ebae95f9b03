"""Matrix-free linear operators and the cyclic tridiagonal ensemble.

Operators act on single vectors of shape ``(L,)`` or on batches of shape
``(k, L)`` (one vector per row).  A batch counts as ``k`` applications.
"""
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from ._rng import philox_normals

DENSE_CAP = 512
DEFAULT_TOL = 1e-10


class DimensionError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class SolverFailure(RuntimeError):
    """BiCGSTAB did not reach the requested tolerance."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _as_batch(v, dim):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    batch = v[None, :] if single else v
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise DimensionError(f"expected vectors of length {dim}, got shape {v.shape}")
    return batch, single


class LinearOperator:
    """Square operator known only through products with vectors.

    Subclasses implement ``_apply_batch`` and ``_apply_transpose_batch`` on
    ``(k, dim)`` arrays.  ``symmetric`` lets callers skip transpose
    applications.
    """

    dim: int
    symmetric: bool = False

    def apply(self, v):
        batch, single = _as_batch(v, self.dim)
        out = self._apply_batch(batch)
        return out[0] if single else out

    def apply_transpose(self, v):
        batch, single = _as_batch(v, self.dim)
        if self.symmetric:
            out = self._apply_batch(batch)
        else:
            out = self._apply_transpose_batch(batch)
        return out[0] if single else out

    def _apply_batch(self, V):
        raise NotImplementedError

    def _apply_transpose_batch(self, V):
        raise NotImplementedError

    def __matmul__(self, v):
        return self.apply(v)


class IdentityOperator(LinearOperator):
    symmetric = True

    def __init__(self, dim):
        self.dim = int(dim)

    def _apply_batch(self, V):
        return V.copy()


@dataclass(frozen=True, eq=False)
class DenseMatrix(LinearOperator):
    """Explicit small matrix; used as a test oracle."""

    entries: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"dense matrix must be square, got {a.shape}")
        if a.shape[0] > DENSE_CAP:
            raise CapacityError(f"dense matrices are capped at {DENSE_CAP}, got {a.shape[0]}")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self):
        return self.entries.shape[0]

    @property
    def L(self):
        return self.dim

    def _apply_batch(self, V):
        return V @ self.entries.T

    def _apply_transpose_batch(self, V):
        return V @ self.entries


@dataclass(frozen=True, eq=False)
class CyclicTridiagonalMatrix(LinearOperator):
    """``M = diag*I + sub on (i, i-1 mod L) + sup on (i, i+1 mod L)``."""

    L: int
    sup: np.ndarray
    sub: np.ndarray
    diag: float = 1.0
    seed: int | None = None
    noise_sigma: float | None = None

    def __post_init__(self):
        if self.L < 3:
            raise DimensionError(f"cyclic tridiagonal matrices need L >= 3, got {self.L}")
        for name in ("sup", "sub"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.L,):
                raise DimensionError(f"{name} must have length {self.L}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self):
        return self.L

    def _apply_batch(self, V):
        return kernels.tridiag_apply(self.sub, self.sup, self.diag, V, False)

    def _apply_transpose_batch(self, V):
        return kernels.tridiag_apply(self.sub, self.sup, self.diag, V, True)

    def spec(self):
        if self.seed is None:
            raise ValueError("matrix was not generated from a seed")
        return MatrixSpec(self.L, self.seed, self.noise_sigma)

    def to_dense(self):
        a = np.eye(self.L) * self.diag
        idx = np.arange(self.L)
        a[idx, (idx - 1) % self.L] += self.sub
        a[idx, (idx + 1) % self.L] += self.sup
        return a


@dataclass(frozen=True)
class MatrixSpec:
    """Regeneration record ``L,seed,noise_sigma`` for an ensemble member."""

    L: int
    seed: int
    noise_sigma: float = 0.1

    def to_record(self):
        return f"{self.L},{self.seed},{self.noise_sigma!r}"

    @classmethod
    def from_record(cls, text):
        parts = text.strip().split(",")
        if len(parts) != 3:
            raise ValueError(f"matrix record needs 'L,seed,noise_sigma', got {text!r}")
        return cls(int(parts[0]), int(parts[1]), float(parts[2]))

    def build(self):
        return generate_random_matrix(self.L, self.seed, self.noise_sigma)


def generate_random_matrix(L, seed, noise_sigma=0.1):
    """Draw one member of the cyclic tridiagonal ensemble.

    Entries: 1 on the diagonal, ``-0.5 + xi`` at ``(i, i+1 mod L)`` and
    ``+0.5 + xi`` at ``(i, i-1 mod L)`` with independent
    ``xi ~ N(0, noise_sigma**2)``.  The ``2L`` normals are
    ``philox_normals(seed, 2L)``: the first ``L`` go to the super-diagonal
    (row order), the next ``L`` to the sub-diagonal.
    """
    if L < 3:
        raise DimensionError(f"L must be >= 3, got {L}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    z = philox_normals(seed, 2 * L)
    sup = -0.5 + noise_sigma * z[:L]
    sub = 0.5 + noise_sigma * z[L:]
    return CyclicTridiagonalMatrix(L=int(L), sup=sup, sub=sub, diag=1.0,
                                   seed=int(seed), noise_sigma=float(noise_sigma))


def apply(m, v):
    return m.apply(v)


def apply_transpose(m, v):
    return m.apply_transpose(v)


@dataclass
class SolveInfo:
    iterations: np.ndarray
    relres: np.ndarray


def bicgstab_solve(m, b, tol=DEFAULT_TOL, max_iter=None, transpose=False, return_info=False):
    """Solve ``M x = b`` (``M^T x = b`` with ``transpose``) by BiCGSTAB.

    ``b`` may be a batch of right-hand sides (rows).  Raises
    ``SolverFailure`` if any row misses the relative residual ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    batch, single = _as_batch(b, m.L)
    if max_iter is None:
        max_iter = 10 * m.L
    X, iters, relres, status = kernels.bicgstab(
        m.sub, m.sup, m.diag, batch, float(tol), int(max_iter), bool(transpose))
    if np.any(status != 0):
        bad = int(np.flatnonzero(status != 0)[0])
        reason = "iteration cap reached" if status[bad] == 1 else "breakdown"
        raise SolverFailure(
            f"BiCGSTAB failed ({reason}) after {iters[bad]} iterations, "
            f"relative residual {relres[bad]:.3e}",
            residual=float(relres[bad]), iterations=int(iters[bad]))
    x = X[0] if single else X
    if return_info:
        return x, SolveInfo(iters, relres)
    return x


@dataclass(frozen=True, eq=False)
class InverseOperator(LinearOperator):
    """``M^{-1}`` applied by BiCGSTAB; transposes solve with ``M^T``."""

    base: CyclicTridiagonalMatrix
    tol: float = DEFAULT_TOL
    max_iter: int | None = None
    symmetric: bool = field(default=False, init=False)

    @property
    def dim(self):
        return self.base.L

    @property
    def L(self):
        return self.base.L

    def _apply_batch(self, V):
        return bicgstab_solve(self.base, V, self.tol, self.max_iter, transpose=False)

    def _apply_transpose_batch(self, V):
        return bicgstab_solve(self.base, V, self.tol, self.max_iter, transpose=True)


def exact_trace(op):
    """Trace from ``dim`` basis-vector applications: sum of ``e_i^T A e_i``."""
    columns = op.apply(np.eye(op.dim))   # row i holds A e_i
    return float(np.sum(np.diagonal(columns)))


def dense_realize(op, cap=DENSE_CAP):
    """Explicit matrix whose column ``j`` is ``op.apply(e_j)``."""
    if op.dim > cap:
        raise CapacityError(f"operator dimension {op.dim} exceeds dense cap {cap}")
    return DenseMatrix(op.apply(np.eye(op.dim)).T, symmetric=op.symmetric)
