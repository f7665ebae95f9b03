"""Hutchinson stochastic trace estimation with Rademacher noise."""
from dataclasses import dataclass
import csv

import numpy as np

CHUNK = 4096


@dataclass(frozen=True)
class HutchinsonResult:
    estimate: float
    n_vectors: int
    sample_std: float
    std_error: float
    samples: np.ndarray   # per-vector quadratic forms z^T A z


def rademacher_vector(L, rng):
    """Vector of independent +-1 entries, each with probability 1/2."""
    return rademacher_vectors(1, L, rng)[0]


def rademacher_vectors(n, L, rng):
    if L < 1:
        raise ValueError("L must be >= 1")
    return rng.integers(0, 2, size=(n, L)).astype(np.float64) * 2.0 - 1.0


def quadratic_forms(op, Z):
    """``z_i^T A z_i`` for every row of ``Z``."""
    return np.einsum("ij,ij->i", Z, op.apply(Z))


def hutchinson_trace(op, n_vectors, rng):
    """Estimate ``tr(A)`` as the mean of ``z^T A z`` over Rademacher ``z``.

    Noise vectors are drawn and applied in chunks of ``CHUNK`` rows, in
    order, so a given generator state always yields the same result.
    """
    if n_vectors < 2:
        raise ValueError("n_vectors must be >= 2 for a sample std")
    samples = np.empty(n_vectors)
    for start in range(0, n_vectors, CHUNK):
        k = min(CHUNK, n_vectors - start)
        Z = rademacher_vectors(k, op.dim, rng)
        samples[start:start + k] = quadratic_forms(op, Z)
    estimate = float(np.mean(samples))
    sample_std = float(np.std(samples, ddof=1))
    return HutchinsonResult(
        estimate=estimate,
        n_vectors=int(n_vectors),
        sample_std=sample_std,
        std_error=sample_std / np.sqrt(n_vectors),
        samples=samples,
    )


@dataclass(frozen=True)
class ScanRow:
    n_z: int
    mean_abs_error: float
    std_error_of_that: float
    repeats: int
    mean_reported_std_error: float   # noise-vector component
    between_matrix_std: float        # spread of |error| across matrices


SCAN_COLUMNS = ("N_z", "mean_abs_error", "std_error_of_that", "repeats",
                "mean_reported_std_error", "between_matrix_std")


def variance_scan(operators, nz_list, repeats, rng, exact_traces=None):
    """Hutchinson error versus number of noise vectors.

    For each ``N_z``, every operator is estimated ``repeats`` times; the
    absolute error against the exact trace is averaged over operators and
    repeats.  The two error components are reported separately: the mean of
    the per-run std errors, and the std across operators of the
    per-operator mean |error|.
    """
    from .operators import exact_trace

    operators = list(operators)
    if exact_traces is None:
        exact_traces = [exact_trace(op) for op in operators]
    rows = []
    for n_z in nz_list:
        errs = np.empty((len(operators), repeats))
        reported = np.empty_like(errs)
        for i, (op, tr) in enumerate(zip(operators, exact_traces)):
            for r in range(repeats):
                res = hutchinson_trace(op, n_z, rng)
                errs[i, r] = abs(res.estimate - tr)
                reported[i, r] = res.std_error
        flat = errs.ravel()
        between = float(np.std(errs.mean(axis=1), ddof=1)) if len(operators) > 1 else 0.0
        rows.append(ScanRow(
            n_z=int(n_z),
            mean_abs_error=float(flat.mean()),
            std_error_of_that=float(flat.std(ddof=1) / np.sqrt(flat.size)) if flat.size > 1 else 0.0,
            repeats=int(repeats),
            mean_reported_std_error=float(reported.mean()),
            between_matrix_std=between,
        ))
    return rows


def write_scan_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCAN_COLUMNS)
        for row in rows:
            writer.writerow([row.n_z, repr(row.mean_abs_error), repr(row.std_error_of_that),
                             row.repeats, repr(row.mean_reported_std_error),
                             repr(row.between_matrix_std)])


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
