"""Quality of a trained estimator: deviations, bias offset, unbiased averages."""
from dataclasses import dataclass, field
import csv
import json
import math

import numpy as np
from scipy import stats

from ._rng import make_rng
from .hutchinson import hutchinson_trace
from .operators import exact_trace
from .probing import probe_estimate

N_MIN_CALIBRATION = 100


class TooFewSamples(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DeviationSample:
    matrix_id: int | None
    d: float
    trace_source: str        # "exact" or "stochastic"
    n_z: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.d):
            raise ValueError("deviation must be finite")
        if self.trace_source not in ("exact", "stochastic"):
            raise ValueError(f"unknown trace source {self.trace_source!r}")


def deviation(w, op, reference_trace, source="exact", n_z=None, matrix_id=None):
    """``reference_trace`` minus the estimate of ``w`` (raw or corrected) on ``op``."""
    est = corrected_estimate(w, op) if isinstance(w, CorrectedEstimator) else probe_estimate(w, op)
    return DeviationSample(matrix_id, float(reference_trace - est), source, n_z)


@dataclass
class CorrectedEstimator:
    w: object
    d_bar: float
    calibration_ids: tuple = ()

    def __post_init__(self):
        if not math.isfinite(self.d_bar):
            raise ValueError("d_bar must be finite")


def calibrate_bias(w, samples, n_min=N_MIN_CALIBRATION):
    """Bias offset ``d_bar``: the mean deviation over ``samples``.

    ``samples`` are deviations of ``w`` itself.  If ``w`` is already a
    ``CorrectedEstimator`` the new mean is added to its offset, so
    recalibrating on the same matrices changes nothing.
    """
    samples = list(samples)
    if len(samples) < n_min:
        raise TooFewSamples(f"need at least {n_min} deviation samples, got {len(samples)}")
    d_bar = float(np.mean([s.d for s in samples]))
    ids = tuple(s.matrix_id for s in samples)
    if isinstance(w, CorrectedEstimator):
        return CorrectedEstimator(w.w, w.d_bar + d_bar, ids)
    return CorrectedEstimator(w, d_bar, ids)


def corrected_estimate(ce, op):
    """Probing estimate plus the calibrated offset."""
    return probe_estimate(ce.w, op) + ce.d_bar


def corrected_deviations(ce, samples):
    """Deviations of ``ce`` given deviations of its raw probes."""
    return [DeviationSample(s.matrix_id, s.d - ce.d_bar, s.trace_source, s.n_z) for s in samples]


@dataclass
class DeviationStats:
    count: int
    mean: float
    std: float
    std_error_of_mean: float
    bin_edges: np.ndarray
    counts: np.ndarray
    skewness: float
    skewness_se: float
    excess_kurtosis: float
    excess_kurtosis_se: float

    def to_dict(self):
        return {
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "std_error_of_mean": self.std_error_of_mean,
            "histogram": {"bin_edges": [float(x) for x in self.bin_edges],
                          "counts": [int(c) for c in self.counts]},
            "normality": {"skewness": self.skewness, "skewness_se": self.skewness_se,
                          "excess_kurtosis": self.excess_kurtosis,
                          "excess_kurtosis_se": self.excess_kurtosis_se},
        }


def _values(samples):
    return np.array([s.d if isinstance(s, DeviationSample) else s for s in samples], dtype=np.float64)


def deviation_stats(samples, bins="fd"):
    """Moments, histogram and a normality summary of deviations.

    Standard errors of skewness and excess kurtosis are the usual
    normal-theory ones for sample size ``N``.  ``bins`` is passed to
    ``numpy.histogram`` (Freedman-Diaconis by default; a constant sample
    falls back to a single bin).
    """
    d = _values(samples)
    n = d.size
    if n < 2:
        raise TooFewSamples("deviation_stats needs at least 2 samples")
    std = float(np.std(d, ddof=1))
    if std == 0.0:
        counts, edges = np.array([n]), np.array([d[0] - 0.5, d[0] + 0.5])
        skew = kurt = 0.0
    else:
        counts, edges = np.histogram(d, bins=bins)
        skew = float(stats.skew(d, bias=False)) if n > 2 else 0.0
        kurt = float(stats.kurtosis(d, fisher=True, bias=False)) if n > 3 else 0.0
    if n > 3:
        skew_se = math.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))
        kurt_se = 2.0 * skew_se * math.sqrt((n * n - 1.0) / ((n - 3) * (n + 5)))
    else:
        skew_se = kurt_se = float("nan")
    return DeviationStats(
        count=n, mean=float(d.mean()), std=std, std_error_of_mean=std / math.sqrt(n),
        bin_edges=edges, counts=counts, skewness=skew, skewness_se=skew_se,
        excess_kurtosis=kurt, excess_kurtosis_se=kurt_se,
    )


# --- functions of the trace ---------------------------------------------

def _reciprocal(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x == 0.0):
        raise DomainError("reciprocal of a zero trace")
    return 1.0 / x


TRACE_FUNCTIONS = {
    "identity": lambda x: np.asarray(x, dtype=np.float64),
    "square": lambda x: np.asarray(x, dtype=np.float64) ** 2,
    "reciprocal": _reciprocal,
    "exp_neg": lambda x: np.exp(-np.asarray(x, dtype=np.float64)),
}


def trace_function(name):
    try:
        return TRACE_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown trace function {name!r}; choose from {sorted(TRACE_FUNCTIONS)}") from None


def correction_subset(n, n_c, mode="first"):
    """Indices used in the correction term: the first ``n_c``, or spread evenly."""
    if not 1 <= n_c <= n:
        raise ValueError(f"need 1 <= N_c <= N, got N_c={n_c}, N={n}")
    if mode == "first":
        return np.arange(n_c)
    if mode == "strided":
        return np.floor(np.arange(n_c) * (n / n_c)).astype(int)
    raise ValueError(f"unknown correction subset mode {mode!r}")


@dataclass
class UnbiasedResult:
    estimate: float
    error: float
    n: int
    n_c: int
    f: str
    naive: float = float("nan")   # first term alone
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"estimate": self.estimate, "error": self.error, "N": self.n,
                "N_c": self.n_c, "f": self.f, "naive": self.naive, **self.extra}


def unbiased_from_values(approx, reference, f="identity", n_c=None, mode="first"):
    """Bias-corrected mean of ``f(trace)`` from precomputed traces.

    ``approx`` holds the (corrected) probing estimates of all ``N``
    matrices; ``reference`` holds unbiased traces for the correction subset,
    either as a length-``N_c`` array aligned with the subset or as a
    length-``N`` array (only subset entries are read).

    The estimate is ``mean_i f(approx_i) + mean_{j in C} [f(ref_j) - f(approx_j)]``.
    The error is a delete-one jackknife over matrices; removing a matrix in
    the subset changes both terms, which carries their correlation.
    """
    fname = f if isinstance(f, str) else getattr(f, "__name__", "custom")
    fn = trace_function(f) if isinstance(f, str) else f
    approx = np.asarray(approx, dtype=np.float64)
    n = approx.size
    n_c = n if n_c is None else int(n_c)
    subset = correction_subset(n, n_c, mode)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == n:
        ref_c = reference[subset]
    elif reference.size == n_c:
        ref_c = reference
    else:
        raise ValueError("reference must have length N or N_c")

    fa = fn(approx)
    fa_c = fa[subset]
    fr_c = fn(ref_c)
    first = np.mean(fa)
    # same reduction for both approx sums, so N_c = N cancels exactly
    estimate = float((first - np.mean(fa_c)) + np.mean(fr_c))

    if n < 2:
        error = float("nan")
    else:
        in_c = np.zeros(n, dtype=bool)
        in_c[subset] = True
        diff = np.zeros(n)
        diff[subset] = fr_c - fa_c
        sum_fa, sum_diff = fa.sum(), diff.sum()
        loo_first = (sum_fa - fa) / (n - 1)
        if n_c > 1:
            loo_corr = np.where(in_c, (sum_diff - diff) / max(n_c - 1, 1), sum_diff / n_c)
            loo = loo_first + loo_corr
            error = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
        else:
            error = float("nan")
    return UnbiasedResult(estimate=estimate, error=error, n=n, n_c=n_c, f=fname, naive=float(first))


def unbiased_function_expectation(ce, operators, f="identity", n_c=None, reference="exact",
                                  n_z=800, rng=None, mode="first"):
    """Bias-corrected ``<f(tr M)>`` over ``operators``.

    Corrected probing estimates are computed for every operator; unbiased
    references (``"exact"`` basis-vector traces or ``"stochastic"``
    Hutchinson estimates with ``n_z`` vectors) only for the correction
    subset.
    """
    operators = list(operators)
    n = len(operators)
    n_c = n if n_c is None else int(n_c)
    approx = np.array([corrected_estimate(ce, op) for op in operators])
    subset = correction_subset(n, n_c, mode)
    if reference == "exact":
        ref = np.array([exact_trace(operators[j]) for j in subset])
    elif reference == "stochastic":
        if rng is None:
            rng = make_rng(0, "unbiased-reference")
        ref = np.array([hutchinson_trace(operators[j], n_z, rng).estimate for j in subset])
    else:
        raise ValueError(f"reference must be 'exact' or 'stochastic', got {reference!r}")
    res = unbiased_from_values(approx, ref, f, n_c, mode)
    res.extra = {"reference": reference, "mode": mode}
    return res


# --- file outputs -------------------------------------------------------

def write_deviations_csv(samples, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["matrix_seed", "d", "trace_source", "N_z"])
        for s in samples:
            writer.writerow(["" if s.matrix_id is None else s.matrix_id, repr(s.d),
                             s.trace_source, "" if s.n_z is None else s.n_z])


def write_stats_json(st, path):
    with open(path, "w") as fh:
        json.dump(st.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
