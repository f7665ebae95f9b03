"""Seeded experiment recipes and their file outputs.

Every recipe writes CSV/JSON files into its output directory plus
``manifest.json`` (resolved config, versions, operator-application counts,
wall time, and a SHA-256 for every output).  Seeds are derived from
``(master seed, recipe name, scan index)`` only, so reruns reproduce every
CSV byte for byte.
"""
from dataclasses import dataclass
import csv
import hashlib
import json
import math
import os
import platform
import time

import numpy as np
import scipy

from . import __version__
from ._backend import BACKEND
from ._rng import derive_seed, make_rng
from .config import ConfigError, echo
from .evaluation import (
    N_MIN_CALIBRATION,
    DeviationSample,
    calibrate_bias,
    correction_subset,
    deviation_stats,
    unbiased_from_values,
    write_deviations_csv,
    write_stats_json,
)
from .hutchinson import hutchinson_trace, loglog_slope, variance_scan, write_scan_csv
from .operators import InverseOperator, MatrixSpec, exact_trace
from .probing import probe_estimate
from .training import load_probes, save_probes, step_budget, train, write_log_csv

RECIPE_NAMES = ("fig1-hist", "fig2-noise-scan", "fig3-hutchinson", "fig4-pool-scan",
                "fig5-alpha-scan", "fig7-np-scan", "train", "evaluate", "unbiased")

# desk-scale overrides applied by ``recipe <name>`` below the config file
DESK_DEFAULTS = {"steps": 200_000, "Nr": 10_000}

EXACT_REFERENCE_MAX_L = 200
STOCHASTIC_REFERENCE_NZ = 20_000


@dataclass(frozen=True)
class ExperimentRecipe:
    name: str
    training: object
    options: object
    out_dir: str

    def __post_init__(self):
        if self.name not in RECIPE_NAMES:
            raise ConfigError(f"unknown recipe {self.name!r}; choose from {', '.join(RECIPE_NAMES)}")

    @property
    def master_seed(self):
        return self.training.seed

    def seed(self, *labels):
        return derive_seed(self.master_seed, self.name, *labels)


class TestSet:
    """Fixed held-out matrices with reference traces.

    References are exact (basis-vector traces) up to ``L = 200`` and
    Hutchinson estimates with 20000 vectors above that.
    """

    def __init__(self, training, seeds, label="test", rng_seed=0):
        self.L = training.L
        self.specs = [MatrixSpec(training.L, s, training.noise_sigma) for s in seeds]
        self.ops = [InverseOperator(sp.build(), training.tol, training.max_iter) for sp in self.specs]
        if self.L <= EXACT_REFERENCE_MAX_L:
            self.source, self.n_z = "exact", None
            self.traces = np.array([exact_trace(op) for op in self.ops])
        else:
            self.source, self.n_z = "stochastic", STOCHASTIC_REFERENCE_NZ
            rng = make_rng(rng_seed, label, "reference")
            self.traces = np.array([hutchinson_trace(op, self.n_z, rng).estimate for op in self.ops])
        self.matvecs = len(self.ops) * (self.L if self.source == "exact" else STOCHASTIC_REFERENCE_NZ)

    def __len__(self):
        return len(self.ops)

    def estimates(self, w):
        return np.array([probe_estimate(w, op) for op in self.ops])

    def deviations(self, w):
        return self.traces - self.estimates(w)

    def samples(self, w, d_bar=0.0):
        d = self.deviations(w) - d_bar
        return [DeviationSample(sp.seed, float(x), self.source, self.n_z) for sp, x in zip(self.specs, d)]


class RunContext:
    def __init__(self, recipe):
        self.recipe = recipe
        self.t0 = time.perf_counter()
        self.outputs = []
        self.runs = {}
        self.results = {}
        self.extra_matvecs = 0
        os.makedirs(recipe.out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.recipe.out_dir, name)
        if name not in self.outputs:
            self.outputs.append(name)
        return p

    def record_training(self, tag, state):
        budget = step_budget(state.config, state.pool.n_evaluations, state.n_momentum_searches)
        self.runs[tag] = {
            "config": echo(state.config, self.recipe.options)["training"],
            "matvecs": dict(state.matvecs),
            "matvecs_cumulative": state.matvecs_cumulative,
            "budget": budget,
            "budget_matches": budget["total"] == state.matvecs_cumulative,
            "gamma0": state.gamma0,
            "diagnostics": state.diagnostics[-20:],
        }

    def manifest(self, status, error=None):
        files = []
        for name in self.outputs:
            p = os.path.join(self.recipe.out_dir, name)
            if os.path.exists(p):
                with open(p, "rb") as fh:
                    files.append({"path": name, "sha256": hashlib.sha256(fh.read()).hexdigest()})
        total = sum(r["matvecs_cumulative"] for r in self.runs.values()) + self.extra_matvecs
        return {
            "recipe": self.recipe.name,
            "status": status,
            "error": error,
            "master_seed": self.recipe.master_seed,
            "config": echo(self.recipe.training, self.recipe.options),
            "versions": {"probetrace": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "kernel_backend": BACKEND},
            "matvecs_total": total,
            "runs": self.runs,
            "results": self.results,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "outputs": files,
        }

    def write_manifest(self, status, error=None):
        m = self.manifest(status, error)
        with open(os.path.join(self.recipe.out_dir, "manifest.json"), "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if status != "ok":
            with open(os.path.join(self.recipe.out_dir, "FAILED"), "w") as fh:
                fh.write(f"{error}\n")
        return m


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


CURVE_COLUMNS = ("t", "std_d", "std_d_error", "mean_d", "mean_d_error", "matvecs_cumulative")


def _curve_point(t, d, matvecs):
    n = d.size
    std = float(np.std(d, ddof=1))
    return (t, std, std / math.sqrt(2.0 * (n - 1)), float(d.mean()), std / math.sqrt(n), matvecs)


def _test_set(recipe, training, n, label="test"):
    seeds = [recipe.seed(label, i) for i in range(n)]
    return TestSet(training, seeds, label=label, rng_seed=recipe.master_seed)


def _training_run(ctx, training, tests, tag=""):
    """Train with a learning curve on ``tests``; writes log, curve, checkpoint."""
    opts = ctx.recipe.options
    curve = []

    def on_eval(state):
        curve.append(_curve_point(state.t - 1, tests.deviations(state.w), state.matvecs_cumulative))

    every = opts.eval_every or max(training.N_training // 40, 1)
    _, state = train(training, log_stride=opts.log_stride,
                     checkpoint_path=ctx.path(f"checkpoint{tag}.json"),
                     checkpoint_every=opts.checkpoint_every or None,
                     callback=on_eval, callback_every=every)
    if curve and curve[-1][0] != state.t - 1:
        on_eval(state)
    write_log_csv(state.log, ctx.path(f"log{tag}.csv"))
    _write_csv(ctx.path(f"curve{tag}.csv"), CURVE_COLUMNS, curve)
    ctx.record_training(tag or "main", state)
    ctx.extra_matvecs += tests.matvecs + len(curve) * len(tests) * training.N_p
    return state, curve


def _calibrate_from_pool(ctx, state):
    """Bias offset from the pool's cached stochastic traces.

    If fewer than the minimum number of entries were picked during training,
    further entries are estimated; a pool smaller than that minimum gives no
    calibration (``None``).
    """
    pool, w = state.pool, state.w
    if pool.size < N_MIN_CALIBRATION:
        return None, {"d_bar": None, "reason": f"pool smaller than {N_MIN_CALIBRATION} entries"}
    idx = pool.cached_indices()
    if idx.size < N_MIN_CALIBRATION:
        missing = [i for i in range(pool.size) if not pool.is_cached(i)][:N_MIN_CALIBRATION - idx.size]
        pool.warm(missing)
        ctx.extra_matvecs += len(missing) * pool.n_z
        idx = pool.cached_indices()
    n_calib = ctx.recipe.options.n_calib
    if n_calib:
        idx = idx[:max(n_calib, N_MIN_CALIBRATION)]
    samples = [DeviationSample(pool.matrix_seed(i), float(pool.cache[i] - probe_estimate(w, pool.operator(i))),
                               "stochastic", pool.n_z) for i in idx]
    ctx.extra_matvecs += len(idx) * w.N_p
    ce = calibrate_bias(w, samples)
    d = np.array([s.d for s in samples])
    return ce, {"d_bar": ce.d_bar, "d_bar_error": float(np.std(d, ddof=1) / math.sqrt(d.size)),
                "count": int(d.size), "source": "pool-stochastic", "N_z": pool.n_z}


def _load_probes(path):
    if not os.path.isfile(path):
        raise ConfigError(f"probes: no such file {path!r}")
    return load_probes(path)


def _probes_or_train(ctx, tests):
    recipe = ctx.recipe
    if recipe.options.probes:
        w, d_bar = _load_probes(recipe.options.probes)
        if w.L != recipe.training.L:
            raise ConfigError(f"probes have L={w.L}, config has L={recipe.training.L}")
        return w, d_bar
    training = recipe.training.replace(seed=recipe.seed(0))
    state, _ = _training_run(ctx, training, tests)
    ce, calib = _calibrate_from_pool(ctx, state)
    ctx.results["calibration"] = calib
    save_probes(state.w, ctx.path("probes.json"), d_bar=calib["d_bar"])
    return state.w, calib["d_bar"]


# --- recipes ------------------------------------------------------------

def _recipe_train(ctx):
    recipe = ctx.recipe
    tests = _test_set(recipe, recipe.training, recipe.options.n_test)
    training = recipe.training.replace(seed=recipe.seed(0))
    state, curve = _training_run(ctx, training, tests)
    _, calib = _calibrate_from_pool(ctx, state)
    save_probes(state.w, ctx.path("probes.json"), d_bar=calib["d_bar"])
    final = curve[-1] if curve else None
    ctx.results.update({"calibration": calib, "final_std_d": final[1] if final else None,
                        "final_mean_d": final[3] if final else None,
                        "initial_std_d": curve[0][1] if curve else None})


def _recipe_evaluate(ctx):
    recipe = ctx.recipe
    if not recipe.options.probes:
        raise ConfigError("evaluate: missing required key 'probes'")
    w, d_bar = _load_probes(recipe.options.probes)
    tests = _test_set(recipe, recipe.training, recipe.options.n_test)
    ctx.extra_matvecs += tests.matvecs + len(tests) * w.N_p
    samples = tests.samples(w)
    write_deviations_csv(samples, ctx.path("deviations.csv"))
    st = deviation_stats(samples)
    write_stats_json(st, ctx.path("stats.json"))
    ctx.results["raw"] = st.to_dict()
    if d_bar is not None:
        corrected = [DeviationSample(s.matrix_id, s.d - d_bar, s.trace_source, s.n_z) for s in samples]
        cst = deviation_stats(corrected)
        write_stats_json(cst, ctx.path("stats_corrected.json"))
        ctx.results["corrected"] = cst.to_dict()


def _recipe_fig1(ctx):
    recipe = ctx.recipe
    tests = _test_set(recipe, recipe.training, recipe.options.n_test)
    w, _ = _probes_or_train(ctx, tests)
    hist = _test_set(recipe, recipe.training, recipe.options.n_hist, label="hist")
    ctx.extra_matvecs += hist.matvecs + len(hist) * w.N_p
    samples = hist.samples(w)
    write_deviations_csv(samples, ctx.path("deviations.csv"))
    st = deviation_stats(samples)
    write_stats_json(st, ctx.path("stats.json"))
    # histogram with the overlaid normal density integrated over each bin
    from scipy.stats import norm
    edges = st.bin_edges
    expected = st.count * np.diff(norm.cdf(edges, loc=st.mean, scale=st.std if st.std > 0 else 1.0))
    _write_csv(ctx.path("histogram.csv"), ("bin_left", "bin_right", "count", "normal_expected"),
               [(float(a), float(b), int(c), float(e)) for a, b, c, e in zip(edges[:-1], edges[1:], st.counts, expected)])
    ctx.results["stats"] = {k: v for k, v in st.to_dict().items() if k != "histogram"}


def _scan(ctx, field, values, label, adjust=None):
    recipe = ctx.recipe
    tests = _test_set(recipe, recipe.training, recipe.options.n_test)
    summary = []
    for i, value in enumerate(values):
        changes = {field: value, "seed": recipe.seed(i)}
        if adjust is not None:
            changes.update(adjust(value))
        training = recipe.training.replace(**changes)
        state, curve = _training_run(ctx, training, tests, tag=f"_{label}{value}")
        final = curve[-1]
        summary.append((value, training.eta, final[1], final[2], final[3], final[4], state.matvecs_cumulative))
    _write_csv(ctx.path("summary.csv"),
               (label, "eta", "final_std_d", "final_std_d_error", "final_mean_d", "final_mean_d_error",
                "matvecs_cumulative"), summary)


def _recipe_fig2(ctx):
    _scan(ctx, "N_z", ctx.recipe.options.scan_values([50, 100, 200, 400, 800, 1600], int), "Nz")


def _recipe_fig4(ctx):
    _scan(ctx, "N_r", ctx.recipe.options.scan_values([100, 1000, 10_000, 100_000], int), "Nr")


def fig5_eta(alpha, L):
    """Momentum paired with each schedule rate in the alpha scan."""
    if alpha == 0.0:
        return 0.5
    if alpha <= 1e-6:
        return 0.5 if L <= 100 else 0.65
    return 0.8


def _recipe_fig5(ctx):
    L = ctx.recipe.training.L
    _scan(ctx, "alpha", ctx.recipe.options.scan_values([0.0, 1e-6, 1e-5, 1e-4], float), "alpha",
          adjust=lambda a: {"eta": fig5_eta(a, L)})


def _recipe_fig7(ctx):
    _scan(ctx, "N_p", ctx.recipe.options.scan_values([2, 4, 8, 16, 32], int), "Np")


def _recipe_fig3(ctx):
    recipe = ctx.recipe
    opts = recipe.options
    nz = opts.scan_values([100, 200, 400, 800, 1600, 3200, 6400, 10_000], int)
    ops = [InverseOperator(MatrixSpec(recipe.training.L, recipe.seed("matrix", i), recipe.training.noise_sigma).build(),
                           recipe.training.tol, recipe.training.max_iter)
           for i in range(opts.n_matrices)]
    exact = [exact_trace(op) for op in ops]
    rows = variance_scan(ops, nz, opts.repeats, make_rng(recipe.seed("noise")), exact_traces=exact)
    write_scan_csv(rows, ctx.path("hutchinson_scan.csv"))
    ctx.extra_matvecs += len(ops) * recipe.training.L + len(ops) * opts.repeats * sum(nz)
    if len(rows) > 1:
        ctx.results["loglog_slope"] = loglog_slope([r.n_z for r in rows], [r.mean_abs_error for r in rows])


def _recipe_unbiased(ctx):
    recipe = ctx.recipe
    opts = recipe.options
    tests = _test_set(recipe, recipe.training, opts.n_test)
    w, d_bar = _probes_or_train(ctx, tests)
    d_bar = 0.0 if d_bar is None else d_bar
    training = recipe.training
    specs = [MatrixSpec(training.L, recipe.seed("unbiased", i), training.noise_sigma) for i in range(opts.N)]
    ops = [InverseOperator(sp.build(), training.tol, training.max_iter) for sp in specs]
    approx = np.array([probe_estimate(w, op) for op in ops]) + d_bar
    subset = correction_subset(opts.N, opts.Nc, opts.subset)
    if opts.reference == "exact":
        ref = np.array([exact_trace(ops[j]) for j in subset])
        ctx.extra_matvecs += len(subset) * training.L
    else:
        rng = make_rng(recipe.seed("reference"))
        ref = np.array([hutchinson_trace(ops[j], training.N_z, rng).estimate for j in subset])
        ctx.extra_matvecs += len(subset) * training.N_z
    ctx.extra_matvecs += opts.N * w.N_p
    res = unbiased_from_values(approx, ref, opts.f, opts.Nc, opts.subset)
    report = res.to_dict()
    report.update({"reference": opts.reference, "subset": opts.subset, "d_bar": d_bar})
    if d_bar:
        plain = unbiased_from_values(approx - d_bar, ref, opts.f, opts.Nc, opts.subset)
        report.update({"estimate_without_d_bar": plain.estimate, "error_without_d_bar": plain.error})
    ref_at = dict(zip(subset.tolist(), ref.tolist()))
    _write_csv(ctx.path("unbiased_traces.csv"), ("matrix_seed", "corrected_estimate", "reference"),
               [(sp.seed, float(a), ref_at.get(i, "")) for i, (sp, a) in enumerate(zip(specs, approx))])
    with open(ctx.path("report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ctx.results["unbiased"] = report


_RECIPES = {
    "fig1-hist": _recipe_fig1,
    "fig2-noise-scan": _recipe_fig2,
    "fig3-hutchinson": _recipe_fig3,
    "fig4-pool-scan": _recipe_fig4,
    "fig5-alpha-scan": _recipe_fig5,
    "fig7-np-scan": _recipe_fig7,
    "train": _recipe_train,
    "evaluate": _recipe_evaluate,
    "unbiased": _recipe_unbiased,
}


def run_recipe(recipe):
    """Run ``recipe``; returns the manifest dict.

    On failure the partial outputs stay in place, the manifest records the
    error and a ``FAILED`` marker file is written before re-raising.
    """
    try:
        os.makedirs(recipe.out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {recipe.out_dir!r}: {exc}") from None
    if not os.access(recipe.out_dir, os.W_OK):
        raise ConfigError(f"output directory {recipe.out_dir!r} is not writable")
    ctx = RunContext(recipe)
    try:
        _RECIPES[recipe.name](ctx)
    except Exception as exc:
        ctx.write_manifest("failed", f"{type(exc).__name__}: {exc}")
        raise
    return ctx.write_manifest("ok")
