"""Deviations, bias calibration, statistics and the unbiased function-of-trace estimator."""
import json

import numpy as np
import pytest

from probetrace._rng import derive_seed, make_rng
from probetrace.evaluation import (
    CorrectedEstimator,
    DeviationSample,
    DomainError,
    TooFewSamples,
    calibrate_bias,
    corrected_deviations,
    corrected_estimate,
    correction_subset,
    deviation,
    deviation_stats,
    trace_function,
    unbiased_from_values,
    unbiased_function_expectation,
    write_deviations_csv,
    write_stats_json,
)
from probetrace.hutchinson import hutchinson_trace
from probetrace.operators import InverseOperator, exact_trace, generate_random_matrix
from probetrace.probing import init_probing_vectors, probe_estimate
from probetrace.training import TrainingConfig, train

L16 = 16
N_RUNS, N_PER_RUN = 100, 400


def _op(seed, L=L16):
    return InverseOperator(generate_random_matrix(L, seed, 0.1))


@pytest.fixture(scope="module")
def probes16():
    cfg = TrainingConfig(L=L16, N_p=4, N_z=200, N_r=200, N_training=3000, seed=1)
    w, _ = train(cfg)
    raw = init_probing_vectors(4, L16, make_rng(cfg.seed, "init"))
    return w, raw


@pytest.fixture(scope="module")
def ensemble16(probes16):
    """Exact traces and probe estimates for ``N_RUNS`` runs of ``N_PER_RUN`` matrices."""
    w, raw = probes16
    exact = np.empty((N_RUNS, N_PER_RUN))
    trained = np.empty_like(exact)
    untrained = np.empty_like(exact)
    for r in range(N_RUNS):
        for i in range(N_PER_RUN):
            op = _op(derive_seed(77, "ensemble", r, i))
            AE = op.apply(np.eye(L16))
            exact[r, i] = np.trace(AE)
            trained[r, i] = probe_estimate(w, op)
            untrained[r, i] = probe_estimate(raw, op)
    return exact, trained, untrained


def _samples(values, source="exact"):
    return [DeviationSample(i, float(v), source) for i, v in enumerate(values)]


class TestDeviation:
    def test_full_basis_is_exact(self):
        op = _op(3)
        assert deviation(np.eye(L16), op, exact_trace(op)).d == pytest.approx(0.0, abs=1e-12)

    def test_dense_oracle(self, rng):
        op = _op(4)
        w = rng.standard_normal((3, L16))
        dense_inv = np.linalg.inv(op.base.to_dense())
        expected = np.trace(dense_inv) - sum(p @ dense_inv @ p for p in w)
        assert deviation(w, op, np.trace(dense_inv)).d == pytest.approx(expected, rel=1e-9)

    def test_shift_of_reference(self, rng):
        op = _op(5)
        w = rng.standard_normal((2, L16))
        base = deviation(w, op, 10.0).d
        assert deviation(w, op, 10.0 + 0.375).d - base == 0.375

    def test_stochastic_reference_unbiased(self, rng):
        op = _op(6)
        w = rng.standard_normal((2, L16))
        d_exact = deviation(w, op, exact_trace(op)).d
        d = np.array([deviation(w, op, hutchinson_trace(op, 50, rng).estimate, "stochastic", 50).d
                      for _ in range(200)])
        assert abs(d.mean() - d_exact) <= 4 * d.std(ddof=1) / np.sqrt(d.size)

    def test_corrected_input(self, rng):
        op = _op(7)
        w = rng.standard_normal((2, L16))
        ce = CorrectedEstimator(w, 0.5)
        assert deviation(ce, op, 3.0).d == pytest.approx(deviation(w, op, 3.0).d - 0.5, rel=1e-14)

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            DeviationSample(0, float("nan"), "exact")
        with pytest.raises(ValueError):
            DeviationSample(0, 1.0, "guess")


class TestCalibration:
    def test_constant_offset(self):
        ce = calibrate_bias(None, _samples([0.3] * 100))
        assert ce.d_bar == pytest.approx(0.3, rel=1e-15)
        assert ce.calibration_ids == tuple(range(100))

    def test_mean_zero_after_correction(self, rng):
        samples = _samples(rng.normal(1.0, 0.2, size=150))
        ce = calibrate_bias(None, samples)
        assert abs(np.mean([s.d for s in corrected_deviations(ce, samples)])) <= 1e-14

    def test_recalibration_idempotent(self, rng):
        op_seeds = range(120)
        w = rng.standard_normal((2, 8))
        ops = [_op(s, L=8) for s in op_seeds]
        refs = [exact_trace(op) for op in ops]
        ce = calibrate_bias(w, [deviation(w, op, t, matrix_id=i) for i, (op, t) in enumerate(zip(ops, refs))])
        again = calibrate_bias(ce, [deviation(ce, op, t) for op, t in zip(ops, refs)])
        assert abs(again.d_bar - ce.d_bar) <= 1e-12

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            calibrate_bias(None, _samples([0.1] * 99))

    def test_corrected_estimate(self, rng):
        op = _op(8)
        w = rng.standard_normal((2, L16))
        assert corrected_estimate(CorrectedEstimator(w, 0.0), op) == probe_estimate(w, op)
        assert corrected_estimate(CorrectedEstimator(w, 1.5), op) == pytest.approx(probe_estimate(w, op) + 1.5)
        with pytest.raises(ValueError):
            CorrectedEstimator(w, float("inf"))

    def test_two_routes_agree(self, probes16):
        """Offsets from pool stochastic traces and from fresh exact traces agree."""
        w, _ = probes16
        n = 200
        rng = make_rng(2, "route")
        stoch, exact = [], []
        for i in range(n):
            op = _op(derive_seed(5, "pool-like", i))
            stoch.append(deviation(w, op, hutchinson_trace(op, 200, rng).estimate, "stochastic", 200))
            op = _op(derive_seed(5, "fresh", i))
            exact.append(deviation(w, op, exact_trace(op)))
        a, b = calibrate_bias(w, stoch), calibrate_bias(w, exact)
        se = np.hypot(np.std([s.d for s in stoch], ddof=1), np.std([s.d for s in exact], ddof=1)) / np.sqrt(n)
        assert abs(a.d_bar - b.d_bar) <= 4 * se

    def test_held_out_mean_after_correction(self, probes16, ensemble16):
        w, _ = probes16
        exact, trained, _ = ensemble16
        d_cal = exact[0] - trained[0]
        ce = calibrate_bias(w, _samples(d_cal))
        held = exact[1] - (trained[1] + ce.d_bar)
        assert abs(held.mean()) <= 4 * held.std(ddof=1) / np.sqrt(held.size)


class TestDeviationStats:
    def test_constant(self):
        st = deviation_stats([0.2] * 10)
        assert st.std == 0.0 and st.counts.sum() == 10

    def test_invariants(self, rng):
        d = rng.normal(size=500)
        st = deviation_stats(d)
        assert st.count == 500 and st.counts.sum() == 500
        assert st.std_error_of_mean == pytest.approx(st.std / np.sqrt(500), rel=1e-15)
        assert st.std == pytest.approx(np.std(d, ddof=1))
        assert st.bin_edges.size == st.counts.size + 1

    def test_normal_input(self):
        d = np.random.default_rng(12).normal(0.0, 0.01, size=10_000)
        st = deviation_stats(_samples(d))
        assert abs(st.skewness) <= 4 * st.skewness_se
        assert abs(st.excess_kurtosis) <= 4 * st.excess_kurtosis_se

    def test_skewed_input_detected(self):
        d = np.random.default_rng(12).exponential(size=10_000)
        st = deviation_stats(d)
        assert st.skewness > 10 * st.skewness_se

    def test_fixed_bins(self, rng):
        assert deviation_stats(rng.normal(size=50), bins=7).counts.size == 7

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            deviation_stats([1.0])

    def test_outputs(self, rng, tmp_path):
        samples = [DeviationSample(11, 0.5, "stochastic", 800), DeviationSample(12, -0.25, "exact")]
        write_deviations_csv(samples, tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text().splitlines() == [
            "matrix_seed,d,trace_source,N_z", "11,0.5,stochastic,800", "12,-0.25,exact,"]
        write_stats_json(deviation_stats(rng.normal(size=20)), tmp_path / "s.json")
        obj = json.loads((tmp_path / "s.json").read_text())
        assert sum(obj["histogram"]["counts"]) == 20
        assert set(obj["normality"]) == {"skewness", "skewness_se", "excess_kurtosis", "excess_kurtosis_se"}


class TestTraceFunctions:
    def test_registry(self):
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(trace_function("identity")(x), x)
        np.testing.assert_array_equal(trace_function("square")(x), x**2)
        np.testing.assert_array_equal(trace_function("reciprocal")(x), 1 / x)
        np.testing.assert_array_equal(trace_function("exp_neg")(x), np.exp(-x))
        with pytest.raises(ValueError):
            trace_function("cube")

    def test_reciprocal_guard(self):
        with pytest.raises(DomainError):
            unbiased_from_values([1.0, 0.0], [1.0, 1.0], "reciprocal")

    def test_subsets(self):
        np.testing.assert_array_equal(correction_subset(10, 3), [0, 1, 2])
        np.testing.assert_array_equal(correction_subset(10, 5, "strided"), [0, 2, 4, 6, 8])
        np.testing.assert_array_equal(correction_subset(7, 7, "strided"), np.arange(7))
        for bad in ((10, 0), (10, 11)):
            with pytest.raises(ValueError):
                correction_subset(*bad)
        with pytest.raises(ValueError):
            correction_subset(10, 2, "random")


class TestUnbiased:
    @pytest.mark.parametrize("f", ["identity", "square", "reciprocal", "exp_neg"])
    def test_full_correction_is_brute_force(self, ensemble16, f):
        exact, trained, _ = ensemble16
        fn = trace_function(f)
        res = unbiased_from_values(trained[0], exact[0], f, n_c=N_PER_RUN)
        brute = np.mean(fn(exact[0]))
        assert abs(res.estimate - brute) <= 1e-12 * abs(brute)

    @pytest.mark.parametrize("f", ["identity", "square"])
    def test_unbiased_over_runs(self, ensemble16, f):
        exact, trained, _ = ensemble16
        fn = trace_function(f)
        est = np.array([unbiased_from_values(trained[r], exact[r], f, n_c=40).estimate for r in range(N_RUNS)])
        brute = np.array([np.mean(fn(exact[r])) for r in range(N_RUNS)])
        diff = est - brute
        assert abs(diff.mean()) <= 4 * diff.std(ddof=1) / np.sqrt(N_RUNS)

    def test_naive_average_is_biased(self, ensemble16):
        exact, _, untrained = ensemble16
        naive = np.array([np.mean(untrained[r] ** 2) for r in range(N_RUNS)])
        est = np.array([unbiased_from_values(untrained[r], exact[r], "square", n_c=40).estimate
                        for r in range(N_RUNS)])
        brute = np.mean(exact**2)
        assert abs(naive.mean() - brute) > 10 * naive.std(ddof=1) / np.sqrt(N_RUNS)
        assert abs(est.mean() - brute) <= 4 * np.hypot(est.std(ddof=1) / np.sqrt(N_RUNS),
                                                       np.std(exact**2) / np.sqrt(exact.size))

    def test_jackknife_tracks_run_to_run_spread(self, ensemble16):
        exact, trained, _ = ensemble16
        runs = [unbiased_from_values(trained[r], exact[r], "square", n_c=40) for r in range(N_RUNS)]
        spread = np.std([r.estimate for r in runs], ddof=1)
        mean_err = np.mean([r.error for r in runs])
        assert 0.7 < mean_err / spread < 1.4

    def test_error_shrinks_with_larger_subset(self):
        """Poorly correlated approximations: N_c = N/2 beats N_c = N/10 on average."""
        rng = np.random.default_rng(4)
        n, better = 200, []
        for _ in range(20):
            exact = rng.normal(70.0, 0.5, size=n)
            approx = rng.normal(70.0, 3.0, size=n)
            e_half = unbiased_from_values(approx, exact, "square", n_c=n // 2).error
            e_tenth = unbiased_from_values(approx, exact, "square", n_c=n // 10).error
            better.append(e_half <= e_tenth)
        assert np.mean(better) >= 0.8

    def test_reference_alignment(self, rng):
        approx = rng.normal(size=10)
        full = rng.normal(size=10)
        a = unbiased_from_values(approx, full, "identity", n_c=4, mode="strided")
        b = unbiased_from_values(approx, full[correction_subset(10, 4, "strided")], "identity", n_c=4, mode="strided")
        assert a.estimate == b.estimate
        with pytest.raises(ValueError):
            unbiased_from_values(approx, full[:3], "identity", n_c=4)

    def test_operator_entry_point(self, probes16):
        w, _ = probes16
        ce = CorrectedEstimator(w, 0.0)
        ops = [_op(derive_seed(3, "u", i)) for i in range(30)]
        res = unbiased_function_expectation(ce, ops, "square", n_c=30, reference="exact")
        brute = np.mean([exact_trace(op) ** 2 for op in ops])
        assert abs(res.estimate - brute) <= 1e-12 * brute
        a = unbiased_function_expectation(ce, ops, "square", 10, "stochastic", 100, np.random.default_rng(1))
        b = unbiased_function_expectation(ce, ops, "square", 10, "stochastic", 100, np.random.default_rng(1))
        assert a.estimate == b.estimate and np.isfinite(a.error)
        assert a.to_dict()["N_c"] == 10 and a.to_dict()["reference"] == "stochastic"
        with pytest.raises(ValueError):
            unbiased_function_expectation(ce, ops, "square", 10, "oracle")
