"""Operators, the cyclic ensemble, BiCGSTAB and exact traces against dense oracles."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probetrace.operators import (
    CapacityError,
    CyclicTridiagonalMatrix,
    DenseMatrix,
    DimensionError,
    IdentityOperator,
    InverseOperator,
    MatrixSpec,
    SolverFailure,
    apply,
    apply_transpose,
    bicgstab_solve,
    dense_realize,
    exact_trace,
    generate_random_matrix,
)

from conftest import random_dense


class TestGenerateRandomMatrix:
    def test_zero_noise_entries(self):
        m = generate_random_matrix(5, 99, 0.0)
        np.testing.assert_array_equal(m.sup, -0.5)
        np.testing.assert_array_equal(m.sub, 0.5)
        assert m.diag == 1.0

    def test_sparsity_pattern(self):
        a = generate_random_matrix(8, 1, 0.1).to_dense()
        for i in range(8):
            cols = set(np.flatnonzero(a[i]))
            assert cols == {(i - 1) % 8, i, (i + 1) % 8}
        np.testing.assert_array_equal(np.diag(a), 1.0)

    def test_noise_statistics(self):
        m = generate_random_matrix(20_000, 5, 0.1)
        xi = np.concatenate([m.sup + 0.5, m.sub - 0.5])
        assert abs(xi.mean()) < 4 * 0.1 / np.sqrt(xi.size)
        assert abs(xi.std() - 0.1) < 0.002

    def test_small_L_rejected(self):
        with pytest.raises(DimensionError):
            generate_random_matrix(2, 0)

    def test_immutable(self):
        m = generate_random_matrix(6, 0)
        with pytest.raises(ValueError):
            m.sup[0] = 1.0

    def test_spec_record_roundtrip(self):
        m = generate_random_matrix(12, 2**63 + 5, 0.1)
        spec = MatrixSpec.from_record(m.spec().to_record())
        assert spec == MatrixSpec(12, 2**63 + 5, 0.1)
        np.testing.assert_array_equal(spec.build().sub, m.sub)
        with pytest.raises(ValueError):
            MatrixSpec.from_record("12,5")

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            CyclicTridiagonalMatrix(4, np.array([0, 0, np.inf, 0]), np.zeros(4))


class TestApply:
    def test_zero_noise_ones_fixed_point(self):
        m = generate_random_matrix(9, 0, 0.0)
        np.testing.assert_array_equal(apply(m, np.ones(9)), 1.0)
        np.testing.assert_array_equal(apply_transpose(m, np.ones(9)), 1.0)

    def test_first_column_readoff(self):
        m = generate_random_matrix(3, 0, 0.0)
        np.testing.assert_array_equal(apply(m, [1.0, 0.0, 0.0]), [1.0, 0.5, -0.5])

    @pytest.mark.parametrize("transpose", [False, True])
    def test_dense_oracle(self, rng, transpose):
        m = generate_random_matrix(16, 11, 0.1)
        a = m.to_dense()
        v = rng.standard_normal(16)
        got = apply_transpose(m, v) if transpose else apply(m, v)
        np.testing.assert_allclose(got, (a.T if transpose else a) @ v, rtol=0, atol=1e-14)

    def test_batch_equals_rows(self, rng):
        m = generate_random_matrix(10, 4, 0.1)
        V = rng.standard_normal((3, 10))
        np.testing.assert_array_equal(m.apply(V), np.stack([m.apply(v) for v in V]))

    def test_length_mismatch(self):
        m = generate_random_matrix(5, 0)
        with pytest.raises(DimensionError):
            apply(m, np.ones(4))
        with pytest.raises(DimensionError):
            apply_transpose(m, np.ones(6))

    def test_adjoint_identity(self, rng):
        m = generate_random_matrix(64, 8, 0.1)
        for _ in range(100):
            u, v = rng.standard_normal(64), rng.standard_normal(64)
            gap = abs(u @ m.apply(v) - m.apply_transpose(u) @ v)
            assert gap <= 1e-13 * np.linalg.norm(u) * np.linalg.norm(v)


class TestAdjointAllOperators:
    @pytest.mark.parametrize("kind", ["identity", "dense", "cyclic", "inverse"])
    def test_hundred_pairs(self, rng, kind):
        L = 32
        if kind == "identity":
            op, bound = IdentityOperator(L), 1e-10
        elif kind == "dense":
            op, bound = DenseMatrix(random_dense(rng, L)), 1e-10
        elif kind == "cyclic":
            op, bound = generate_random_matrix(L, 1, 0.1), 1e-10
        else:
            op, bound = InverseOperator(generate_random_matrix(L, 1, 0.1), tol=1e-10), 1e-6
        U, V = rng.standard_normal((100, L)), rng.standard_normal((100, L))
        lhs = np.einsum("ij,ij->i", U, op.apply(V))
        rhs = np.einsum("ij,ij->i", op.apply_transpose(U), V)
        norms = np.linalg.norm(U, axis=1) * np.linalg.norm(V, axis=1)
        assert np.all(np.abs(lhs - rhs) <= bound * norms)


class TestBicgstabSolve:
    def test_zero_noise_ones(self):
        m = generate_random_matrix(12, 0, 0.0)
        np.testing.assert_allclose(bicgstab_solve(m, np.ones(12)), 1.0, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("transpose", [False, True])
    def test_dense_oracle(self, rng, transpose):
        tol = 1e-10
        m = generate_random_matrix(16, 21, 0.1)
        a = m.to_dense()
        b = rng.standard_normal(16)
        x = bicgstab_solve(m, b, tol=tol, transpose=transpose)
        x_dense = np.linalg.solve(a.T if transpose else a, b)
        assert np.max(np.abs(x - x_dense)) <= 10 * tol * np.max(np.abs(x_dense))

    def test_residual_recomputed_L100(self, rng):
        m = generate_random_matrix(100, 314, 0.1)
        b = rng.standard_normal(100)
        for transpose in (False, True):
            x, info = bicgstab_solve(m, b, tol=1e-10, transpose=transpose, return_info=True)
            mx = m.apply_transpose(x) if transpose else m.apply(x)
            assert np.linalg.norm(mx - b) / np.linalg.norm(b) <= 1e-10
            assert 0 < info.iterations[0] <= 1000

    def test_failure_carries_residual(self, rng):
        m = generate_random_matrix(50, 2, 0.1)
        with pytest.raises(SolverFailure) as err:
            bicgstab_solve(m, rng.standard_normal(50), tol=1e-14, max_iter=2)
        assert err.value.residual > 1e-14
        assert err.value.iterations == 2

    def test_bad_inputs(self):
        m = generate_random_matrix(5, 0)
        with pytest.raises(ValueError):
            bicgstab_solve(m, np.ones(5), tol=0.0)
        with pytest.raises(DimensionError):
            bicgstab_solve(m, np.ones(4))


class TestInverseOperator:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32), st.integers(3, 40))
    def test_residual_bounds(self, seed, L):
        base = generate_random_matrix(L, seed, 0.1)
        inv = InverseOperator(base, tol=1e-10)
        b = np.random.default_rng(seed).standard_normal(L)
        x, xt = inv.apply(b), inv.apply_transpose(b)
        assert np.linalg.norm(base.apply(x) - b) <= 1e-10 * np.linalg.norm(b)
        assert np.linalg.norm(base.apply_transpose(xt) - b) <= 1e-10 * np.linalg.norm(b)

    def test_deterministic(self, rng):
        inv = InverseOperator(generate_random_matrix(30, 1, 0.1))
        b = rng.standard_normal((4, 30))
        assert inv.apply(b).tobytes() == inv.apply(b).tobytes()


class TestExactTrace:
    def test_identity(self):
        assert exact_trace(IdentityOperator(50)) == 50.0

    def test_inverse_matches_dense(self):
        m = generate_random_matrix(16, 77, 0.1)
        ref = np.trace(np.linalg.inv(m.to_dense()))
        assert abs(exact_trace(InverseOperator(m)) - ref) <= 1e-8

    def test_zero_noise_inverse(self):
        m = generate_random_matrix(10, 0, 0.0)
        ref = np.trace(np.linalg.inv(m.to_dense()))
        assert abs(exact_trace(InverseOperator(m)) - ref) <= 1e-9
        # the all-ones vector is an eigenvector with eigenvalue 1
        np.testing.assert_allclose(InverseOperator(m).apply(np.ones(10)), 1.0, atol=1e-10)

    @pytest.mark.parametrize("kind", ["dense", "cyclic", "inverse"])
    def test_dense_realization_diagonal(self, rng, kind):
        L = 20
        op = {"dense": lambda: DenseMatrix(random_dense(rng, L)),
              "cyclic": lambda: generate_random_matrix(L, 3, 0.1),
              "inverse": lambda: InverseOperator(generate_random_matrix(L, 3, 0.1))}[kind]()
        d = dense_realize(op)
        assert abs(np.trace(d.entries) - exact_trace(op)) <= 1e-12 * max(1.0, abs(exact_trace(op)))


class TestDenseRealize:
    def test_identity(self):
        np.testing.assert_array_equal(dense_realize(IdentityOperator(6)).entries, np.eye(6))

    def test_cyclic_pattern(self):
        m = generate_random_matrix(8, 5, 0.1)
        np.testing.assert_array_equal(dense_realize(m).entries, m.to_dense())

    def test_inverse_times_base(self):
        m = generate_random_matrix(8, 5, 0.1)
        inv = dense_realize(InverseOperator(m)).entries
        np.testing.assert_allclose(m.to_dense() @ inv, np.eye(8), atol=1e-8)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            dense_realize(IdentityOperator(513))
        with pytest.raises(CapacityError):
            DenseMatrix(np.eye(513))
        with pytest.raises(DimensionError):
            DenseMatrix(np.ones((2, 3)))

    def test_read_only(self):
        d = DenseMatrix(np.eye(3))
        with pytest.raises(ValueError):
            d.entries[0, 0] = 2.0
