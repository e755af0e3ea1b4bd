import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conservgp.errors import NumericalError
from conservgp.kernel import (
    chol_solve_logdet,
    cross_kernel,
    factor_spd,
    kernel_matrix,
    rbf,
)

# Range picked so the exponent stays far above double underflow.
finite_floats = st.floats(
    min_value=-10, max_value=10, allow_nan=False, allow_infinity=False
)


class TestRbf:
    def test_identity_at_equal_inputs(self):
        assert rbf([0.0], [0.0], 1.0) == 1.0
        assert rbf([1.2, -3.4], [1.2, -3.4], 0.7) == 1.0

    def test_closed_form_1d(self):
        assert rbf([0.0], [1.0], 2.0) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_closed_form_2d(self):
        assert rbf([0.0, 0.0], [1.0, 1.0], 1.0) == pytest.approx(
            np.exp(-2.0), rel=1e-12
        )

    def test_nonpositive_lengthscale(self):
        with pytest.raises(ValueError):
            rbf([0.0], [1.0], 0.0)
        with pytest.raises(ValueError):
            rbf([0.0], [1.0], -1.0)

    @settings(max_examples=60, deadline=None)
    @given(finite_floats, finite_floats, finite_floats)
    def test_symmetric_and_translation_invariant(self, x, y, shift):
        val = rbf([x], [y], 3.0)
        assert val == rbf([y], [x], 3.0)
        assert val == pytest.approx(rbf([x + shift], [y + shift], 3.0), rel=1e-12)
        assert 0.0 < val <= 1.0


class TestKernelMatrix:
    def test_single_input(self):
        m = kernel_matrix(np.array([[0.3]]), 1.0, 0.25)
        np.testing.assert_allclose(m, [[1.25]])

    def test_duplicate_inputs(self):
        m = kernel_matrix(np.array([[2.0], [2.0]]), 1.0, 1.0)
        np.testing.assert_allclose(m, [[2.0, 1.0], [1.0, 2.0]])

    def test_closed_form_entries(self):
        m = kernel_matrix(np.array([0.0, 1.0, 3.0]), 1.0, 0.0)
        assert m[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-12)
        assert m[0, 2] == pytest.approx(np.exp(-9.0), rel=1e-12)
        assert m[1, 2] == pytest.approx(np.exp(-4.0), rel=1e-12)

    def test_exactly_symmetric(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 2))
        m = kernel_matrix(x, 0.8, 1e-6)
        assert np.array_equal(m, m.T)

    def test_diagonal(self):
        rng = np.random.default_rng(2)
        m = kernel_matrix(rng.normal(size=(5, 1)), 2.0, 0.125)
        np.testing.assert_allclose(np.diagonal(m), 1.125)


class TestCholSolveLogdet:
    def test_identity(self):
        rhs = np.arange(6.0).reshape(3, 2)
        x, logdet = chol_solve_logdet(np.eye(3), rhs)
        np.testing.assert_array_equal(x, rhs)
        assert logdet == 0.0

    def test_two_by_two_logdet(self):
        _, logdet = chol_solve_logdet(np.array([[2.0, 1.0], [1.0, 2.0]]), np.zeros(2))
        assert logdet == pytest.approx(np.log(3.0), rel=1e-12)

    def test_matches_lu_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=(5, 5))
            m = a @ a.T + 5 * np.eye(5)
            b = rng.normal(size=(5, 3))
            x, _ = chol_solve_logdet(m, b)
            np.testing.assert_allclose(x, np.linalg.solve(m, b), rtol=0, atol=1e-10)
            residual = np.max(np.abs(m @ x - b)) / max(1.0, np.max(np.abs(b)))
            assert residual <= 1e-10

    def test_logdet_matches_eigenvalue_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(2, 11))
            a = rng.normal(size=(n, n))
            m = a @ a.T + n * np.eye(n)
            _, logdet = chol_solve_logdet(m, np.zeros(n))
            oracle = float(np.sum(np.log(np.linalg.eigvalsh(m))))
            assert logdet == pytest.approx(oracle, rel=1e-8)

    def test_jitter_rescues_semidefinite(self):
        m = np.ones((4, 4))  # rank one, PSD
        f = factor_spd(m)
        assert f.jitter > 0
        assert np.isfinite(f.logdet)

    def test_indefinite_fails_with_context(self):
        m = np.diag([1.0, -1.0])
        with pytest.raises(NumericalError) as err:
            factor_spd(m, context={"edge": 7})
        assert err.value.context == {"edge": 7}


class TestCrossKernel:
    def test_matches_rbf(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        k = cross_kernel([0.5], pts, 2.0)
        expected = [rbf([0.5], [p], 2.0) for p in pts[:, 0]]
        np.testing.assert_allclose(k, expected, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cross_kernel([0.5, 1.0], np.array([[0.0], [1.0]]), 1.0)
