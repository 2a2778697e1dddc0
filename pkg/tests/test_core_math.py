from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resboost.core_math import (
    DimensionError,
    NonFiniteError,
    finite_diff_grad,
    grad_check,
    log_sigmoid,
    matmul,
    relative_error,
    relu,
    sigmoid,
    softmax,
    stable_log_softmax,
)
from resboost.boosting import SoftmaxCrossEntropy

finite_floats = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_row_times_column(self):
        np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"2x3 by 2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_vectors(self):
        with pytest.raises(DimensionError):
            matmul(np.ones(3), np.ones((3, 1)))


class TestStableLogSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(stable_log_softmax([0.0, 0.0]), [-np.log(2)] * 2, rtol=0, atol=1e-15)

    def test_large_gap_no_overflow(self):
        out = stable_log_softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, -1000.0], atol=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            stable_log_softmax([])

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError):
            stable_log_softmax([np.nan, 1.0])

    def test_matches_extended_precision(self, rng):
        getcontext().prec = 50
        for _ in range(20):
            v = rng.normal(scale=5.0, size=5)
            exact = [Decimal(float(x)).exp() for x in v]
            total = sum(exact)
            ref = np.array([float(e / total) for e in exact])
            np.testing.assert_allclose(np.exp(stable_log_softmax(v)), ref, rtol=0, atol=1e-12)

    def test_batched_rows(self, rng):
        V = rng.normal(size=(4, 6))
        out = stable_log_softmax(V)
        for row, v in zip(out, V):
            np.testing.assert_array_equal(row, stable_log_softmax(v))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
    def test_exp_sums_to_one(self, v):
        assert abs(np.exp(stable_log_softmax(v)).sum() - 1.0) <= 1e-12


class TestNonlinearities:
    @pytest.mark.parametrize(
        "v, expected",
        [([-1.0, 2.0], [0.0, 2.0]), ([-3.0, -0.5], [0.0, 0.0]), ([0.0], [0.0])],
    )
    def test_relu(self, v, expected):
        np.testing.assert_array_equal(relu(v), expected)

    def test_sigmoid_extremes(self):
        out = sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    @settings(max_examples=100, deadline=None)
    @given(finite_floats)
    def test_log_sigmoid_consistent(self, z):
        np.testing.assert_allclose(np.exp(log_sigmoid(z)), sigmoid(np.array([z]))[0], rtol=1e-12, atol=1e-300)

    def test_softmax_pairs_are_sigmoids(self, rng):
        z = rng.normal(size=10)
        p = softmax(np.stack([z, -z], axis=1))
        np.testing.assert_allclose(p[:, 0], sigmoid(2 * z), rtol=1e-13)


class TestFiniteDiff:
    def test_squared_norm(self):
        g = finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0]), h=1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, np.ones(4)), np.zeros(4))

    @pytest.mark.parametrize("order", [2, 4])
    def test_cross_entropy_logit(self, rng, order):
        loss = SoftmaxCrossEntropy(2)
        for _ in range(10):
            F = rng.normal(size=(1, 2))
            y = int(rng.integers(2))
            _, analytic = loss.value_and_grad(F, [y])
            numeric = finite_diff_grad(lambda f: float(loss.value(f, [y])[0]), F, h=1e-5, order=order)
            np.testing.assert_allclose(numeric, analytic, rtol=0, atol=1e-6)

    def test_matrix_argument(self):
        A = np.arange(6.0).reshape(2, 3)
        g = finite_diff_grad(lambda M: float(np.sum(M**2)), A)
        np.testing.assert_allclose(g, 2 * A, atol=1e-6)

    def test_input_not_mutated(self):
        x = np.array([0.3, -0.1])
        finite_diff_grad(lambda v: float(np.sin(v).sum()), x)
        np.testing.assert_array_equal(x, [0.3, -0.1])

    def test_non_finite_value_raises(self):
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            finite_diff_grad(lambda x: float(np.log(x[0])), np.array([1e-7]), h=1e-6)

    @pytest.mark.parametrize("h, order", [(0.0, 2), (-1.0, 2), (1e-5, 3)])
    def test_bad_arguments(self, h, order):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.ones(2), h=h, order=order)


class TestGradCheck:
    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-12) == pytest.approx(1e-12 / 1e-8)

    def test_report_fields(self):
        rep = grad_check(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0 + 1e-3, 3.0]), tol=1e-5)
        assert rep.worst_coordinate == 1
        assert not rep.passed
        assert rep.max_relative_error == pytest.approx(1e-3 / 2.001)

    def test_passed_iff_within_tolerance(self):
        rep = grad_check(np.ones(3), np.ones(3) * (1 + 1e-6), tol=1e-5)
        assert rep.passed and rep.max_relative_error <= 1e-5

    def test_deterministic(self, rng):
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert grad_check(a, b) == grad_check(a.copy(), b.copy())
