import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import expit, factorial2

from gamp_lab.errors import BracketingError, InvalidArgumentError, InvalidCovarianceError, NumericalDomainError
from gamp_lab.numerics import (
    expect_gaussian_1d,
    expect_gaussian_2d,
    gauss_hermite,
    maximize_scalar,
    trapezoid_rule,
)


def gaussian_moment(k):
    """E[U^k] for U ~ N(0, 1)."""
    return 0.0 if k % 2 else float(factorial2(k - 1)) if k > 0 else 1.0


class TestGaussHermite:
    def test_order_one(self):
        r = gauss_hermite(1)
        assert np.allclose(r.nodes, [0.0]) and np.allclose(r.weights, [1.0])

    def test_order_two(self):
        r = gauss_hermite(2)
        assert np.allclose(r.nodes, [-1.0, 1.0], atol=1e-14)
        assert np.allclose(r.weights, [0.5, 0.5], atol=1e-14)

    def test_order_three(self):
        r = gauss_hermite(3)
        assert np.allclose(r.nodes, [-math.sqrt(3), 0.0, math.sqrt(3)], atol=1e-14)
        assert np.allclose(r.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)

    @pytest.mark.parametrize("order", [0, 201, 2.5, -3])
    def test_out_of_range(self, order):
        with pytest.raises(InvalidArgumentError):
            gauss_hermite(order)

    @given(st.integers(1, 200))
    @settings(max_examples=40, deadline=None)
    def test_rule_invariants(self, order):
        r = gauss_hermite(order)
        assert abs(r.weights.sum() - 1.0) <= 1e-12
        assert np.all(r.weights >= 0)
        s = np.sort(r.nodes)
        assert np.allclose(s, -s[::-1], atol=1e-12)
        assert r.order == order

    @given(st.integers(1, 30), st.data())
    @settings(max_examples=40, deadline=None)
    def test_polynomial_exactness(self, order, data):
        r = gauss_hermite(order)
        k = data.draw(st.integers(0, 2 * order - 1))
        got = expect_gaussian_1d(lambda x: x**k, 0.0, 1.0, r)
        want = gaussian_moment(k)
        # rounding scales with E|U|^k, not with the (possibly zero) signed moment
        scale = gaussian_moment(k + (k % 2))
        assert abs(got - want) <= 1e-10 * max(1.0, scale)

    def test_immutable(self):
        r = gauss_hermite(5)
        with pytest.raises(ValueError):
            r.nodes[0] = 1.0

    def test_refined_doubles_order(self):
        assert gauss_hermite(40).refined().order == 80
        assert trapezoid_rule(101, 8.0).refined().order == 201


class TestExpect1d:
    def test_first_moment(self):
        assert expect_gaussian_1d(lambda x: x, 3.0, 5.0) == pytest.approx(3.0, abs=1e-12)

    def test_second_moment(self):
        assert expect_gaussian_1d(lambda x: x**2, 0.0, 4.0) == pytest.approx(4.0, abs=1e-12)

    def test_lognormal_mean(self):
        assert abs(expect_gaussian_1d(np.exp, 0.0, 1.0, gauss_hermite(40)) - math.exp(0.5)) <= 1e-9

    def test_zero_variance_is_exact(self):
        assert expect_gaussian_1d(lambda x: np.sin(x) ** 3, 0.7, 0.0) == np.sin(0.7) ** 3

    def test_non_finite_reports_node(self):
        with pytest.raises(NumericalDomainError) as info:
            with np.errstate(divide="ignore"):
                expect_gaussian_1d(lambda x: 1.0 / x, 0.0, 1.0, gauss_hermite(3))
        assert info.value.node == 0.0

    def test_negative_variance(self):
        with pytest.raises(InvalidArgumentError):
            expect_gaussian_1d(lambda x: x, 0.0, -1.0)

    def test_trapezoid_matches_hermite_on_smooth_function(self):
        f = lambda x: np.cos(x) + x**2
        a = expect_gaussian_1d(f, 0.3, 2.0, gauss_hermite(60))
        b = expect_gaussian_1d(f, 0.3, 2.0, trapezoid_rule(801, 12.0))
        assert abs(a - b) <= 1e-12


class TestExpect2d:
    def test_cross_moment(self):
        assert expect_gaussian_2d(lambda z, p: z * p, [[2, 1], [1, 1]]) == pytest.approx(1.0, abs=1e-12)

    def test_squared_difference(self):
        tau, a = 2.0, 0.5
        cov = [[tau, tau - a], [tau - a, tau - a]]
        assert expect_gaussian_2d(lambda z, p: (z - p) ** 2, cov) == pytest.approx(a, abs=1e-12)

    def test_degenerate_p(self):
        assert expect_gaussian_2d(lambda z, p: z**2, [[3, 0], [0, 0]]) == pytest.approx(3.0, abs=1e-12)

    def test_degenerate_conditional(self):
        # Z = P exactly
        assert expect_gaussian_2d(lambda z, p: (z - p) ** 2, [[1, 1], [1, 1]]) == pytest.approx(0.0, abs=1e-14)

    def test_not_psd(self):
        with pytest.raises(InvalidCovarianceError):
            expect_gaussian_2d(lambda z, p: z, [[1, 2], [2, 1]])

    def test_not_symmetric(self):
        with pytest.raises(InvalidCovarianceError):
            expect_gaussian_2d(lambda z, p: z, [[1, 0.5], [0.2, 1]])

    def test_tiny_negative_eigenvalue_is_tolerated(self):
        assert np.isfinite(expect_gaussian_2d(lambda z, p: z * p, [[1, 1], [1, 1 - 1e-13]]))

    @given(st.floats(0.01, 5), st.floats(0.01, 5), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_diagonal_factorizes(self, v1, v2, c1, c2):
        f = lambda z, p: np.exp(c1 * np.tanh(z)) * np.cos(c2 * p)
        joint = expect_gaussian_2d(f, [[v1, 0], [0, v2]])
        nested = expect_gaussian_1d(lambda z: np.exp(c1 * np.tanh(z)), 0, v1) * expect_gaussian_1d(lambda p: np.cos(c2 * p), 0, v2)
        assert abs(joint - nested) <= 1e-12 * max(1.0, abs(nested))


class TestMaximize:
    def test_quadratic(self):
        x, fx = maximize_scalar(lambda x: -(x - 3) ** 2, 0.0, tol=1e-10)
        assert abs(x - 3) <= 1e-10 and fx <= 0

    def test_soft_threshold_objective(self):
        x, _ = maximize_scalar(lambda x: -np.abs(x) - (x - 2) ** 2 / 2, 0.0, tol=1e-10)
        assert abs(x - 1.0) <= 1e-9

    def test_logistic_objective(self):
        # oracle: bisection on the stationarity equation sigma(-x) = x - 1
        root = brentq(lambda x: expit(-x) - (x - 1), 0, 3, xtol=1e-14)
        f = lambda x: -np.logaddexp(0, -x) - (x - 1) ** 2 / 2
        x, _ = maximize_scalar(f, 0.0, tol=1e-10)
        assert abs(x - root) <= 1e-8
        xp, _ = maximize_scalar(f, 0.0, tol=1e-12, df=lambda x: expit(-x) - (x - 1), d2f=lambda x: -expit(x) * expit(-x) - 1)
        assert abs(xp - root) <= 1e-12

    def test_far_maximum_needs_expansion(self):
        x, _ = maximize_scalar(lambda x: -(x - 1e6) ** 2, 0.0, tol=1e-6)
        assert abs(x - 1e6) <= 1e-3

    def test_bracketing_failure(self):
        with pytest.raises(BracketingError):
            maximize_scalar(lambda x: x, 0.0)

    def test_vectorized(self):
        c = np.array([-2.0, 0.0, 5.0])
        x, _ = maximize_scalar(lambda x: -(x - c) ** 2, np.zeros(3), tol=1e-10)
        assert np.allclose(x, c, atol=1e-9)

    def test_bad_arguments(self):
        with pytest.raises(InvalidArgumentError):
            maximize_scalar(lambda x: -x * x, 0.0, bracket_halfwidth=0.0)

    @given(st.floats(-20, 20), st.floats(0.1, 10), st.floats(0, 3))
    @settings(max_examples=60, deadline=None)
    def test_concave_c2(self, c, k, s):
        # -(k/2)(x-c)^2 - s*cosh(x-c) is concave, stationary at c
        f = lambda x: -0.5 * k * (x - c) ** 2 - s * np.cosh(x - c)
        x, _ = maximize_scalar(f, 0.0, tol=1e-8)
        assert abs(x - c) <= 1e-7
