import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from gpcrhc.basis import (
    BasisSet,
    Distribution,
    DomainError,
    PolynomialFamily,
    analytic_norms,
    basis_size,
    eval_poly,
    gauss_quadrature,
    nproduct,
    tensor_quadrature,
    total_degree_indices,
)

LEG = PolynomialFamily("legendre")
HER = PolynomialFamily("hermite")


class TestPairing:
    def test_table_pairs(self):
        assert Distribution("normal").family == HER
        assert Distribution("uniform").family == LEG
        assert Distribution("gamma", alpha=1.5).family == PolynomialFamily("laguerre", alpha=1.5)
        assert Distribution("beta", 0.5, 2.0).family == PolynomialFamily("jacobi", 0.5, 2.0)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError, match="do not match"):
            BasisSet((Distribution("uniform"),), 2, families=(HER,))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            BasisSet((Distribution("beta", 1.0, 1.0),), 2, families=(PolynomialFamily("jacobi", 1.0, 0.0),))

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            Distribution("gamma", alpha=-1.0)
        with pytest.raises(ValueError):
            PolynomialFamily("legendre", alpha=0.5)
        with pytest.raises(ValueError):
            Distribution("cauchy")

    @pytest.mark.parametrize("fam", [LEG, HER, PolynomialFamily("laguerre", 1.0), PolynomialFamily("jacobi", 0.5, 1.5)])
    def test_degree_zero_is_one(self, fam):
        x = np.linspace(-0.9, 0.9, 7) + (1.0 if fam.kind == "laguerre" else 0.0)
        np.testing.assert_array_equal(eval_poly(fam, 0, x), np.ones_like(x))


class TestBasisSize:
    @pytest.mark.parametrize("d,r,expected", [(1, 4, 5), (1, 0, 1), (2, 2, 6), (3, 3, 20)])
    def test_examples(self, d, r, expected):
        assert basis_size(d, r) == expected

    def test_overflow(self):
        with pytest.raises(OverflowError):
            basis_size(60, 60)

    def test_invalid(self):
        with pytest.raises(ValueError):
            basis_size(0, 2)

    @given(st.integers(1, 5), st.integers(0, 6))
    def test_matches_index_count(self, d, r):
        idx = total_degree_indices(d, r)
        assert len(idx) == basis_size(d, r) == math.factorial(d + r) // (math.factorial(d) * math.factorial(r))
        assert idx[0] == (0,) * d
        degrees = [sum(i) for i in idx]
        assert degrees == sorted(degrees)
        assert len(set(idx)) == len(idx)

    def test_graded_order_d2(self):
        assert total_degree_indices(2, 2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


class TestEvaluation:
    def test_examples(self):
        assert eval_poly(LEG, 1, 0.5) == 0.5
        assert eval_poly(LEG, 2, 1.0) == 1.0
        assert eval_poly(HER, 2, 0.0) == -1.0

    def test_strict_domain(self):
        with pytest.raises(DomainError):
            eval_poly(LEG, 2, 1.5, strict=True)
        assert eval_poly(LEG, 2, 1.5) == pytest.approx(0.5 * (3 * 2.25 - 1))

    def test_against_scipy(self):
        x = np.linspace(-0.95, 0.95, 11)
        for k in range(8):
            np.testing.assert_allclose(eval_poly(LEG, k, x), special.eval_legendre(k, x), atol=1e-13)
            np.testing.assert_allclose(eval_poly(HER, k, x), special.eval_hermitenorm(k, x), atol=1e-11)
            lag = PolynomialFamily("laguerre", 1.5)
            np.testing.assert_allclose(eval_poly(lag, k, x + 1), special.eval_genlaguerre(k, 1.5, x + 1), rtol=1e-12, atol=1e-12)
            jac = PolynomialFamily("jacobi", 0.5, -0.3)
            np.testing.assert_allclose(eval_poly(jac, k, x), special.eval_jacobi(k, 0.5, -0.3, x), rtol=1e-12, atol=1e-12)


class TestQuadrature:
    def test_legendre_one(self):
        rule = gauss_quadrature(LEG, 1)
        np.testing.assert_allclose(rule.nodes.ravel(), [0.0], atol=1e-15)
        np.testing.assert_allclose(rule.weights, [1.0])

    def test_legendre_two(self):
        rule = gauss_quadrature(LEG, 2)
        np.testing.assert_allclose(rule.nodes.ravel(), [-0.5773502691896258, 0.5773502691896258], atol=1e-15)
        np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-15)
        assert rule.integrate(rule.nodes.ravel() ** 2) == pytest.approx(1 / 3, abs=1e-15)

    def test_hermite_two(self):
        rule = gauss_quadrature(HER, 2)
        np.testing.assert_allclose(rule.nodes.ravel(), [-1.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            gauss_quadrature(LEG, 0)

    @pytest.mark.parametrize("fam", [LEG, HER, PolynomialFamily("laguerre", 0.7), PolynomialFamily("jacobi", 1.0, 2.0)])
    @pytest.mark.parametrize("n", [1, 3, 6])
    def test_weights_sum_to_one(self, fam, n):
        rule = gauss_quadrature(fam, n)
        assert abs(rule.weights.sum() - 1.0) <= 1e-12
        assert np.all(rule.weights > 0)

    @pytest.mark.parametrize("k", range(0, 7))
    def test_density_moments(self, k):
        # uniform: E[D^2k] = 1/(2k+1); normal: (2k-1)!!
        leg = gauss_quadrature(LEG, 8)
        her = gauss_quadrature(HER, 8)
        assert leg.integrate(leg.nodes.ravel() ** (2 * k)) == pytest.approx(1 / (2 * k + 1), abs=1e-12)
        dfact = float(special.factorial2(2 * k - 1)) if k else 1.0
        assert her.integrate(her.nodes.ravel() ** (2 * k)) == pytest.approx(dfact, abs=1e-12 * max(1.0, dfact))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.lists(st.floats(-1, 1), min_size=12, max_size=12))
    def test_exact_for_degree_2n_minus_1(self, n, coeffs):
        deg = 2 * n - 1
        c = np.array(coeffs[: deg + 1])
        rule = gauss_quadrature(LEG, n)
        x = rule.nodes.ravel()
        approx = rule.integrate(np.polyval(c[::-1], x))
        exact = sum(ck / (k + 1) for k, ck in enumerate(c) if k % 2 == 0)
        assert approx == pytest.approx(exact, abs=1e-12)

    def test_tensor_rule(self):
        rule = tensor_quadrature([LEG, HER], 3)
        assert rule.nodes.shape == (9, 2)
        x, y = rule.nodes.T
        assert rule.integrate(x**2 * y**2) == pytest.approx(1 / 3, abs=1e-14)
        assert rule.integrate(x * y) == pytest.approx(0.0, abs=1e-15)


class TestTensors:
    def test_legendre_r2(self):
        T = BasisSet((Distribution("uniform"),), 2).tensors
        np.testing.assert_allclose(T.W, np.diag([1, 1 / 3, 1 / 5]), atol=1e-15)
        assert T.E[1, 1, 2] == pytest.approx(2 / 15, abs=1e-14)
        np.testing.assert_array_equal(T.F, [1.0, 0.0, 0.0])

    def test_hermite_r2(self):
        T = BasisSet((Distribution("normal"),), 2).tensors
        assert T.E[1, 1, 2] == pytest.approx(2.0, abs=1e-13)

    @pytest.mark.parametrize(
        "dists",
        [
            (Distribution("uniform"),),
            (Distribution("normal"), Distribution("uniform")),
            (Distribution("gamma", 1.0), Distribution("beta", 0.5, 0.5)),
        ],
    )
    def test_structure(self, dists):
        b = BasisSet(dists, 3)
        T = b.tensors
        P = b.size
        assert T.W[0, 0] == 1.0
        assert np.all(np.diag(T.W) > 0)
        np.testing.assert_array_equal(T.E[0], T.W)
        np.testing.assert_array_equal(T.F, np.eye(P)[0])
        for perm in [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
            np.testing.assert_array_equal(T.E, T.E.transpose(perm))

    def test_nproduct(self):
        b = BasisSet((Distribution("uniform"),), 4)
        assert nproduct(b, [0]) == pytest.approx(1.0, abs=1e-15)
        assert nproduct(b, [1, 1]) == pytest.approx(1 / 3, abs=1e-15)
        assert nproduct(b, [1, 1, 1, 1]) == pytest.approx(1 / 5, abs=1e-15)
        T = b.tensors
        for i in range(b.size):
            for j in range(b.size):
                assert nproduct(b, [i, j]) == pytest.approx(T.W[i, j], abs=1e-13)
                for k in range(b.size):
                    assert nproduct(b, [i, j, k]) == pytest.approx(T.E[i, j, k], abs=1e-13)
        with pytest.raises(IndexError):
            nproduct(b, [5])

    @pytest.mark.parametrize(
        "fam", [LEG, HER, PolynomialFamily("laguerre", 2.0), PolynomialFamily("jacobi", 1.5, 0.5), PolynomialFamily("jacobi", -0.5, -0.5)]
    )
    def test_norms_match_closed_form(self, fam):
        b = BasisSet((fam.distribution,), 6)
        ref = analytic_norms(fam, 6)
        np.testing.assert_allclose(b.tensors.norms, ref, rtol=1e-12)
