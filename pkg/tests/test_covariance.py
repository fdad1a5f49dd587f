import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from deformex.covariance import (
    CovarianceError,
    CovarianceModel,
    expected_chi_1d,
    expected_chi_2d,
    expected_phi,
    gaussian_tail,
    hermite,
    hermite_minus_one,
    hessian_at_origin,
    rho,
)

RHO2_1 = (2 * math.pi) ** -1.5 * math.exp(-0.5)

MODELS = [CovarianceModel.gaussian_exp(), CovarianceModel.powered_exp(2.0), CovarianceModel.matern(2.5),
          CovarianceModel.matern(4.0)]


class TestModels:
    def test_unit_variance(self):
        for m in MODELS:
            assert float(m(np.zeros(2))) == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_value_at_unit_lag(self):
        m = CovarianceModel.gaussian_exp()
        assert float(m(np.array([1.0, 0.0]))) == pytest.approx(math.exp(-0.5), rel=1e-14)

    @pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind.value}-{m.nu}")
    def test_hessian_is_minus_identity(self, model):
        h = hessian_at_origin(model, step=1e-4)
        np.testing.assert_allclose(h, -np.eye(2), atol=1e-6)

    @pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.kind.value}-{m.nu}")
    def test_radial_and_even(self, model):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(50, 2)) * 2
        ang = rng.uniform(0, 2 * np.pi, 50)
        rot = np.stack([x[:, 0] * np.cos(ang) - x[:, 1] * np.sin(ang),
                        x[:, 0] * np.sin(ang) + x[:, 1] * np.cos(ang)], -1)
        np.testing.assert_allclose(model(x), model(-x), rtol=1e-14)
        np.testing.assert_allclose(model(x), model(rot), rtol=1e-12)

    def test_rough_powered_exp_rejected(self):
        with pytest.raises(CovarianceError):
            CovarianceModel.powered_exp(1.5)
        with pytest.raises(CovarianceError):
            CovarianceModel.powered_exp(2.5)

    def test_matern_needs_smoothness(self):
        with pytest.raises(CovarianceError):
            CovarianceModel.matern(1.5)

    def test_from_name(self):
        assert CovarianceModel.from_name("gaussian") == CovarianceModel.gaussian_exp()
        assert CovarianceModel.from_name("matern", nu=3.0).nu == 3.0
        with pytest.raises(CovarianceError):
            CovarianceModel.from_name("cauchy")

    def test_gaussian_derivatives_match_finite_differences(self):
        m = CovarianceModel.gaussian_exp()
        x = np.array([0.7, -0.4])
        h = 1e-5
        for order in [(1, 0), (0, 1)]:
            e = np.array(order, dtype=float) * h
            fd = (m(x + e) - m(x - e)) / (2 * h)
            assert float(m.derivative(order, x)) == pytest.approx(float(fd), abs=1e-9)
        d20 = (m.derivative((1, 0), x + [h, 0]) - m.derivative((1, 0), x - [h, 0])) / (2 * h)
        assert float(m.derivative((2, 0), x)) == pytest.approx(float(d20), abs=1e-9)
        np.testing.assert_allclose(
            [m.derivative((2, 0), np.zeros(2)), m.derivative((1, 1), np.zeros(2))], [-1.0, 0.0], atol=1e-15
        )


class TestKernels:
    def test_hermite_low_orders(self):
        x = np.linspace(-3, 3, 13)
        np.testing.assert_array_equal(hermite(0, x), np.ones_like(x))
        np.testing.assert_array_equal(hermite(1, x), x)
        np.testing.assert_allclose(hermite(2, x), x**2 - 1, atol=1e-14)
        np.testing.assert_allclose(hermite(4, x), x**4 - 6 * x**2 + 3, atol=1e-12)

    def test_hermite_minus_one(self):
        x = np.linspace(-5, 5, 41)
        expect = math.sqrt(2 * math.pi) * stats.norm.sf(x) * np.exp(x**2 / 2)
        np.testing.assert_allclose(hermite_minus_one(x), expect, rtol=1e-12)
        assert np.isfinite(hermite_minus_one(60.0))

    def test_rho_examples(self):
        assert rho(0, 0.0) == pytest.approx(0.5, abs=1e-15)
        assert rho(1, 0.0) == pytest.approx(1 / (2 * math.pi), rel=1e-15)
        assert rho(2, 1.0) == pytest.approx(0.038511, abs=5e-7)
        assert rho(2, 1.0) == pytest.approx(RHO2_1, rel=1e-14)

    def test_rho_index_checked(self):
        with pytest.raises(CovarianceError):
            rho(3, 0.0)

    def test_rho0_is_gaussian_tail(self):
        u = np.linspace(-5, 5, 201)
        np.testing.assert_allclose(rho(0, u), stats.norm.sf(u), rtol=1e-12, atol=1e-16)
        np.testing.assert_allclose(gaussian_tail(u), stats.norm.sf(u), rtol=1e-12)


class TestExpectations:
    def test_chi_2d_examples(self):
        assert expected_chi_2d(0, 0, 0) == pytest.approx(0.5, abs=1e-15)
        expect = math.exp(-0.5) * ((2 * math.pi) ** -1.5 + 1 / math.pi) + stats.norm.sf(1)
        assert expected_chi_2d(1, 4, 1) == pytest.approx(expect, rel=1e-13)
        assert expected_chi_2d(1, 4, 1) == pytest.approx(0.390, abs=5e-4)
        assert expected_chi_2d(5, 9, 40.0) < 1e-300

    def test_chi_1d_examples(self):
        assert expected_chi_1d(0, 0) == pytest.approx(0.5)
        assert expected_chi_1d(2 * math.pi, 0) == pytest.approx(1.5, rel=1e-14)
        assert expected_chi_1d(1, 2) == pytest.approx(math.exp(-2) / (2 * math.pi) + stats.norm.sf(2), rel=1e-13)
        assert expected_chi_1d(1, 2) == pytest.approx(0.04429, abs=5e-5)

    def test_phi_examples(self):
        assert expected_phi(2, 5, 0) == 0.0
        assert expected_phi(1, 2 * math.pi, 0) == pytest.approx(1.0, rel=1e-15)
        assert expected_phi(2, 1, 1) == pytest.approx(rho(2, 1), rel=1e-15)
        with pytest.raises(CovarianceError):
            expected_phi(3, 1, 1)

    def test_negative_measures_rejected(self):
        with pytest.raises(CovarianceError):
            expected_chi_2d(-1, 0, 0)
        with pytest.raises(CovarianceError):
            expected_chi_1d(-0.1, 0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(-6, 6))
    def test_lk_decomposition(self, area, perimeter, u):
        lhs = expected_chi_2d(area, perimeter, u)
        rhs = area * rho(2, u) + perimeter / 2 * rho(1, u) + rho(0, u)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)
        rest = lhs - expected_phi(2, area, u) - perimeter / 2 * rho(1, u) - gaussian_tail(u)
        assert abs(rest) <= 1e-12 * max(1.0, abs(lhs), area, perimeter)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e3), st.floats(-6, 6))
    def test_chi_1d_decomposition(self, length, u):
        assert expected_chi_1d(length, u) == pytest.approx(length * rho(1, u) + rho(0, u), rel=1e-12, abs=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(-4, 4), st.sampled_from([1, 2]))
    def test_phi_linear_in_measure(self, m1, m2, u, dim):
        assert expected_phi(dim, m1 + m2, u) == pytest.approx(
            expected_phi(dim, m1, u) + expected_phi(dim, m2, u), rel=1e-12, abs=1e-14
        )
