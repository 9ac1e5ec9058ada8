import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from rramgen.errors import DegenerateDevice
from rramgen.transforms import (
    Z_BOUND,
    AffineStats,
    GammaPolys,
    fit_affine,
    fit_gamma,
    gamma_forward,
    gamma_inverse,
)


def single_gamma(coeffs):
    c = np.zeros((4, 5))
    c[:, : len(coeffs)] = coeffs
    return GammaPolys(c, np.full(4, -Z_BOUND), np.full(4, Z_BOUND))


def test_two_point_affine():
    stats, y = fit_affine([[1, 1, 1, 1], [3, 3, 3, 3]])
    np.testing.assert_array_equal(stats.mu, [2, 2, 2, 2])
    np.testing.assert_allclose(stats.sigma, np.sqrt(2))
    np.testing.assert_allclose(y, [[-1 / np.sqrt(2)] * 4, [1 / np.sqrt(2)] * 4])


def test_affine_of_standardized_is_identity(rng):
    x = rng.normal(size=(1000, 4))
    _, x = fit_affine(x)
    stats, y = fit_affine(x)
    np.testing.assert_allclose(stats.mu, 0, atol=1e-12)
    np.testing.assert_allclose(stats.sigma, 1, rtol=1e-12)
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_affine_output_moments(rng):
    _, y = fit_affine(rng.lognormal(size=(50, 4)) * [1e5, 1, 1e3, 1])
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=0, ddof=1), 1, rtol=1e-12)


def test_constant_series_is_degenerate():
    with pytest.raises(DegenerateDevice):
        fit_affine(np.ones((10, 4)))


@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4),
       st.lists(st.floats(1e-3, 1e6), min_size=4, max_size=4))
def test_affine_inverse_property(mu, sigma):
    a = AffineStats(np.array(mu), np.array(sigma))
    x = np.array([[0.3, -2.0, 1.5, 0.0]])
    back = a.apply(a.invert(x))
    np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * max(1.0, max(map(abs, mu))) / min(sigma))


def test_identity_gamma():
    g = GammaPolys.identity()
    z = np.array([0.5, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(gamma_inverse(g, z), z)
    assert gamma_forward(g, np.full(4, 0.7))[0] == pytest.approx(0.7, abs=1e-12)


def test_affine_gamma_arithmetic():
    g = single_gamma([1.0, 2.0])
    assert gamma_inverse(g, np.ones(4))[0] == 3.0


def test_cubic_gamma_forward():
    g = single_gamma([0.0, 1.0, 0.0, 0.1])
    assert gamma_forward(g, np.full(4, 1.1))[0] == pytest.approx(1.0, abs=1e-9)


def test_forward_inverse_round_trip():
    g = single_gamma([0.1, 1.0, 0.1, 0.05, 0.005])
    g.check()
    z = np.repeat(np.linspace(-3, 3, 121)[:, None], 4, axis=1)
    np.testing.assert_allclose(gamma_forward(g, gamma_inverse(g, z)), z, atol=1e-9)


def test_out_of_range_maps_to_boundary():
    g = GammaPolys.identity()
    assert gamma_forward(g, np.full(4, 50.0))[0] == pytest.approx(Z_BOUND)
    assert gamma_inverse(g, np.full(4, -50.0))[0] == pytest.approx(-Z_BOUND)


def test_gamma_of_normals_is_identity(rng):
    g = fit_gamma(rng.standard_normal((100_000, 4)))
    z = np.repeat(np.linspace(-2, 2, 81)[:, None], 4, axis=1)
    assert np.max(np.abs(gamma_inverse(g, z) - z)) < 0.05
    assert g.degree == 4


@pytest.fixture(scope="module")
def lognormal_fit():
    x = np.random.default_rng(3).lognormal(sigma=0.5, size=(100_000, 4))
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    return x, fit_gamma(x)


def test_lognormal_gamma_is_convex(lognormal_fit):
    _, g = lognormal_fit
    z = np.repeat(np.linspace(-2, 2, 81)[:, None], 4, axis=1)
    assert np.all(np.diff(gamma_inverse(g, z), 2, axis=0) > 0)


def test_lognormal_forward_is_normal(lognormal_fit):
    x, g = lognormal_fit
    z = gamma_forward(g, x)
    for i in range(4):
        assert kstest(z[:, i], "norm").statistic < 0.02


def test_fitted_gamma_increasing(lognormal_fit):
    lognormal_fit[1].check()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-1.0, 1.0), st.floats(0.01, 0.1))
def test_monotone_cubics_invert(a1, frac, a3):
    # a1 + 2 a2 z + 3 a3 z^2 > 0 everywhere when a2^2 < 3 a1 a3
    a2 = frac * np.sqrt(3 * a1 * a3) * 0.99
    g = single_gamma([0.0, a1, a2, a3])
    g.check()
    z = np.linspace(-3, 3, 25)[:, None].repeat(4, axis=1)
    np.testing.assert_allclose(gamma_forward(g, gamma_inverse(g, z)), z, atol=1e-9)
