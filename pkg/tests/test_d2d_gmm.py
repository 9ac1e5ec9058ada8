import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from rramgen.d2d_gmm import (
    GmmParams,
    classify,
    compute_device_stats,
    dataset_stats,
    fit_gmm,
    gmm_loglik,
    sample_components,
    sample_device,
    sample_population,
    stratified_counts,
)
from rramgen.errors import SingularComponent
from rramgen.synthio import reference_defect_mean


def three_clusters(m, weights, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    means = np.zeros((3, 8))
    means[1, 0] = sep
    means[2, 1] = sep
    comps = np.repeat(np.arange(3), stratified_counts(weights, m))
    return means, comps, means[comps] + rng.standard_normal((m, 8))


def match(fitted_means, true_means):
    return [int(np.argmin(np.sum((fitted_means - t) ** 2, axis=1))) for t in true_means]


def test_constant_series_stats():
    s = compute_device_stats(np.full((5, 4), 2.5))
    np.testing.assert_array_equal(s, [2.5] * 4 + [0.0] * 4)


def test_two_cycle_stats():
    s = compute_device_stats([[0, 0, 0, 0], [2, 2, 2, 2]])
    np.testing.assert_allclose(s, [1] * 4 + [np.sqrt(2)] * 4)


def test_dataset_stats_matches_per_device(rng):
    values = rng.normal(size=(20, 6, 4))
    got = dataset_stats(values)
    for m in range(6):
        np.testing.assert_allclose(got[m], compute_device_stats(values[:, m]))


def test_three_cluster_recovery():
    weights = (0.6, 0.36, 0.04)
    means, _, x = three_clusters(2000, weights)
    gmm = fit_gmm(x, k=3, seed=1)
    order = match(gmm.raw_means(), means)
    assert sorted(order) == [0, 1, 2]
    np.testing.assert_allclose(gmm.weights[order], weights, atol=0.02)
    assert np.max(np.linalg.norm(gmm.raw_means()[order] - means, axis=1)) < 0.05 * 10.0


def test_em_loglik_nondecreasing():
    _, _, x = three_clusters(600, (0.5, 0.3, 0.2), sep=3.0, seed=4)
    _, trace = fit_gmm(x, k=3, seed=2, return_trace=True)
    assert np.all(np.diff(trace.loglik) >= -1e-10 * len(x))
    assert trace.iterations >= 2


def test_single_component_closed_form(rng):
    x = rng.multivariate_normal(np.arange(8.0), np.diag(np.linspace(0.5, 2, 8)), size=500)
    gmm = fit_gmm(x, k=1)
    np.testing.assert_allclose(gmm.raw_means()[0], x.mean(axis=0), atol=1e-6)
    # EM's closed form is the biased sample covariance; the fit adds a documented ridge
    z = (x - gmm.center) / gmm.scale
    ridge = 1e-6 * np.trace(np.cov(z, rowvar=False, bias=True)) / 8
    expect = np.cov(x, rowvar=False, bias=True) + ridge * np.diag(gmm.scale**2)
    np.testing.assert_allclose(gmm.raw_covs()[0], expect, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(gmm.raw_covs()[0], np.cov(x, rowvar=False, bias=True), atol=3e-6)


def test_loglik_at_mean():
    gmm = GmmParams([1.0], np.zeros((1, 8)), np.eye(8)[None], np.zeros(8), np.ones(8), np.zeros(4))
    assert gmm_loglik(gmm, np.zeros(8)) == pytest.approx(-4 * np.log(2 * np.pi), rel=1e-14)


def test_loglik_standardization_jacobian():
    _, _, x = three_clusters(300, (0.5, 0.3, 0.2), sep=4.0, seed=5)
    x = x * np.linspace(1e3, 1e-2, 8) + 5.0
    gmm = fit_gmm(x, k=3, seed=0)
    parts = []
    for w, m, c in zip(gmm.weights, gmm.raw_means(), gmm.raw_covs()):
        d = x - m
        maha = np.sum(d * np.linalg.solve(c, d.T).T, axis=1)
        parts.append(np.log(w) - 0.5 * (8 * np.log(2 * np.pi) + np.linalg.slogdet(c)[1] + maha))
    direct = logsumexp(np.column_stack(parts), axis=1).sum()
    assert gmm_loglik(gmm, x) == pytest.approx(direct, rel=1e-9)
    z = (x - gmm.center) / gmm.scale
    assert gmm_loglik(gmm, z, standardized=True) - gmm_loglik(gmm, x) == pytest.approx(
        len(x) * np.log(gmm.scale).sum(), rel=1e-12)


def test_defect_cluster_isolated(reference):
    rng = np.random.default_rng(3)
    stats = sample_population(reference.gmm, 1000, rng)
    gmm = fit_gmm(stats, k=3, seed=0)
    target = (reference_defect_mean() - gmm.center) / gmm.scale
    k = int(np.argmin(np.sum((gmm.means - target) ** 2, axis=1)))
    assert abs(gmm.weights[k] - 0.04) <= 0.02
    truth = classify(reference.gmm, stats) == 2
    assert np.mean(classify(gmm, stats)[truth] == k) > 0.95


def test_sample_refit_recovers_weights(reference):
    stats = sample_population(reference.gmm, 10_000, np.random.default_rng(8), stratified=False)
    gmm = fit_gmm(stats, k=3, seed=0)
    order = match(gmm.raw_means(), reference.gmm.raw_means())
    assert sorted(order) == [0, 1, 2]
    np.testing.assert_allclose(gmm.weights[order], reference.gmm.weights, atol=0.03)


def test_point_mass_sampling():
    s0 = np.array([1e5, -0.9, 5e3, 0.6, 1e4, 0.05, 500, 0.04])
    gmm = GmmParams([1.0], np.zeros((1, 8)), np.zeros((1, 8, 8)), s0, np.ones(8), np.zeros(4))
    rng = np.random.default_rng(0)
    for _ in range(5):
        np.testing.assert_array_equal(sample_device(gmm, rng), s0)


def test_component_frequencies(reference):
    comps = sample_components(reference.gmm, 100_000, np.random.default_rng(1), stratified=False)
    np.testing.assert_allclose(np.bincount(comps, minlength=3) / 1e5, reference.gmm.weights, atol=0.01)


def test_sampled_cloud_covariance(reference):
    s = sample_population(reference.gmm, 200_000, np.random.default_rng(2), stratified=False)
    target = reference.gmm.mixture_cov()
    # compare in standardized units so ohms and volts weigh alike
    sc = np.outer(reference.gmm.scale, reference.gmm.scale)
    err = np.linalg.norm((np.cov(s, rowvar=False) - target) / sc) / np.linalg.norm(target / sc)
    assert err < 0.05


def test_sigma_floor(reference):
    s = sample_population(reference.gmm, 50_000, np.random.default_rng(4))
    assert np.all(s[:, 4:] >= reference.gmm.sigma_floor)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.integers(0, 5000))
def test_stratified_counts(raw, m):
    w = np.array(raw) / sum(raw)
    c = stratified_counts(w, m)
    assert c.sum() == m
    assert np.all(np.abs(c - w * m) < 1.0)


def test_needs_enough_devices():
    with pytest.raises(ValueError):
        fit_gmm(np.random.default_rng(0).normal(size=(11, 8)), k=3)


def test_component_death_raises():
    # two distinct rows only: a third component cannot keep any responsibility
    x = np.repeat(np.eye(8)[:2], 20, axis=0)
    with pytest.raises(SingularComponent):
        fit_gmm(x, k=3, restarts=1)
