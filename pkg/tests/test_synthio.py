import numpy as np
import pytest

from rramgen.cell import CellArray, r_of_R
from rramgen.synthio import (
    generate_features,
    generate_sweep_dataset,
    normalize_features,
    reference_defect_mean,
    replay_sweeps,
    sweep_waveform,
    train,
)
from rramgen.validation import compare, component_weight_near, lag1_autocorr, within_device_corr


def test_reference_constants(reference):
    np.testing.assert_array_equal(reference.gmm.weights, [0.90, 0.06, 0.04])
    assert reference.iv.eta == 3.0
    assert reference.var.p == 10
    assert reference.var.spectral_radius() < 0.95
    np.testing.assert_array_equal(reference_defect_mean()[[0, 3]], [45e3, 0.65])


def test_reference_unit_stationary_variance(reference):
    # simulate the process as an independent check of the Lyapunov construction
    from rramgen.var_process import simulate

    x = simulate(reference.var, 20_000, np.random.default_rng(0), m=20).reshape(-1, 4)
    np.testing.assert_allclose(np.diag(reference.var.stationary_cov()), 1.0, rtol=1e-9)
    np.testing.assert_allclose(x.var(axis=0), 1.0, atol=0.03)


def test_reference_gammas_preserve_moments(reference):
    z, w = np.polynomial.hermite_e.hermegauss(40)
    w = w / w.sum()
    # integrate the raw polynomials: quadrature nodes reach beyond the clamp
    y = np.polynomial.polynomial.polyval(z, reference.gammas.coeffs.T)
    np.testing.assert_allclose(y @ w, 0.0, atol=1e-12)
    np.testing.assert_allclose(y**2 @ w, 1.0, rtol=1e-12)
    reference.gammas.check()


def test_waveform_shape():
    v = sweep_waveform(256)
    assert v.shape == (256,)
    assert v[0] == 0.0 and v.min() == -1.5 and v.max() == 2.0
    assert np.argmin(v) < np.argmax(v)
    vv = sweep_waveform(128, phase=np.random.default_rng(0).random((3, 5)))
    assert vv.shape == (3, 5, 128)
    assert np.all(vv.min(axis=-1) == -1.5) and np.all(vv.max(axis=-1) == 2.0)


def test_generated_features_shape_and_determinism(reference):
    a = generate_features(reference, 6, 20, np.random.default_rng(3))
    b = generate_features(reference, 6, 20, np.random.default_rng(3))
    assert a.shape == (20, 6, 4)
    assert np.array_equal(a, b)
    assert np.all(a[..., 0] > a[..., 2]) and np.all(a[..., 1] < 0) and np.all(a[..., 3] > 0)


def test_replay_matches_sequential_simulation(reference):
    feats = generate_features(reference, 3, 7, np.random.default_rng(4))
    v = sweep_waveform(200)
    fast = replay_sweeps(reference.iv, feats, v)
    for m in range(3):
        r = r_of_R(feats[0, m, 0], reference.iv)
        for n in range(6):
            cell = CellArray.replay(reference.iv, feats[n, m][None], feats[n + 1, m][None], r0=[r])
            cur = np.array([cell.apply(x)[0] for x in v])
            np.testing.assert_allclose(fast[m, n], cur, rtol=1e-12, atol=0)
            r = cell.r[0]


def test_sweep_dataset(reference):
    ds = generate_sweep_dataset(reference, 3, 4, samples=64, rng=np.random.default_rng(0))
    assert ds.current.shape == (3, 4, 64) and ds.voltage.shape == (3, 4, 64)
    again = generate_sweep_dataset(reference, 3, 4, samples=64, rng=np.random.default_rng(0))
    assert np.array_equal(ds.current, again.current)
    with pytest.raises(ValueError):
        generate_sweep_dataset(reference, 3, 4, samples=63)


def test_normalize_features(rng):
    values = rng.lognormal(size=(50, 5, 4)) * [1e5, 1, 1e3, 1]
    y, stats = normalize_features(values)
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=0, ddof=1), 1, rtol=1e-12)
    np.testing.assert_allclose(stats[:, :4], values.mean(axis=0))


def test_train_report(reference):
    ds = generate_sweep_dataset(reference, 16, 150, rng=np.random.default_rng(1))
    model, report = train(ds, p=10, k=3, seed=0)
    assert (report.p, report.k) == (10, 3)
    assert (report.devices, report.cycles) == (16, 150)
    assert report.valid_fraction >= 0.99
    assert model.var.p == 10 and len(model.gmm.weights) == 3
    assert report.spectral_radius < 1
    assert 2.8 <= report.eta <= 3.2


def test_within_device_corr_oracle(rng):
    values = rng.normal(size=(40, 3, 4)) @ np.triu(np.ones((4, 4)))
    expect = np.mean([np.corrcoef(values[:, m].T) for m in range(3)], axis=0)
    np.testing.assert_allclose(within_device_corr(values), expect, rtol=1e-12)


def test_lag1_oracle(rng):
    values = rng.normal(size=(30, 2, 4))
    expect = []
    for m in range(2):
        x = values[:, m] - values[:, m].mean(axis=0)
        expect.append([np.dot(x[1:, i], x[:-1, i]) / np.dot(x[:, i], x[:, i]) for i in range(4)])
    np.testing.assert_allclose(lag1_autocorr(values), np.mean(expect, axis=0), rtol=1e-12)


def test_self_comparison_passes(reference):
    values = generate_features(reference, 64, 100, np.random.default_rng(2))
    rep = compare(values, values, defect_mean=reference_defect_mean())
    assert rep.ok
    assert max(rep.ks) == 0.0 and rep.corr_max_diff == 0.0


def test_component_weight_near(reference):
    w, k = component_weight_near(reference.gmm, reference_defect_mean())
    assert (w, k) == (0.04, 2)
