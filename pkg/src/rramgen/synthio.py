"""Reference model, synthetic sweep datasets and the end-to-end training pipeline.

The reference model stands in for measured data: it is a complete
:class:`~rramgen.cell.ModelParams` with hand-picked constants. Driving its
cells with the training waveform yields raw I,V traces that go through the
same extraction and fitting code as measurements would.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.stats import kstest

from .cell import CellArray, ModelParams, denormalize, r_of_R
from .d2d_gmm import GmmParams, dataset_stats, fit_gmm, gmm_loglik, sample_population
from .features import IvShape, SweepDataset, extract_dataset, fit_iv_shape
from .transforms import GammaPolys, Z_BOUND, fit_affine, fit_gamma, gamma_forward, gamma_inverse
from .var_process import VarParams, burn_in_batch, fit_var, step_batch

REFERENCE_VERSION = 1
V_MIN, V_MAX, V0 = -1.5, 2.0, 0.2
DEFAULT_SAMPLES = 256
DEFAULT_NOISE = 0.005

# skew / kurtosis of the reference transforms, per feature: (a, b) in
# gamma(z) = (z + a (z^2 - 1) + b z^3) / sqrt(1 + 2 a^2 + 6 b + 15 b^2)
_GAMMA_AB = ((0.3, 0.04), (-0.15, 0.02), (0.2, 0.03), (0.1, 0.01))

# device statistics (mu_RH, mu_VS, mu_RL, mu_VR, sd_RH, sd_VS, sd_RL, sd_VR)
_GMM_WEIGHTS = (0.90, 0.06, 0.04)
_GMM_MEANS = (
    (100e3, -0.90, 5.0e3, 0.60, 30e3, 0.06, 0.50e3, 0.04),  # typical devices
    (140e3, -1.00, 5.5e3, 0.65, 45e3, 0.08, 0.60e3, 0.05),  # high-resistance devices
    (45e3, -0.60, 4.0e3, 0.65, 6e3, 0.12, 0.80e3, 0.05),  # defective: narrow window, noisy SET
)
# device-to-device spread relative to |mean|; the spread of the mean
# coordinates is about a fifth of the cycle-to-cycle spread
_GMM_REL_SPREAD = (0.06, 0.0133, 0.02, 0.0133, 0.1, 0.1, 0.1, 0.1)
_GMM_CORR_PAIRS = {(0, 4): 0.5, (0, 2): 0.3, (1, 3): -0.3, (2, 6): 0.4, (1, 5): 0.3, (3, 7): 0.3}


def _reference_var():
    d, p = 4, 10
    A = np.eye(d)
    A[1, 0], A[2, 1], A[3, 2], A[3, 0] = -0.3, 0.2, -0.25, 0.1
    B = np.zeros((p, d, d))
    B[0] = [[0.50, 0.00, 0.00, 0.00],
            [0.10, 0.30, 0.00, 0.00],
            [0.00, 0.00, 0.40, 0.10],
            [0.00, 0.00, 0.10, 0.30]]
    B[1] = np.diag([0.15, 0.10, 0.12, 0.08])
    for i in range(2, p):
        B[i] = np.diag([0.04, 0.03, 0.04, 0.03]) * 0.6 ** (i - 2)
    # choose diagonal C so that every stationary variance is 1
    unit = VarParams(A, B, np.eye(d))
    F = unit.companion()
    Ainv = np.linalg.inv(A)
    M = np.empty((d, d))
    for k in range(d):
        Q = np.zeros((d * p, d * p))
        Q[:d, :d] = np.outer(Ainv[:, k], Ainv[:, k])
        M[:, k] = np.diag(solve_discrete_lyapunov(F, Q)[:d, :d])
    c2 = np.linalg.solve(M, np.ones(d))
    return VarParams(A, B, np.diag(np.sqrt(c2)))


def _reference_gammas():
    coeffs = np.zeros((4, 5))
    for i, (a, b) in enumerate(_GAMMA_AB):
        n = np.sqrt(1 + 2 * a * a + 6 * b + 15 * b * b)
        coeffs[i, :4] = np.array([-a, 1.0, a, b]) / n
    return GammaPolys(coeffs, np.full(4, -Z_BOUND), np.full(4, Z_BOUND))


def _reference_gmm():
    means = np.array(_GMM_MEANS)
    center = means[0]
    scale = np.abs(means[0])
    corr = np.eye(8)
    for (i, j), c in _GMM_CORR_PAIRS.items():
        corr[i, j] = corr[j, i] = c
    covs = []
    for m in means:
        sd = np.array(_GMM_REL_SPREAD) * np.abs(m) / scale
        covs.append(corr * np.outer(sd, sd))
    return GmmParams(np.array(_GMM_WEIGHTS), (means - center) / scale, np.array(covs),
                     center, scale, 1e-3 * means[0, 4:])


def _reference_iv():
    hi = np.array([0.0, 1 / 1e6, 0.0, 0.2 / 1e6, 0.0, 0.0])  # 1 MOhm, mildly non-linear
    lo = np.array([0.0, 1 / 2e3, 0.0, 0.1 / 2e3, 0.0, 0.0, 0.0])  # 2 kOhm
    return IvShape(hi, lo, 3.0, V0, V_MIN, V_MAX)


@lru_cache(maxsize=None)
def reference_params() -> ModelParams:
    """The fixed ground-truth model (see module constants for the numbers).

    Three device populations with weights 0.90 / 0.06 / 0.04, the last being a
    defect cluster with a narrow resistance window; VAR(10) with unit
    stationary variances; cubic skewing transforms; eta = 3.
    """
    return ModelParams(_reference_var(), _reference_gammas(), _reference_gmm(), _reference_iv())


def reference_defect_mean():
    """Raw device-statistics mean of the reference defect population."""
    return np.array(_GMM_MEANS[2])


# --------------------------------------------------------------------------
# sweeps


def sweep_waveform(samples, v_min=V_MIN, v_max=V_MAX, phase=0.0):
    """One triangle cycle ``0 -> v_min -> 0 -> v_max -> 0`` sampled uniformly in time.

    ``phase`` in [0, 1) shifts the sample instants by a fraction of a time
    step. The samples nearest the two turning points are snapped onto
    ``v_min`` and ``v_max`` so every cycle reaches both extremes.
    ``phase`` may be an array, giving one row per value.
    """
    phase = np.asarray(phase, dtype=float)
    ph = phase.reshape(-1)
    a, b = -v_min, v_max
    length = 2 * a + 2 * b
    step = length / samples
    s = (np.arange(samples) + ph[:, None]) * step
    v = np.select([s < a, s < 2 * a, s < 2 * a + b], [-s, s - 2 * a, s - 2 * a], length - s)
    rows = np.arange(len(ph))
    v[rows, np.clip(np.rint(a / step - ph).astype(int), 0, samples - 1)] = v_min
    v[rows, np.clip(np.rint((2 * a + b) / step - ph).astype(int), 0, samples - 1)] = v_max
    v = v.reshape(phase.shape + (samples,))
    return v


def generate_features(model: ModelParams, devices, cycles, rng, stratified=True):
    """Feature vectors of ``devices`` fresh virtual cells -> (cycles, devices, 4).

    Uses the same draws as :class:`~rramgen.cell.CellArray`: device statistics,
    VAR burn-in, then one VAR step per cycle.
    """
    stats = sample_population(model.gmm, devices, rng, stratified=stratified)
    hist = burn_in_batch(model.var, rng, devices)
    out = np.empty((cycles, devices, 4))
    for n in range(cycles):
        z = step_batch(hist, model.var, rng.standard_normal((devices, model.var.dim)))
        out[n] = denormalize(gamma_inverse(model.gammas, z), stats, model.iv)
    return out


def replay_sweeps(iv: IvShape, feats, voltage):
    """Currents of cells replaying ``feats`` (N + 1, M, 4) under per-cycle sweeps.

    ``voltage`` is ``(M, N, S)`` or broadcastable to it. All ``M * N`` cycles
    are simulated at once; the state entering cycle ``n`` is the state left by
    cycle ``n - 1`` (a first pass collects it), which matches a continuous
    simulation because the SET of every cycle erases its initial state.
    """
    N = feats.shape[0] - 1
    M = feats.shape[1]
    cur = feats[:N].transpose(1, 0, 2).reshape(M * N, 4)
    nxt = feats[1:].transpose(1, 0, 2).reshape(M * N, 4)
    S = np.shape(voltage)[-1]
    v = np.broadcast_to(voltage, (M, N, S)).reshape(M * N, S)

    first = CellArray.replay(iv, cur, nxt)
    for k in range(S):
        first.apply(v[:, k])
    r0 = r_of_R(cur[:, 0], iv).reshape(M, N)
    r0[:, 1:] = first.r.reshape(M, N)[:, :-1]

    cells = CellArray.replay(iv, cur, nxt, r0.ravel())
    current = np.empty((M * N, S))
    for k in range(S):
        current[:, k] = cells.apply(v[:, k])
    return current.reshape(M, N, S)


def generate_sweep_dataset(model: ModelParams, devices, cycles, samples=DEFAULT_SAMPLES, rng=None,
                           noise=DEFAULT_NOISE, jitter=True, stratified=True):
    """Raw I,V sweeps of ``devices`` virtual cells over ``cycles`` cycles.

    Each cycle is the triangle of :func:`sweep_waveform`; with ``jitter`` the
    sample instants get a random sub-step phase per cycle, so extracted
    threshold voltages are not quantized to a fixed grid. ``noise`` is the
    relative standard deviation of multiplicative Gaussian current noise.
    """
    if samples < 64:
        raise ValueError("need at least 64 samples per cycle")
    rng = np.random.default_rng(rng)
    feats = generate_features(model, devices, cycles + 1, rng, stratified=stratified)
    if jitter:
        voltage = sweep_waveform(samples, model.iv.v_min, model.iv.v_max,
                                 rng.random((devices, cycles)))
    else:
        voltage = sweep_waveform(samples, model.iv.v_min, model.iv.v_max)
    current = replay_sweeps(model.iv, feats, voltage)
    if noise:
        current *= 1.0 + noise * rng.standard_normal(current.shape)
    return SweepDataset(voltage, current, model.iv.v_min, model.iv.v_max)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingReport:
    p: int
    k: int
    devices: int
    cycles: int
    valid_fraction: float
    eta: float
    gamma_ks: list
    normalized_mean: list
    normalized_std: list
    var_noise_std: list
    spectral_radius: float
    gmm_weights: list
    gmm_loglik: float
    em_iterations: int

    def to_dict(self):
        return asdict(self)


def normalize_features(values):
    """Per-device standardization of an (N, M, 4) array.

    Returns the standardized array and the per-device statistics (M, 8).
    """
    N, M, d = values.shape
    out = np.empty_like(values)
    for m in range(M):
        _, out[:, m] = fit_affine(values[:, m])
    return out, dataset_stats(values)


def train(ds: SweepDataset, p=10, k=3, seed=0):
    """Extraction, normalization, VAR and mixture fits in sequence.

    Returns
    -------
    model : ModelParams
    report : TrainingReport
    """
    series = extract_dataset(ds)
    iv = fit_iv_shape(ds, series)
    return train_features(series.values, iv, p=p, k=k, seed=seed, valid_fraction=series.valid_fraction)


def train_features(values, iv: IvShape, p=10, k=3, seed=0, valid_fraction=1.0):
    """Fit the statistical part of the model to an (N, M, 4) feature array."""
    standardized, stats = normalize_features(values)
    N, M, d = values.shape
    gammas = fit_gamma(standardized.reshape(-1, d))
    z = gamma_forward(gammas, standardized)
    var = fit_var(z, p)
    gmm, trace = fit_gmm(stats, k=k, seed=seed, return_trace=True)
    model = ModelParams(var, gammas, gmm, iv)
    flat = z.reshape(-1, d)
    report = TrainingReport(
        p=p, k=k, devices=M, cycles=N,
        valid_fraction=float(valid_fraction),
        eta=float(iv.eta),
        gamma_ks=[float(kstest(flat[:, i], "norm").statistic) for i in range(d)],
        normalized_mean=flat.mean(axis=0).tolist(),
        normalized_std=flat.std(axis=0).tolist(),
        var_noise_std=np.diag(var.C).tolist(),
        spectral_radius=var.spectral_radius(),
        gmm_weights=gmm.weights.tolist(),
        gmm_loglik=gmm_loglik(gmm, stats),
        em_iterations=trace.iterations,
    )
    return model, report
