"""Device-to-device variability: per-device statistics and their Gaussian mixture.

Each training device is summarized by the 8-vector
``(mu(R_H), mu(V_S), mu(R_L), mu(V_R), sigma(R_H), sigma(V_S), sigma(R_L), sigma(V_R))``
of its cycle-to-cycle means and standard deviations. A K-component mixture
with full covariances is fitted by EM in standardized coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .errors import SingularComponent

N_STATS = 8
SIGMA_FLOOR_FRACTION = 1e-3


def compute_device_stats(series):
    """Sample means and sample standard deviations (N - 1) of an (N, 4) series."""
    x = np.asarray(series, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 cycles")
    return np.concatenate([x.mean(axis=0), x.std(axis=0, ddof=1)])


def dataset_stats(values):
    """Device statistics for an (N, M, 4) feature array -> (M, 8)."""
    values = np.asarray(values, dtype=float)
    return np.concatenate([values.mean(axis=0), values.std(axis=0, ddof=1)], axis=1)


@dataclass(frozen=True)
class GmmParams:
    """Mixture over standardized device statistics.

    ``means`` and ``covs`` live in standardized coordinates
    ``(s - center) / scale``; ``sigma_floor`` (raw units) bounds sampled
    standard deviations from below.
    """

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)
    center: np.ndarray  # (D,)
    scale: np.ndarray  # (D,)
    sigma_floor: np.ndarray  # (D // 2,)
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("weights", "means", "covs", "center", "scale", "sigma_floor"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        chol = np.array([_safe_cholesky(c) for c in self.covs])
        object.__setattr__(self, "_chol", chol)

    @property
    def k(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def raw_means(self):
        return self.center + self.scale * self.means

    def raw_covs(self):
        return self.covs * np.outer(self.scale, self.scale)

    def mixture_cov(self):
        """Covariance of the mixture in raw units."""
        mu = self.raw_means()
        m = self.weights @ mu
        second = np.einsum("k,kij->ij", self.weights, self.raw_covs() + np.einsum("ki,kj->kij", mu, mu))
        return second - np.outer(m, m)

    def check(self):
        if not np.isclose(self.weights.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.weights <= 0) or np.any(self.weights >= 1) and self.k > 1:
            raise ValueError("weights must lie in (0, 1)")
        for c in self.covs:
            if not np.allclose(c, c.T):
                raise ValueError("covariance not symmetric")
            cholesky(c, lower=True)


def _safe_cholesky(c):
    try:
        return cholesky(c, lower=True)
    except np.linalg.LinAlgError:
        # point-mass components (all-zero covariance) sample their mean
        if np.all(c == 0):
            return np.zeros_like(c)
        raise


def _log_gauss(x, mean, cov):
    L = cholesky(cov, lower=True)
    y = solve_triangular(L, (x - mean).T, lower=True)
    maha = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (x.shape[1] * np.log(2 * np.pi) + logdet + maha)


def _log_resp(x, weights, means, covs):
    logp = np.column_stack([np.log(w) + _log_gauss(x, m, c) for w, m, c in zip(weights, means, covs)])
    norm = logsumexp(logp, axis=1)
    return logp - norm[:, None], norm


def gmm_loglik(gmm: GmmParams, stats, standardized=False):
    """Total mixture log-density of the rows of ``stats``.

    With ``standardized=False`` (default) ``stats`` are raw device statistics
    and the density includes the Jacobian of the standardization.
    """
    x = np.atleast_2d(np.asarray(stats, dtype=float))
    if standardized:
        return float(_log_resp(x, gmm.weights, gmm.means, gmm.covs)[1].sum())
    z = (x - gmm.center) / gmm.scale
    ll = _log_resp(z, gmm.weights, gmm.means, gmm.covs)[1].sum()
    return float(ll - len(x) * np.sum(np.log(gmm.scale)))


@dataclass
class EmTrace:
    """Log-likelihood (standardized coordinates) after every E-step."""

    loglik: list
    iterations: int
    converged: bool
    inertia: float


def _m_step(x, resp, reg, min_count):
    nk = resp.sum(axis=0)
    if np.any(nk < min_count):
        raise SingularComponent(f"component weight fell to {nk.min() / len(x):.3g} "
                                f"(< {min_count / len(x):.3g})")
    weights = nk / len(x)
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), x.shape[1], x.shape[1]))
    for k in range(len(nk)):
        dx = x - means[k]
        covs[k] = (resp[:, k, None] * dx).T @ dx / nk[k]
        covs[k].flat[:: x.shape[1] + 1] += reg
    return weights, means, covs


def _kmeans(x, k, rng):
    seed = int(rng.integers(2**31))
    for attempt in range(20):
        try:
            with np.errstate(invalid="ignore", divide="ignore"):
                centroids, labels = kmeans2(x, k, minit="++", seed=seed + attempt, missing="raise")
        except ClusterError:
            continue
        if len(np.unique(labels)) == k:
            return labels, float(np.sum((x - centroids[labels]) ** 2))
    raise SingularComponent("k-means could not populate every cluster")


def _em(x, labels, k, reg, tol, max_iter, min_count):
    resp = np.eye(k)[labels]
    weights, means, covs = _m_step(x, resp, reg, min_count)
    history = []
    converged = False
    for it in range(max_iter):
        log_resp, norm = _log_resp(x, weights, means, covs)
        history.append(float(norm.sum()))
        if it and history[-1] - history[-2] < tol * len(x):
            converged = True
            break
        weights, means, covs = _m_step(x, np.exp(log_resp), reg, min_count)
    return (weights, means, covs), history, converged


def fit_gmm(stats, k=3, restarts=8, seed=0, tol=1e-8, max_iter=500, return_trace=False):
    """Fit a K-component full-covariance mixture by EM.

    Coordinates are standardized first. Each of ``restarts`` runs is
    initialized from a seeded k-means++ clustering; the run with the highest
    final log-likelihood wins (k-means inertia breaks ties). EM stops once the
    gain per point drops below ``tol`` or after ``max_iter`` iterations.
    Covariances get ``1e-6 * trace / D`` added to their diagonal, where
    ``trace`` is that of the standardized data covariance.

    Raises
    ------
    SingularComponent
        If a component's weight falls below ``1 / (10 M)``.
    """
    s = np.asarray(stats, dtype=float)
    M, D = s.shape
    if M < 4 * k:
        raise ValueError(f"need at least {4 * k} devices for {k} components, got {M}")
    center = s.mean(axis=0)
    scale = s.std(axis=0)
    scale[scale == 0] = 1.0
    x = (s - center) / scale
    reg = 1e-6 * np.trace(np.cov(x, rowvar=False, bias=True)) / D
    min_count = M * (1.0 / (10 * M))
    half = D // 2
    floor = SIGMA_FLOOR_FRACTION * np.median(s[:, half:], axis=0)

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts if k > 1 else 1):
        labels, inertia = _kmeans(x, k, rng) if k > 1 else (np.zeros(M, dtype=int), float(np.sum(x**2)))
        params, history, converged = _em(x, labels, k, reg, tol, max_iter, min_count)
        key = (history[-1], -inertia)
        if best is None or key > best[0]:
            best = (key, params, EmTrace(history, len(history), converged, inertia))
    _, (weights, means, covs), trace = best
    gmm = GmmParams(weights, means, covs, center, scale, floor)
    return (gmm, trace) if return_trace else gmm


def _floor_sigma(gmm, raw):
    half = gmm.dim // 2
    raw[..., half:] = np.maximum(raw[..., half:], gmm.sigma_floor)
    return raw


def sample_device(gmm: GmmParams, rng):
    """Draw one device statistics vector ``(mu*, sigma*)`` in raw units."""
    comp = rng.choice(gmm.k, p=gmm.weights)
    z = gmm.means[comp] + gmm._chol[comp] @ rng.standard_normal(gmm.dim)
    return _floor_sigma(gmm, gmm.center + gmm.scale * z)


def stratified_counts(weights, m):
    """Largest-remainder allocation of ``m`` draws to components."""
    w = np.asarray(weights, dtype=float)
    exact = w * m
    counts = np.floor(exact).astype(int)
    short = m - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def sample_components(gmm: GmmParams, m, rng, stratified=True):
    if stratified:
        comps = np.repeat(np.arange(gmm.k), stratified_counts(gmm.weights, m))
        return rng.permutation(comps)
    return rng.choice(gmm.k, size=m, p=gmm.weights)


def sample_population(gmm: GmmParams, m, rng, stratified=True):
    """Draw ``m`` device statistics vectors -> (m, D).

    With ``stratified`` the component counts follow the mixture weights as
    closely as integers allow (largest remainder) and are randomly permuted,
    which removes the multinomial noise in the composition of small
    populations. Otherwise components are drawn i.i.d. like
    :func:`sample_device`.
    """
    comps = sample_components(gmm, m, rng, stratified)
    eps = rng.standard_normal((m, gmm.dim))
    z = gmm.means[comps] + np.einsum("mij,mj->mi", gmm._chol[comps], eps)
    return _floor_sigma(gmm, gmm.center + gmm.scale * z)


def classify(gmm: GmmParams, stats):
    """Most responsible component for each raw statistics row."""
    z = (np.atleast_2d(stats) - gmm.center) / gmm.scale
    return _log_resp(z, gmm.weights, gmm.means, gmm.covs)[0].argmax(axis=1)
