"""Per-device affine standardization and the element-wise quantile transform.

Training direction: ``x -> (x - mu_m) / sigma_m -> gamma_forward -> z ~ N(0, 1)``.
Generative direction: ``z -> gamma_inverse (polynomials) -> * sigma* + mu* -> x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.stats import norm

from .errors import DegenerateDevice, NonMonotoneFit

Z_COVERAGE = 0.0005
Z_BOUND = float(norm.ppf(1.0 - Z_COVERAGE))


@dataclass(frozen=True)
class AffineStats:
    mu: np.ndarray
    sigma: np.ndarray

    def apply(self, x):
        return (np.asarray(x) - self.mu) / self.sigma

    def invert(self, y):
        return np.asarray(y) * self.sigma + self.mu


def fit_affine(series):
    """Standardize one device's ``(N, 4)`` series to zero mean, unit sample std.

    Uses the ``N - 1`` denominator, matching the device statistics fed to the
    mixture model.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (N, d) series with N >= 2")
    mu = x.mean(axis=0)
    sigma = x.std(axis=0, ddof=1)
    if np.any(sigma == 0):
        raise DegenerateDevice(f"constant feature(s) at index {np.flatnonzero(sigma == 0).tolist()}")
    stats = AffineStats(mu, sigma)
    return stats, stats.apply(x)


@dataclass(frozen=True)
class GammaPolys:
    """Four increasing polynomials mapping normal scores to standardized features.

    ``coeffs[i]`` holds the ascending coefficients of gamma_i; inputs are
    clamped to ``[z_lo[i], z_hi[i]]`` before evaluation.
    """

    coeffs: np.ndarray  # (4, degree + 1)
    z_lo: np.ndarray
    z_hi: np.ndarray

    def __post_init__(self):
        for name in ("coeffs", "z_lo", "z_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def identity(cls, degree=4, n=4, bound=Z_BOUND):
        c = np.zeros((n, degree + 1))
        c[:, 1] = 1.0
        return cls(c, np.full(n, -bound), np.full(n, bound))

    @property
    def degree(self):
        return self.coeffs.shape[1] - 1

    def check(self, step=1e-3):
        for i, c in enumerate(self.coeffs):
            if not is_increasing(c, self.z_lo[i], self.z_hi[i], step):
                raise ValueError(f"gamma_{i + 1} is not strictly increasing on its domain")


def is_increasing(coeffs, lo, hi, step=1e-3):
    z = np.arange(lo, hi + step / 2, step)
    return bool(np.all(P.polyval(z, P.polyder(coeffs)) > 0))


def fit_gamma(pooled, degree=4, ridge_start=1e-3, max_refits=5) -> GammaPolys:
    """Fit gamma_i from quantile pairs of the pooled standardized features.

    Sorted samples of each feature are paired with the standard normal
    quantiles ``Phi^-1((k - 0.5) / K)`` and a degree-``degree`` polynomial
    ``z -> value`` is fitted by least squares. If it is not increasing on the
    clamp domain, the fit is repeated with a ridge penalty on the non-linear
    coefficients, starting at ``ridge_start`` and growing x10 per attempt.
    """
    x = np.asarray(pooled, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    K, d = x.shape
    if K < 1000:
        raise ValueError(f"need at least 1000 pooled samples per feature, got {K}")
    q = norm.ppf((np.arange(1, K + 1) - 0.5) / K)
    X = np.stack([q**k for k in range(degree + 1)], axis=1)
    xtx = X.T @ X / K
    penalty = np.diag([0.0, 0.0] + [1.0] * (degree - 1))
    lo, hi = -Z_BOUND, Z_BOUND

    coeffs = np.empty((d, degree + 1))
    for i in range(d):
        xty = X.T @ np.sort(x[:, i]) / K
        lam = 0.0
        for attempt in range(max_refits + 1):
            c = np.linalg.solve(xtx + lam * penalty, xty)
            if is_increasing(c, lo, hi):
                break
            lam = ridge_start if attempt == 0 else lam * 10
        else:
            raise NonMonotoneFit(f"gamma_{i + 1}: no increasing fit after {max_refits} ridge refits")
        coeffs[i] = c
    return GammaPolys(coeffs, np.full(d, lo), np.full(d, hi))


def gamma_inverse(g: GammaPolys, z):
    """Evaluate ``(gamma_1(z_1), ..., gamma_4(z_4))`` on clamped inputs.

    ``z`` has trailing dimension 4; any leading shape is kept.
    """
    z = np.clip(np.asarray(z, dtype=float), g.z_lo, g.z_hi)
    # Horner, vectorized across the feature axis
    out = np.broadcast_to(g.coeffs[:, -1], z.shape).copy()
    for k in range(g.degree - 1, -1, -1):
        out = out * z + g.coeffs[:, k]
    return out


def gamma_forward(g: GammaPolys, values, rtol=1e-12, max_iter=100):
    """Numerically invert gamma: find ``z`` with ``gamma_i(z_i) = values_i``.

    Safeguarded Newton iteration inside a shrinking bracket. Values beyond
    ``[gamma_i(z_lo), gamma_i(z_hi)]`` map to the domain boundary.
    """
    y = np.asarray(values, dtype=float)
    out = np.empty_like(y)
    for i in range(g.coeffs.shape[0]):
        c = g.coeffs[i]
        dc = P.polyder(c)
        lo_v, hi_v = P.polyval(g.z_lo[i], c), P.polyval(g.z_hi[i], c)
        tol = rtol * max(1.0, abs(lo_v), abs(hi_v))
        target = np.atleast_1d(np.clip(y[..., i], lo_v, hi_v))
        grid = np.linspace(g.z_lo[i], g.z_hi[i], 1025)
        z = np.interp(target, P.polyval(grid, c), grid)
        a = np.full_like(z, g.z_lo[i])
        b = np.full_like(z, g.z_hi[i])
        for _ in range(max_iter):
            f = P.polyval(z, c) - target
            if np.all(np.abs(f) < tol):
                break
            a = np.where(f < 0, z, a)
            b = np.where(f > 0, z, b)
            with np.errstate(divide="ignore", invalid="ignore"):
                zn = z - f / P.polyval(z, dc)
            bad = ~((zn > a) & (zn < b))
            zn[bad] = 0.5 * (a[bad] + b[bad])
            z = np.where(np.abs(f) < tol, z, zn)
        out[..., i] = z.reshape(y.shape[:-1])
    return out
