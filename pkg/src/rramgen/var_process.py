"""Vector autoregressive process over normalized feature vectors.

    A x_n = sum_{i=1..p} B_i x_{n-i} + C eps_n

``A`` is unit lower triangular so that each feature may depend on the features
measured earlier in the same cycle (R_H -> V_S -> R_L -> V_R); ``C`` is
diagonal. Both choices make the OLS fit unique and the step a forward
substitution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UnstableProcess

DEFAULT_ORDER = 10
BURN_IN = 100


@dataclass(frozen=True)
class VarParams:
    A: np.ndarray  # (d, d) unit lower triangular
    B: np.ndarray  # (p, d, d); B[i] multiplies x_{n-i-1}
    C: np.ndarray  # (d, d) lower triangular, positive diagonal

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def p(self):
        return self.B.shape[0]

    @property
    def dim(self):
        return self.A.shape[0]

    def check(self):
        A, C = self.A, self.C
        if not np.array_equal(np.diag(A), np.ones(self.dim)) or np.any(np.triu(A, 1) != 0):
            raise ValueError("A must be unit lower triangular")
        if np.any(np.triu(C, 1) != 0) or np.any(np.diag(C) < 0):
            raise ValueError("C must be lower triangular with non-negative diagonal")
        rho = self.spectral_radius()
        if rho >= 1:
            raise UnstableProcess(rho)

    def reduced(self):
        """Reduced-form lag matrices ``A^-1 B_i`` and noise loading ``A^-1 C``."""
        Ainv = np.linalg.inv(self.A)
        return np.einsum("ij,pjk->pik", Ainv, self.B), Ainv @ self.C

    def companion(self):
        d, p = self.dim, self.p
        phi, _ = self.reduced()
        F = np.zeros((d * p, d * p))
        F[:d] = np.concatenate(list(phi), axis=1)
        F[d:, :-d] = np.eye(d * (p - 1))
        return F

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    def stationary_cov(self):
        """Covariance of x_n under the stationary distribution."""
        d = self.dim
        _, L = self.reduced()
        Q = np.zeros((d * self.p, d * self.p))
        Q[:d, :d] = L @ L.T
        return solve_discrete_lyapunov(self.companion(), Q)[:d, :d]


@dataclass
class VarState:
    """Ring buffer of the last ``p`` outputs; ``buf[head]`` is the most recent."""

    buf: np.ndarray
    head: int = 0
    n: int = 0
    _rhs: np.ndarray = field(default=None, repr=False)

    def lag(self, i):
        """x_{n-i} for i = 1..p."""
        return self.buf[(self.head - i + 1) % len(self.buf)]

    def history(self):
        """Lags as a (p, d) array, most recent first."""
        p = len(self.buf)
        return self.buf[(self.head - np.arange(p)) % p]


def _forward_sub(A, rhs):
    """Solve ``A x = rhs`` for unit lower-triangular A; rhs is (..., d)."""
    x = np.array(rhs, dtype=float, copy=True)
    for j in range(1, A.shape[0]):
        x[..., j] -= x[..., :j] @ A[j, :j]
    return x


def var_step(state: VarState, params: VarParams, eps):
    """Advance one cycle and return x_n; the state buffer is updated in place."""
    d = params.dim
    if state._rhs is None:
        state._rhs = np.empty(d)
    rhs = state._rhs
    np.dot(params.C, eps, out=rhs)
    for i in range(params.p):
        rhs += params.B[i] @ state.lag(i + 1)
    A = params.A
    for j in range(1, d):
        for k in range(j):
            rhs[j] -= A[j, k] * rhs[k]
    state.head = (state.head + 1) % params.p
    state.buf[state.head] = rhs
    state.n += 1
    return rhs.copy()


def step_batch(hist, params: VarParams, eps):
    """Vectorized step for many independent realizations.

    ``hist`` is ``(m, p, d)`` with the most recent lag first and is shifted in
    place; returns the new ``(m, d)`` outputs.
    """
    m, p, d = hist.shape
    rhs = hist.reshape(m, p * d) @ params.B.transpose(0, 2, 1).reshape(p * d, d)
    rhs += eps @ params.C.T
    x = _forward_sub(params.A, rhs)
    hist[:, 1:] = hist[:, :-1]
    hist[:, 0] = x
    return x


def burn_in(params: VarParams, rng, steps=BURN_IN) -> VarState:
    """Start from zero history and discard ``steps`` outputs."""
    state = VarState(np.zeros((params.p, params.dim)))
    for _ in range(steps):
        var_step(state, params, rng.standard_normal(params.dim))
    state.n = 0
    return state


def burn_in_batch(params: VarParams, rng, m, steps=BURN_IN):
    """Burn in ``m`` realizations from zero; returns their ``(m, p, d)`` lag history.

    Same random stream and result as ``steps`` calls of :func:`step_batch`,
    but lags live in a time-major ring so no history is copied per step.
    """
    p, d = params.p, params.dim
    ring = np.zeros((p, m, d))
    BT = params.B.transpose(0, 2, 1)
    rhs = np.empty((m, d))
    head = 0
    for _ in range(steps):
        np.matmul(rng.standard_normal((m, d)), params.C.T, out=rhs)
        for i in range(p):
            rhs += ring[(head - i) % p] @ BT[i]
        head = (head + 1) % p
        ring[head] = _forward_sub(params.A, rhs)
    order = (head - np.arange(p)) % p
    return np.ascontiguousarray(ring[order].transpose(1, 0, 2))


def simulate(params: VarParams, n, rng, m=1, burn=BURN_IN):
    """Generate ``(n, m, d)`` outputs of ``m`` independent realizations."""
    hist = burn_in_batch(params, rng, m, burn)
    out = np.empty((n, m, params.dim))
    for k in range(n):
        out[k] = step_batch(hist, params, rng.standard_normal((m, params.dim)))
    return out


def fit_var(series, p=DEFAULT_ORDER, check=True) -> VarParams:
    """Least-squares fit of the triangular VAR(p).

    Parameters
    ----------
    series : array (N, M, d) or sequence of (N_m, d) arrays
        Normalized features per device; lag windows never cross devices.
    p : int
        Lag order.

    Feature ``j`` is regressed on features ``0..j-1`` of the same cycle and on
    all features of the ``p`` previous cycles, without intercept. The negated
    contemporaneous coefficients form row ``j`` of A, the lag coefficients
    row ``j`` of each B_i, and the residual standard deviation is ``C[j, j]``.

    Raises
    ------
    UnstableProcess
        If the fitted process is not stationary (and ``check`` is set).
    """
    if isinstance(series, np.ndarray) and series.ndim == 3:
        devices = [series[:, m] for m in range(series.shape[1])]
    else:
        devices = [np.asarray(s, dtype=float) for s in series]
    d = devices[0].shape[1]
    blocks = []
    for z in devices:
        if len(z) < p + 1:
            raise ValueError(f"each device needs at least p + 1 = {p + 1} cycles")
        # window k covers z[k .. k+p]; column p is the target, p-1-i is lag i+1
        w = sliding_window_view(z, p + 1, axis=0)
        target = w[..., p]
        lags = w[..., :p][..., ::-1].transpose(0, 2, 1).reshape(len(w), p * d)
        blocks.append(np.hstack([target, lags]))
    D = np.vstack(blocks)
    n = len(D)
    G = D.T @ D

    A = np.eye(d)
    B = np.zeros((p, d, d))
    C = np.zeros((d, d))
    lag_cols = np.arange(d, d + p * d)
    for j in range(d):
        cols = np.concatenate([np.arange(j), lag_cols])
        coef = np.linalg.solve(G[np.ix_(cols, cols)], G[cols, j])
        rss = G[j, j] - coef @ G[cols, j]
        C[j, j] = np.sqrt(max(rss, 0.0) / (n - len(cols)))
        A[j, :j] = -coef[:j]
        B[:, j, :] = coef[j:].reshape(p, d)
    params = VarParams(A, B, C)
    if check:
        rho = params.spectral_radius()
        if rho >= 1:
            raise UnstableProcess(rho)
    return params
