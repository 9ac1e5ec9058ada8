"""Per-cycle feature extraction and global I(V) shape fitting.

A training cycle is one bipolar triangle sweep that starts near 0 V in the
high resistance state, goes negative (abrupt SET), returns through 0 V, goes
positive (gradual RESET) and comes back to 0 V::

    0 -> v_min -> 0 -> v_max -> 0

Four features are extracted per cycle, in the order they occur:
``(r_hrs, v_set, r_lrs, v_reset)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import minimize_scalar

from .errors import (
    FeatureExtractionError,
    IllConditionedFit,
    NoResetDetected,
    NoSetDetected,
    ParseError,
    TooFewValidCycles,
)

FEATURE_NAMES = ("r_hrs", "v_set", "r_lrs", "v_reset")
R_HRS, V_SET, R_LRS, V_RESET = range(4)

DEFAULT_ETA = 3.0
_MAX_COND = 1e12

# status codes of the batched extractor
OK, NO_SET, NO_RESET, SHORT_BRANCH = 0, 1, 2, 3


@dataclass(frozen=True)
class FeatureVector:
    """One switching cycle: HRS resistance, SET voltage, LRS resistance, RESET onset."""

    r_hrs: float
    v_set: float
    r_lrs: float
    v_reset: float

    def as_array(self):
        return np.array([self.r_hrs, self.v_set, self.r_lrs, self.v_reset])

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in x))

    @property
    def window_inverted(self):
        # not an error, just suspicious
        return self.r_hrs < self.r_lrs


@dataclass(frozen=True)
class ExtractionSettings:
    """Tunable thresholds of the feature extractor.

    Attributes
    ----------
    jump_factor : float
        A SET is detected when the largest single-step current jump on the
        negative branch exceeds ``jump_factor`` times the median step.
    theta : float
        RESET is confirmed once the current drops below ``theta`` times the
        ohmic LRS extrapolation.
    v0 : float
        Resistances are fitted on samples with ``|V| <= v0``.
    """

    jump_factor: float = 5.0
    theta: float = 0.9
    v0: float = 0.2


@dataclass
class SweepDataset:
    """Raw I,V traces indexed by ``(device, cycle, sample)``.

    ``voltage`` may be a broadcast view (all cycles sharing one waveform);
    ``current`` has shape ``(devices, cycles, samples)``.
    """

    voltage: np.ndarray
    current: np.ndarray
    v_min: float
    v_max: float

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=float)
        if self.current.ndim != 3:
            raise ValueError("current must have shape (devices, cycles, samples)")
        self.voltage = np.broadcast_to(np.asarray(self.voltage, dtype=float), self.current.shape)

    @property
    def devices(self):
        return self.current.shape[0]

    @property
    def cycles(self):
        return self.current.shape[1]

    @property
    def samples(self):
        return self.current.shape[2]

    def validate(self, atol=1e-9):
        if self.samples < 16:
            raise ValueError(f"need at least 16 samples per cycle, got {self.samples}")
        v = self.voltage
        if v.min() < self.v_min - atol or v.max() > self.v_max + atol:
            raise ValueError("voltages outside [v_min, v_max]")
        if not (np.all(v.min(axis=-1) <= self.v_min + atol) and np.all(v.max(axis=-1) >= self.v_max - atol)):
            raise ValueError("every cycle must reach both v_min and v_max")
        if not np.all(np.isfinite(self.current)):
            raise ValueError("non-finite current samples")

    def trace(self, device, cycle):
        return self.voltage[device, cycle], self.current[device, cycle]


def write_sweep_csv(ds: SweepDataset, path):
    """Write ``device,cycle,voltage,current`` rows grouped by device, cycle, time."""
    import pandas as pd

    M, N, S = ds.current.shape
    frame = pd.DataFrame({
        "device": np.repeat(np.arange(M), N * S),
        "cycle": np.tile(np.repeat(np.arange(N), S), M),
        "voltage": np.ascontiguousarray(ds.voltage).ravel(),
        "current": ds.current.ravel(),
    })
    with open(path, "w", newline="") as fh:
        fh.write(f"# v_min={ds.v_min!r} v_max={ds.v_max!r}\n")
        frame.to_csv(fh, index=False, float_format="%.9e")


def read_sweep_csv(path) -> SweepDataset:
    """Inverse of :func:`write_sweep_csv`.

    Every cycle must have the same number of samples. Without a ``# v_min=``
    comment line the voltage bounds are taken from the data.
    """
    import pandas as pd

    path = Path(path)
    v_min = v_max = None
    try:
        with open(path) as fh:
            first = fh.readline()
        comment = first.startswith("#")
        if comment:
            for tok in first[1:].split():
                key, _, val = tok.partition("=")
                if key == "v_min":
                    v_min = float(val)
                elif key == "v_max":
                    v_max = float(val)
        frame = pd.read_csv(path, comment="#", dtype={"device": np.int64, "cycle": np.int64,
                                                      "voltage": float, "current": float})
    except (ValueError, pd.errors.ParserError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if list(frame.columns) != ["device", "cycle", "voltage", "current"]:
        raise ParseError(f"{path}: header must be device,cycle,voltage,current, got {list(frame.columns)}")
    dev = frame["device"].to_numpy()
    cyc = frame["cycle"].to_numpy()
    M = int(dev.max()) + 1
    N = int(cyc.max()) + 1
    if len(frame) % (M * N):
        raise ParseError(f"{path}: cycles have unequal sample counts")
    S = len(frame) // (M * N)
    expect_dev = np.repeat(np.arange(M), N * S)
    expect_cyc = np.tile(np.repeat(np.arange(N), S), M)
    if not (np.array_equal(dev, expect_dev) and np.array_equal(cyc, expect_cyc)):
        bad = int(np.flatnonzero((dev != expect_dev) | (cyc != expect_cyc))[0])
        raise ParseError(f"{path}: line {bad + 2 + comment}: rows must be grouped by device then cycle "
                         "with equal sample counts")
    volt = frame["voltage"].to_numpy().reshape(M, N, S)
    curr = frame["current"].to_numpy().reshape(M, N, S)
    if v_min is None:
        v_min = float(volt.min())
    if v_max is None:
        v_max = float(volt.max())
    return SweepDataset(volt, curr, v_min, v_max)


def write_feature_csv(values, path):
    """Write an (N, M, 4) feature array as ``device,cycle,r_hrs,v_set,r_lrs,v_reset`` rows."""
    import pandas as pd

    N, M, _ = values.shape
    frame = pd.DataFrame(np.asarray(values).transpose(1, 0, 2).reshape(M * N, 4), columns=FEATURE_NAMES)
    frame.insert(0, "cycle", np.tile(np.arange(N), M))
    frame.insert(0, "device", np.repeat(np.arange(M), N))
    frame.to_csv(path, index=False, float_format="%.17g")


def read_feature_csv(path):
    """Inverse of :func:`write_feature_csv` -> (N, M, 4) array."""
    import pandas as pd

    columns = ["device", "cycle", *FEATURE_NAMES]
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if list(frame.columns) != columns:
        raise ParseError(f"{path}: header must be {','.join(columns)}, got {list(frame.columns)}")
    dev = frame["device"].to_numpy()
    cyc = frame["cycle"].to_numpy()
    M = int(dev.max()) + 1
    N = int(cyc.max()) + 1
    if len(frame) != M * N or not (np.array_equal(dev, np.repeat(np.arange(M), N))
                                   and np.array_equal(cyc, np.tile(np.arange(N), M))):
        raise ParseError(f"{path}: rows must list every cycle of every device, grouped by device")
    return frame[list(FEATURE_NAMES)].to_numpy(dtype=float).reshape(M, N, 4).transpose(1, 0, 2).copy()


@dataclass(frozen=True)
class IvShape:
    """Limiting I(V) polynomials plus RESET curvature.

    Coefficients are in ascending order; ``hi_coeffs[0] == lo_coeffs[0] == 0``.
    """

    hi_coeffs: np.ndarray
    lo_coeffs: np.ndarray
    eta: float = DEFAULT_ETA
    v0: float = 0.2
    v_min: float = -1.5
    v_max: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "hi_coeffs", np.asarray(self.hi_coeffs, dtype=float))
        object.__setattr__(self, "lo_coeffs", np.asarray(self.lo_coeffs, dtype=float))
        object.__setattr__(self, "_dhi", P.polyder(self.hi_coeffs))
        object.__setattr__(self, "_dlo", P.polyder(self.lo_coeffs))

    def i_hi(self, v):
        return P.polyval(v, self.hi_coeffs)

    def i_lo(self, v):
        return P.polyval(v, self.lo_coeffs)

    def di_hi(self, v):
        return P.polyval(v, self._dhi)

    def di_lo(self, v):
        return P.polyval(v, self._dlo)

    def check(self):
        """Raise ``ValueError`` if an invariant is violated."""
        if self.hi_coeffs.shape != (6,) or self.lo_coeffs.shape != (7,):
            raise ValueError("I_H needs 6 and I_L 7 coefficients")
        if self.hi_coeffs[0] != 0.0 or self.lo_coeffs[0] != 0.0:
            raise ValueError("limiting polynomials must pass through the origin")
        if not self.i_lo(self.v0) > self.i_hi(self.v0) > 0:
            raise ValueError("need I_L(v0) > I_H(v0) > 0")
        if not self.eta > 1:
            raise ValueError("eta must exceed 1")
        v = np.arange(0.0, self.v_max + 5e-4, 1e-3)
        if np.any(self.i_lo(v) < self.i_hi(v)):
            raise ValueError("I_L must not fall below I_H on [0, v_max]")


# --------------------------------------------------------------------------
# extraction


@dataclass
class _Branches:
    """Per-trace results of the batched extractor (arrays of length K)."""

    features: np.ndarray  # (K, 4)
    status: np.ndarray  # (K,) int
    k_set: np.ndarray  # first post-SET sample
    k_peak: np.ndarray  # current maximum on the rising positive leg
    i_min: np.ndarray
    i_max: np.ndarray


def _ohmic_fit(v, i, mask):
    """Zero-intercept least squares resistance over masked samples of each row."""
    vv = np.where(mask, v, 0.0)
    num = np.einsum("ks,ks->k", vv, vv)
    den = np.einsum("ks,ks->k", vv, np.where(mask, i, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    return r, mask.sum(axis=1)


def _extract_batch(voltage, current, settings: ExtractionSettings) -> _Branches:
    current = np.atleast_2d(np.asarray(current, dtype=float))
    K, S = current.shape
    voltage = np.broadcast_to(np.asarray(voltage, dtype=float), (K, S))
    rows = np.arange(K)
    idx = np.arange(S)[None, :]

    i_min = voltage.argmin(axis=1)
    i_max = voltage.argmax(axis=1)
    neg = (voltage < 0) & (idx < i_max[:, None])

    # SET: largest single-step jump between consecutive negative-branch samples
    step = np.abs(np.diff(current, axis=1))
    pair = neg[:, 1:] & neg[:, :-1]
    jumps = np.where(pair, step, -np.inf)
    k = jumps.argmax(axis=1)
    jmax = jumps[rows, k]
    n_pairs = pair.sum(axis=1)
    with np.errstate(all="ignore"):
        med = np.nanmedian(np.where(pair, step, np.nan), axis=1)
    has_set = (n_pairs > 2) & (jmax > settings.jump_factor * med)
    k_set = k + 1
    v_set = 0.5 * (voltage[rows, k] + voltage[rows, k_set])

    hrs_mask = neg & (idx < k_set[:, None]) & (voltage >= -settings.v0)
    r_hrs, n_hrs = _ohmic_fit(voltage, current, hrs_mask)

    pos = (idx > i_min[:, None]) & (idx <= i_max[:, None]) & (voltage > 0)
    lrs_mask = pos & (voltage <= settings.v0)
    r_lrs, n_lrs = _ohmic_fit(voltage, current, lrs_mask)

    k_peak = np.where(pos, current, -np.inf).argmax(axis=1)
    v_reset = voltage[rows, k_peak]
    after = pos & (idx > k_peak[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        extrap = voltage / r_lrs[:, None]
    dropped = np.any(after & (current < settings.theta * extrap), axis=1)

    status = np.full(K, OK)
    bad_fit = (n_hrs < 2) | (n_lrs < 2) | ~(r_hrs > 0) | ~(r_lrs > 0) | ~np.isfinite(r_hrs) | ~np.isfinite(r_lrs)
    status[~dropped] = NO_RESET
    status[bad_fit] = SHORT_BRANCH
    status[~has_set] = NO_SET
    feats = np.column_stack([r_hrs, v_set, r_lrs, v_reset])
    return _Branches(feats, status, k_set, k_peak, i_min, i_max)


def extract_cycle_features(voltage, current, settings: ExtractionSettings = ExtractionSettings()) -> FeatureVector:
    """Extract ``(r_hrs, v_set, r_lrs, v_reset)`` from one full cycle.

    Raises
    ------
    NoSetDetected
        No current jump on the negative branch stands out from the median step.
    NoResetDetected
        The current never falls below ``theta`` times the LRS extrapolation.
    FeatureExtractionError
        Too few samples within ``|V| <= v0`` to fit a resistance.
    """
    voltage = np.asarray(voltage, dtype=float)
    current = np.asarray(current, dtype=float)
    if voltage.shape != current.shape or voltage.ndim != 1:
        raise ValueError("voltage and current must be 1-D arrays of equal length")
    br = _extract_batch(voltage[None], current[None], settings)
    code = br.status[0]
    if code == NO_SET:
        raise NoSetDetected("no SET jump found on the negative branch")
    if code == SHORT_BRANCH:
        raise FeatureExtractionError(f"too few samples within |V| <= {settings.v0} V for a resistance fit")
    if code == NO_RESET:
        raise NoResetDetected("current never dropped below theta * LRS extrapolation")
    return FeatureVector.from_array(br.features[0])


@dataclass
class FeatureSeries:
    """Features of a whole dataset.

    ``values[n, m]`` is the feature vector of cycle ``n`` of device ``m``;
    ``valid[n, m]`` is False where the cycle was imputed.
    """

    values: np.ndarray  # (N, M, 4)
    valid: np.ndarray  # (N, M)

    @property
    def cycles(self):
        return self.values.shape[0]

    @property
    def devices(self):
        return self.values.shape[1]

    @property
    def valid_fraction(self):
        return float(self.valid.mean())


def _impute(values, valid, window=10):
    """Replace invalid rows of one device's (N, 4) series by a local median."""
    out = values.copy()
    good = np.flatnonzero(valid)
    fallback = np.median(values[good], axis=0)
    for n in np.flatnonzero(~valid):
        near = good[(good >= n - window) & (good <= n + window)]
        out[n] = np.median(values[near], axis=0) if near.size else fallback
    return out


def _device_chunks(M, N, S, budget=4_000_000):
    step = max(1, budget // max(1, N * S))
    return [slice(a, min(M, a + step)) for a in range(0, M, step)]


def extract_dataset(ds: SweepDataset, settings: ExtractionSettings = ExtractionSettings()) -> FeatureSeries:
    """Extract every cycle of ``ds``; impute invalid cycles by a running median.

    Raises
    ------
    TooFewValidCycles
        If fewer than half of a device's cycles could be extracted.
    """
    M, N, S = ds.current.shape
    values = np.empty((N, M, 4))
    valid = np.empty((N, M), dtype=bool)
    for sl in _device_chunks(M, N, S):
        m = sl.stop - sl.start
        br = _extract_batch(ds.voltage[sl].reshape(m * N, S), ds.current[sl].reshape(m * N, S), settings)
        values[:, sl] = br.features.reshape(m, N, 4).transpose(1, 0, 2)
        valid[:, sl] = (br.status == OK).reshape(m, N).T
    for d in range(M):
        frac = valid[:, d].mean()
        if frac < 0.5:
            raise TooFewValidCycles(f"device {d}: only {frac:.1%} of cycles valid")
        if frac < 1:
            values[:, d] = _impute(values[:, d], valid[:, d])
    return FeatureSeries(values, valid)


# --------------------------------------------------------------------------
# limiting polynomials and RESET curvature


def _accumulate_normal(xtx, xty, v, y, degree, vscale):
    """Add zero-intercept polynomial normal equations of (v, y) samples."""
    u = v / vscale
    X = np.stack([u**k for k in range(1, degree + 1)], axis=1)
    xtx += X.T @ X
    xty += X.T @ y


def _solve_shape(xtx, xty, vscale, what):
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > _MAX_COND:
        raise IllConditionedFit(f"{what}: normal equations condition number {cond:.3g} exceeds {_MAX_COND:g}")
    c = np.linalg.solve(xtx, xty)
    degree = len(c)
    return np.concatenate([[0.0], c / vscale ** np.arange(1, degree + 1)])


def _fit_eta(t, y, seg, n_seg):
    """Pooled least squares for eta with per-segment (a, c) profiled out.

    Each segment follows ``y = a * t**eta + c`` with ``t = v_max - V``; ``y`` is
    already divided by the segment's peak current so segments weigh equally.
    """
    ones = np.bincount(seg, minlength=n_seg).astype(float)
    s_y = np.bincount(seg, y, n_seg)
    s_yy = np.bincount(seg, y * y, n_seg)
    logt = np.log(t)

    def sse(eta):
        u = np.exp(eta * logt)
        s_u = np.bincount(seg, u, n_seg)
        s_uu = np.bincount(seg, u * u, n_seg)
        s_uy = np.bincount(seg, u * y, n_seg)
        det = s_uu * ones - s_u * s_u
        with np.errstate(divide="ignore", invalid="ignore"):
            explained = (s_uy * (ones * s_uy - s_u * s_y) + s_y * (s_uu * s_y - s_u * s_uy)) / det
        explained = np.where(det > 1e-300, explained, 0.0)
        return float(np.sum(s_yy - explained))

    res = minimize_scalar(sse, bounds=(1.01, 10.0), method="bounded", options={"xatol": 1e-6})
    return float(res.x)


def fit_iv_shape(ds: SweepDataset, series: FeatureSeries,
                 settings: ExtractionSettings = ExtractionSettings(),
                 min_reset_samples=4, min_segments=10) -> IvShape:
    """Fit I_H (degree 5), I_L (degree 6) and the RESET exponent eta.

    The HRS and LRS branch samples of each valid cycle are normalised by the
    static conductance of their state (``v0 / R``) and pooled; a zero-intercept
    polynomial is least-squares fitted to each pool. The fitted shapes are then
    scaled so that the bounds coincide with the most extreme observed states
    (largest R_H, smallest R_L), which lets every training resistance be
    represented by a mixing state in [0, 1].
    """
    M, N, S = ds.current.shape
    v0 = settings.v0
    vscale = max(abs(ds.v_min), abs(ds.v_max))
    hi_xtx, hi_xty = np.zeros((5, 5)), np.zeros(5)
    lo_xtx, lo_xty = np.zeros((6, 6)), np.zeros(6)
    t_parts, y_parts, seg_parts = [], [], []
    n_seg = 0
    feats = series.values
    r_next = np.full((N, M), np.nan)
    r_next[:-1] = feats[1:, :, R_HRS]
    next_ok = np.zeros((N, M), dtype=bool)
    next_ok[:-1] = series.valid[1:]
    idx = np.arange(S)[None, :]

    for sl in _device_chunks(M, N, S):
        m = sl.stop - sl.start
        V = np.ascontiguousarray(ds.voltage[sl]).reshape(m * N, S)
        I = ds.current[sl].reshape(m * N, S)
        br = _extract_batch(V, I, settings)
        ok = br.status == OK
        f = br.features
        neg = (V < 0) & (idx < br.i_max[:, None])
        pos = (idx > br.i_min[:, None]) & (idx <= br.i_max[:, None]) & (V > 0)

        # HRS: pre-SET negative branch (state R_H,n) and post-RESET descent (state R_H,n+1)
        pre = neg & (idx < br.k_set[:, None]) & ok[:, None]
        rn = r_next[:, sl].T.reshape(-1)
        post = (idx >= br.i_max[:, None]) & (V > 0) & (ok & next_ok[:, sl].T.reshape(-1))[:, None]
        for mask, r in ((pre, f[:, R_HRS]), (post, rn)):
            rr = np.broadcast_to(r[:, None], V.shape)[mask]
            _accumulate_normal(hi_xtx, hi_xty, V[mask], I[mask] * rr / v0, 5, vscale)

        # LRS: post-SET negative branch and rising positive leg before RESET
        lrs = ((neg & (idx >= br.k_set[:, None])) | (pos & (idx < br.k_peak[:, None]))) & ok[:, None]
        rr = np.broadcast_to(f[:, R_LRS][:, None], V.shape)[lrs]
        _accumulate_normal(lo_xtx, lo_xty, V[lrs], I[lrs] * rr / v0, 6, vscale)

        # RESET segments: rising leg after the current maximum, up to v_max
        seg_mask = pos & (idx > br.k_peak[:, None]) & ok[:, None]
        counts = seg_mask.sum(axis=1)
        use = counts >= min_reset_samples
        seg_mask &= use[:, None]
        if use.any():
            vtop = V[np.arange(len(V)), br.i_max]
            peak_i = I[np.arange(len(V)), br.k_peak]
            t = (vtop[:, None] - V)[seg_mask]
            y = (I / peak_i[:, None])[seg_mask]
            keep = t > 0
            local = np.cumsum(use) - 1 + n_seg
            seg_ids = np.broadcast_to(local[:, None], V.shape)[seg_mask]
            t_parts.append(t[keep])
            y_parts.append(y[keep])
            seg_parts.append(seg_ids[keep])
            n_seg += int(use.sum())

    s_hi = _solve_shape(hi_xtx, hi_xty, vscale, "I_H")
    s_lo = _solve_shape(lo_xtx, lo_xty, vscale, "I_L")
    good = series.valid
    r_hi = float(feats[..., R_HRS][good].max())
    r_lo = float(feats[..., R_LRS][good].min())
    hi = s_hi * (v0 / r_hi) / P.polyval(v0, s_hi)
    lo = s_lo * (v0 / r_lo) / P.polyval(v0, s_lo)

    if n_seg >= min_segments:
        eta = _fit_eta(np.concatenate(t_parts), np.concatenate(y_parts), np.concatenate(seg_parts), n_seg)
    else:
        eta = DEFAULT_ETA
    shape = IvShape(hi, lo, eta, v0, float(ds.v_min), float(ds.v_max))
    try:
        shape.check()
    except ValueError as exc:
        raise IllConditionedFit(f"fitted limiting polynomials are inconsistent: {exc}") from exc
    return shape
