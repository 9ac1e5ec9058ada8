"""Virtual ReRAM cells: sampled device statistics, a VAR feature stream and a
quasi-static I(V) state machine.

The current of a cell is a mix of the two limiting curves,
``I = r * I_H(V) + (1 - r) * I_L(V)`` with ``r in [0, 1]``. SET is an
instantaneous jump to the LRS of the current cycle once ``V <= V_S``; RESET
moves ``r`` gradually towards the next cycle's HRS for ``V > V_R`` so that the
current follows ``a * (v_max - V)**eta + c``.

Two interfaces share the same rules: module functions acting on a single
:class:`CellState` and the vectorized :class:`CellArray` for many cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .d2d_gmm import GmmParams, sample_device, sample_population
from .features import R_HRS, R_LRS, V_RESET, V_SET, FeatureVector, IvShape
from .transforms import GammaPolys, gamma_inverse
from .var_process import VarParams, VarState, burn_in, burn_in_batch, step_batch, var_step

HRS, LRS, RESETTING = 0, 1, 2
R_FLOOR = 100.0
V_MARGIN = 1e-6


@dataclass(frozen=True)
class ModelParams:
    """Everything needed to generate cells."""

    var: VarParams
    gammas: GammaPolys
    gmm: GmmParams
    iv: IvShape

    def check(self):
        self.var.check()
        self.gammas.check()
        self.gmm.check()
        self.iv.check()
        if self.var.dim != 4 or self.gmm.dim != 8 or self.gammas.coeffs.shape[0] != 4:
            raise ValueError("model dimensions must be 4 features / 8 device statistics")


# --------------------------------------------------------------------------
# pure helpers, all vectorized


def r_of_R(R, iv: IvShape):
    """Mixing state whose static resistance at ``iv.v0`` equals ``R``, clamped to [0, 1]."""
    il, ih = iv.i_lo(iv.v0), iv.i_hi(iv.v0)
    return np.clip((il - iv.v0 / np.asarray(R, dtype=float)) / (il - ih), 0.0, 1.0)


def mixed_current(r, v, iv: IvShape):
    return r * iv.i_hi(v) + (1.0 - r) * iv.i_lo(v)


def mixed_conductance(r, v, iv: IvShape):
    """dI/dV of the mixed curve."""
    return r * iv.di_hi(v) + (1.0 - r) * iv.di_lo(v)


def reset_current(v, v_r, r_lrs, r_hrs_next, iv: IvShape):
    """RESET branch ``a * (v_max - V)**eta + c`` between ``v_r`` and ``v_max``.

    ``r_lrs`` and ``r_hrs_next`` are the mixing states of this cycle's LRS and
    the next cycle's HRS; the branch meets the LRS curve at ``v_r`` and the
    next HRS curve at ``v_max``.
    """
    vmax, eta = iv.v_max, iv.eta
    c = mixed_current(r_hrs_next, vmax, iv)
    a = (mixed_current(r_lrs, v_r, iv) - c) / (vmax - v_r) ** eta
    return a * np.maximum(vmax - np.minimum(v, vmax), 0.0) ** eta + c


def reset_state(v, v_r, r_lrs, r_hrs_next, iv: IvShape):
    """Mixing state whose static current at ``v`` equals the RESET branch."""
    target = reset_current(v, v_r, r_lrs, r_hrs_next, iv)
    il, ih = iv.i_lo(v), iv.i_hi(v)
    return np.clip((il - target) / (il - ih), 0.0, 1.0)


def denormalize(standardized, stats, iv: IvShape):
    """Scale standardized features by device ``(mu, sigma)`` and clamp to physical ranges."""
    x = standardized * stats[..., 4:] + stats[..., :4]
    x[..., R_HRS] = np.maximum(x[..., R_HRS], R_FLOOR)
    x[..., R_LRS] = np.maximum(x[..., R_LRS], R_FLOOR)
    x[..., V_SET] = np.clip(x[..., V_SET], iv.v_min, -V_MARGIN)
    x[..., V_RESET] = np.clip(x[..., V_RESET], V_MARGIN, iv.v_max - V_MARGIN)
    return x


# --------------------------------------------------------------------------
# single cell


@dataclass
class CellState:
    var_state: VarState
    device_stats: np.ndarray
    current_cycle: FeatureVector
    r: float
    rng: np.random.Generator
    phase: int = HRS
    v_peak: float = -np.inf
    next_cycle: FeatureVector | None = None
    cycle: int = 0


def new_cell(model: ModelParams, rng) -> CellState:
    """Sample device statistics, burn in the VAR and draw the first cycle."""
    stats = sample_device(model.gmm, rng)
    state = burn_in(model.var, rng)
    cell = CellState(state, stats, None, 0.0, rng)
    cell.current_cycle = draw_cycle(cell, model)
    cell.r = float(r_of_R(cell.current_cycle.r_hrs, model.iv))
    return cell


def draw_cycle(cell: CellState, model: ModelParams) -> FeatureVector:
    """Advance the cell's VAR by one step and return the de-normalized features."""
    z = var_step(cell.var_state, model.var, cell.rng.standard_normal(model.var.dim))
    x = denormalize(gamma_inverse(model.gammas, z), cell.device_stats, model.iv)
    return FeatureVector.from_array(x)


def static_current(cell: CellState, v, iv: IvShape):
    return mixed_current(cell.r, v, iv)


def apply_voltage(cell: CellState, model: ModelParams, v) -> float:
    """Apply ``v`` volts, update the switching state and return the current."""
    iv = model.iv
    v = float(v)
    if cell.phase == RESETTING and v <= cell.next_cycle.v_set:
        cell.current_cycle, cell.next_cycle = cell.next_cycle, None
        cell.v_peak = -np.inf
        cell.phase = HRS
        cell.cycle += 1
    cur = cell.current_cycle
    if cell.phase == HRS and v <= cur.v_set:
        cell.r = float(r_of_R(cur.r_lrs, iv))
        cell.phase = LRS
    elif cell.phase != HRS and v > cur.v_reset and v > cell.v_peak:
        if cell.next_cycle is None:
            cell.next_cycle = draw_cycle(cell, model)
        r_new = reset_state(v, cur.v_reset, r_of_R(cur.r_lrs, iv), r_of_R(cell.next_cycle.r_hrs, iv), iv)
        cell.r = max(cell.r, float(r_new))
        cell.v_peak = v
        cell.phase = RESETTING
    return float(mixed_current(cell.r, v, iv))


# --------------------------------------------------------------------------
# many cells


@dataclass
class CellArray:
    """Struct-of-arrays storage for ``m`` cells sharing one model and RNG.

    ``hist`` holds each cell's VAR lags (most recent first) and may be
    ``None`` for replay arrays whose cycles are all supplied up front.
    """

    iv: IvShape
    cur: np.ndarray  # (m, 4)
    nxt: np.ndarray  # (m, 4)
    has_nxt: np.ndarray  # (m,) bool
    r: np.ndarray  # (m,)
    phase: np.ndarray  # (m,) int8
    v_peak: np.ndarray  # (m,)
    stats: np.ndarray | None = None  # (m, 8)
    hist: np.ndarray | None = None  # (m, p, 4)
    model: ModelParams | None = field(default=None, repr=False)
    rng: np.random.Generator | None = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.r)

    @classmethod
    def from_model(cls, model: ModelParams, m, rng, stratified=True):
        """Create ``m`` fresh cells in their first-cycle HRS.

        With ``stratified=False`` and ``m == 1`` the random stream is consumed
        exactly as by :func:`new_cell`.
        """
        if stratified:
            stats = sample_population(model.gmm, m, rng, stratified=True)
        elif m == 1:
            stats = sample_device(model.gmm, rng)[None]
        else:
            stats = sample_population(model.gmm, m, rng, stratified=False)
        hist = burn_in_batch(model.var, rng, m)
        arr = cls(model.iv, np.empty((m, 4)), np.zeros((m, 4)), np.zeros(m, dtype=bool), np.empty(m),
                  np.full(m, HRS, dtype=np.int8), np.full(m, -np.inf), stats, hist, model, rng)
        arr.cur[:] = arr._draw(np.arange(m))
        arr.r[:] = r_of_R(arr.cur[:, R_HRS], model.iv)
        return arr

    @classmethod
    def replay(cls, iv: IvShape, cycles, next_cycles, r0=None):
        """Cells that play back given feature vectors (one cycle each, plus the next HRS)."""
        cur = np.array(cycles, dtype=float)
        m = len(cur)
        r = r_of_R(cur[:, R_HRS], iv) if r0 is None else np.array(r0, dtype=float)
        return cls(iv, cur, np.array(next_cycles, dtype=float), np.ones(m, dtype=bool), r,
                   np.full(m, HRS, dtype=np.int8), np.full(m, -np.inf))

    def _draw(self, idx):
        if self.hist is None:
            raise RuntimeError("replay cells cannot draw new cycles")
        model = self.model
        h = self.hist[idx]
        z = step_batch(h, model.var, self.rng.standard_normal((len(idx), model.var.dim)))
        self.hist[idx] = h
        return denormalize(gamma_inverse(model.gammas, z), self.stats[idx], self.iv)

    _STATE = ("cur", "nxt", "has_nxt", "r", "phase", "v_peak", "stats", "hist")

    def take(self, idx):
        """Independent copy of the cells at ``idx`` (sharing model and RNG)."""
        parts = {k: (None if getattr(self, k) is None else getattr(self, k)[idx]) for k in self._STATE}
        return CellArray(self.iv, model=self.model, rng=self.rng, **parts)

    def put(self, idx, sub):
        """Write the state of ``sub`` (from :meth:`take`) back to ``idx``."""
        for k in self._STATE:
            if getattr(self, k) is not None:
                getattr(self, k)[idx] = getattr(sub, k)

    def apply(self, v, idx=None):
        """Apply voltages ``v`` (scalar or per cell) and return the currents.

        With ``idx`` only those cells are driven; ``v`` then matches ``idx``.
        """
        if idx is not None:
            sub = self.take(idx)
            out = sub.apply(v)
            self.put(idx, sub)
            return out
        v = np.broadcast_to(np.asarray(v, dtype=float), self.r.shape)
        adv = (self.phase == RESETTING) & (v <= self.nxt[:, V_SET])
        if adv.any():
            self.cur[adv] = self.nxt[adv]
            self.has_nxt[adv] = False
            self.v_peak[adv] = -np.inf
            self.phase[adv] = HRS
        hrs = self.phase == HRS
        fire = hrs & (v <= self.cur[:, V_SET])
        if fire.any():
            self.r[fire] = r_of_R(self.cur[fire, R_LRS], self.iv)
            self.phase[fire] = LRS
        rst = ~hrs & (v > self.cur[:, V_RESET]) & (v > self.v_peak)
        if rst.any():
            idx = np.flatnonzero(rst)
            need = idx[~self.has_nxt[idx]]
            if need.size:
                self.nxt[need] = self._draw(need)
                self.has_nxt[need] = True
            vi, cur = v[idx], self.cur[idx]
            r_new = reset_state(vi, cur[:, V_RESET], r_of_R(cur[:, R_LRS], self.iv),
                                r_of_R(self.nxt[idx, R_HRS], self.iv), self.iv)
            self.r[idx] = np.maximum(self.r[idx], r_new)
            self.v_peak[idx] = vi
            self.phase[idx] = RESETTING
        return mixed_current(self.r, v, self.iv)

    def read(self, v):
        """Static currents at ``v`` without any state update."""
        return mixed_current(self.r, v, self.iv)

    def conductance(self, v):
        return mixed_conductance(self.r, v, self.iv)

    def snapshot(self):
        """Copy of the mutable switching state, for comparisons in tests."""
        return (self.r.copy(), self.phase.copy(), self.v_peak.copy(), self.cur.copy())
