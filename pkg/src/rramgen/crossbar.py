"""DC operating point of a passive crossbar with resistive leads.

Topology: every cell ``(i, j)`` sits between word-line node ``w[i, j]`` and
bit-line node ``b[i, j]``. One lead resistor connects neighbouring nodes along
each line; word lines are driven at their west end (through one lead resistor
into ``w[i, 0]``), bit lines at their south end (into ``b[R-1, j]``).

With ``lead_r == 0`` the lines are ideal and every cell simply sees
``wl[i] - bl[j]``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .cell import CellArray, ModelParams
from .errors import NoConvergence

TOL = 1e-9
# a converged solve must also have stopped moving: the residual alone bounds the
# node error only through the smallest lead-network eigenvalue
VTOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 6
DEFAULT_LEAD_R = 5.0
READ_V = 0.2
# banded Cholesky costs about n * u^2 flops; above this sparse LU is faster
BAND_FLOPS = 1e8


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    factorizations: int = 0


@dataclass
class DcSolution:
    wl: np.ndarray  # (R, C) word-line node voltages
    bl: np.ndarray  # (R, C) bit-line node voltages
    bl_current: np.ndarray  # (C,) current into each bit-line terminal
    report: SolveReport

    @property
    def cell_voltage(self):
        return self.wl - self.bl


class _BandedCholesky:
    """Upper banded Cholesky factor with the same ``solve`` interface as SuperLU."""

    def __init__(self, ab):
        self.c = cholesky_banded(ab, lower=False, check_finite=False)

    def solve(self, rhs):
        return cho_solve_banded((self.c, False), rhs, check_finite=False)


@dataclass
class CrossbarNet:
    """An ``rows x cols`` array of cells (row-major in ``cells``).

    Unknowns are ordered cell by cell (row-major), word-line node first:
    ``x[2k] = w[k]``, ``x[2k + 1] = b[k]``. The Jacobian is then symmetric
    with half-bandwidth ``2 * cols``; small arrays are factored with a banded
    Cholesky, larger ones (or non-positive-definite Jacobians) with sparse LU.
    """

    rows: int
    cols: int
    cells: CellArray
    lead_r: float = DEFAULT_LEAD_R
    tol: float = TOL
    max_iter: int = MAX_ITER
    x: np.ndarray = None
    _lu: object = field(default=None, repr=False)
    _lin: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if self.lead_r < 0:
            raise ValueError("lead_r must be non-negative")
        if self.cells.size != self.rows * self.cols:
            raise ValueError("cell count does not match array size")
        if self.x is None:
            self.x = np.zeros(2 * self.rows * self.cols)

    @classmethod
    def from_model(cls, model: ModelParams, rows, cols, rng, lead_r=DEFAULT_LEAD_R, **kw):
        return cls(rows, cols, CellArray.from_model(model, rows * cols, rng), lead_r, **kw)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def wl(self):
        return self.x[0::2].reshape(self.shape)

    @property
    def bl(self):
        return self.x[1::2].reshape(self.shape)

    def reset_solver(self, zero=True):
        """Forget the cached factorization and, with ``zero``, the warm start."""
        self._lu = None
        if zero:
            self.x[:] = 0.0

    # ---- cell evaluation -------------------------------------------------

    def cell_current(self, v):
        return self.cells.read(np.ravel(v)).reshape(np.shape(v))

    def _cell_polys(self):
        """Per-cell current and conductance coefficients (ascending, one row per power)."""
        iv = self.cells.iv
        r = self.cells.r
        hi = np.zeros(len(iv.lo_coeffs))
        hi[: len(iv.hi_coeffs)] = iv.hi_coeffs
        lo = iv.lo_coeffs
        pc = lo[:, None] + (hi - lo)[:, None] * r[None, :]
        pd = pc[1:] * np.arange(1, len(pc))[:, None]
        return pc, pd

    @staticmethod
    def _horner(coef, v):
        out = coef[-1].copy()
        for c in coef[-2::-1]:
            out *= v
            out += c
        return out

    # ---- linear part -----------------------------------------------------

    def _linear(self):
        """Lead conductance matrix, drive node indices, band layout (cached)."""
        if self._lin is None:
            R, C = self.shape
            m = R * C
            g = 1.0 / self.lead_r
            k = np.arange(m).reshape(R, C)
            w, b = 2 * k, 2 * k + 1
            pairs = [(w[:, :-1].ravel(), w[:, 1:].ravel()), (b[:-1].ravel(), b[1:].ravel())]
            rows = np.concatenate([np.concatenate([p, q, p, q]) for p, q in pairs] + [w[:, 0], b[-1]])
            cols = np.concatenate([np.concatenate([p, q, q, p]) for p, q in pairs] + [w[:, 0], b[-1]])
            vals = np.concatenate([np.repeat([g, g, -g, -g], len(p)) for p, _ in pairs] + [np.full(R + C, g)])
            G = coo_matrix((vals, (rows, cols)), shape=(2 * m, 2 * m)).tocsr()
            u = 2 * C
            band = None
            if 2 * m * u * u <= BAND_FLOPS:
                band = np.zeros((u + 1, 2 * m))
                up = cols >= rows
                np.add.at(band, (u + rows[up] - cols[up], cols[up]), vals[up])
            self._lin = (G, g, w[:, 0].copy(), b[-1].copy(), u, band)
        return self._lin

    def residual(self, x, wl_drive, bl_drive, polys=None):
        """KCL residuals (sum of currents leaving each node) in unknown order."""
        G, g, wd, bd, _, _ = self._linear()
        pc = (polys or self._cell_polys())[0]
        i = self._horner(pc, x[0::2] - x[1::2])
        f = G @ x
        f[0::2] += i
        f[1::2] -= i
        f[wd] -= g * wl_drive
        f[bd] -= g * bl_drive
        return f

    def jacobian(self, x, polys=None):
        """Sparse Jacobian of :meth:`residual`."""
        G = self._linear()[0]
        d = self._horner((polys or self._cell_polys())[1], x[0::2] - x[1::2])
        m = len(d)
        w, b = 2 * np.arange(m), 2 * np.arange(m) + 1
        cell = coo_matrix((np.concatenate([d, d, -d, -d]),
                           (np.concatenate([w, b, w, b]), np.concatenate([w, b, b, w]))), shape=G.shape)
        return (G + cell).tocsc()

    def _factor(self, x, polys):
        _, _, _, _, u, band = self._linear()
        d = self._horner(polys[1], x[0::2] - x[1::2])
        spd = bool(np.all(d >= 0))
        if band is not None and spd:
            ab = band.copy()
            ab[u, 0::2] += d
            ab[u, 1::2] += d
            ab[u - 1, 1::2] -= d
            try:
                return _BandedCholesky(ab)
            except np.linalg.LinAlgError:
                pass
        if spd:
            # symmetric positive definite: diagonal pivots are safe
            return splu(self.jacobian(x, polys), permc_spec="MMD_AT_PLUS_A",
                        diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        return splu(self.jacobian(x, polys), permc_spec="MMD_AT_PLUS_A")

    # ---- Newton ------------------------------------------------------------

    def _newton(self, wl_drive, bl_drive):
        polys = self._cell_polys()
        x = self.x.copy()
        f = self.residual(x, wl_drive, bl_drive, polys)
        res = float(np.max(np.abs(f)))
        best = (res, x)
        factorizations = 0
        fresh = False
        last_dx = 0.0
        for it in range(self.max_iter + 1):
            if res < self.tol and last_dx < VTOL:
                self.x = x
                return SolveReport(it, res, True, factorizations)
            if it == self.max_iter:
                break
            if self._lu is None:
                self._lu = self._factor(x, polys)
                factorizations += 1
                fresh = True
            dx = self._lu.solve(-f)
            step = 1.0
            for _ in range(MAX_HALVINGS + 1):
                xn = x + step * dx
                fn = self.residual(xn, wl_drive, bl_drive, polys)
                rn = float(np.max(np.abs(fn)))
                if rn < res:
                    break
                step *= 0.5
            else:
                if not fresh:
                    # stale Jacobian: refactor at the current point and retry
                    self._lu = None
                    continue
            if rn > 0.25 * res:
                # slow contraction: refresh the Jacobian next iteration
                self._lu = None
            fresh = False
            last_dx = step * float(np.max(np.abs(dx)))
            x, f, res = xn, fn, rn
            if res < best[0]:
                best = (res, x)
        report = SolveReport(self.max_iter, best[0], False, factorizations)
        raise NoConvergence(f"no DC convergence after {self.max_iter} iterations "
                            f"(best residual {best[0]:.3e} A)", report)

    def solve_dc(self, wl_drive, bl_drive) -> DcSolution:
        """Solve the operating point for word-line and bit-line terminal voltages.

        Starts from the previous solution. Cells keep their state during the
        solve.

        Raises
        ------
        NoConvergence
            Residual above tolerance after ``max_iter`` Newton iterations.
        """
        wl_drive = np.asarray(wl_drive, dtype=float)
        bl_drive = np.asarray(bl_drive, dtype=float)
        if wl_drive.shape != (self.rows,) or bl_drive.shape != (self.cols,):
            raise ValueError("drive vectors must have one entry per word line / bit line")
        if not (np.all(np.isfinite(wl_drive)) and np.all(np.isfinite(bl_drive))):
            raise ValueError("drives must be finite")
        if self.lead_r == 0:
            wl = np.broadcast_to(wl_drive[:, None], self.shape).copy()
            bl = np.broadcast_to(bl_drive[None, :], self.shape).copy()
            cur = self.cell_current(wl - bl)
            return DcSolution(wl, bl, cur.sum(axis=0), SolveReport(0, 0.0, True))
        report = self._newton(wl_drive, bl_drive)
        wl, bl = self.wl.copy(), self.bl.copy()
        return DcSolution(wl, bl, (bl[-1] - bl_drive) / self.lead_r, report)

    def injected_power(self, sol: DcSolution, wl_drive, bl_drive):
        """Power delivered by all terminal sources."""
        if self.lead_r == 0:
            i_cell = self.cell_current(sol.cell_voltage)
            return float(np.sum(wl_drive * i_cell.sum(axis=1)) - np.sum(bl_drive * i_cell.sum(axis=0)))
        g = 1.0 / self.lead_r
        i_wl = g * (np.asarray(wl_drive) - sol.wl[:, 0])
        i_bl = g * (np.asarray(bl_drive) - sol.bl[-1])
        return float(np.dot(wl_drive, i_wl) + np.dot(bl_drive, i_bl))


@dataclass
class ReadResult:
    bl_current: np.ndarray  # (C,)
    cell_current: np.ndarray | None  # (R, C), only for ideal lines
    report: SolveReport


def read_all(net: CrossbarNet, v_read=READ_V) -> ReadResult:
    """Drive all word lines at ``v_read`` with grounded bit lines; cells are not updated."""
    sol = net.solve_dc(np.full(net.rows, v_read), np.zeros(net.cols))
    cells = net.cell_current(sol.cell_voltage) if net.lead_r == 0 else None
    return ReadResult(sol.bl_current, cells, sol.report)


def read_cells(net: CrossbarNet, v_read=READ_V):
    """Per-cell read currents: ideal array reads all cells at once; with leads
    each row is read separately (selected WL at ``v_read``, the rest grounded).
    """
    if net.lead_r == 0:
        return read_all(net, v_read).cell_current
    out = np.empty(net.shape)
    wl = np.zeros(net.rows)
    for i in range(net.rows):
        wl[:] = 0.0
        wl[i] = v_read
        out[i] = net.solve_dc(wl, np.zeros(net.cols)).bl_current
    return out


def half_select_drives(net: CrossbarNet, i, j, v_w):
    wl = np.full(net.rows, 0.5 * v_w)
    bl = np.full(net.cols, 0.5 * v_w)
    wl[i] = v_w
    bl[j] = 0.0
    return wl, bl


def write_cell(net: CrossbarNet, i, j, v_w) -> SolveReport:
    """Half-select write of cell ``(i, j)`` at amplitude ``v_w``.

    Every cell then receives its solved terminal voltage as one
    :meth:`~rramgen.cell.CellArray.apply` event. With ideal lines only row
    ``i`` and column ``j`` see a non-zero voltage, so only they are updated.
    """
    if not 0 < v_w <= net.cells.iv.v_max:
        raise ValueError(f"write amplitude must lie in (0, {net.cells.iv.v_max}]")
    wl, bl = half_select_drives(net, i, j, v_w)
    if net.lead_r == 0:
        R, C = net.shape
        idx = np.concatenate([i * C + np.arange(C), np.delete(np.arange(R), i) * C + j])
        v = np.full(len(idx), 0.5 * v_w)
        v[j] = v_w
        net.cells.apply(v, idx)
        return SolveReport(0, 0.0, True)
    sol = net.solve_dc(wl, bl)
    net.cells.apply(sol.cell_voltage.ravel())
    return sol.report


def set_all(net: CrossbarNet):
    """Put every cell into its LRS by one SET pulse at ``v_min`` (cells addressed individually)."""
    net.cells.apply(net.cells.iv.v_min)


@dataclass
class WriteReport:
    cells: int
    seconds: float
    ops: float
    iterations: int
    factorizations: int
    max_residual: float
    converged: bool


def write_image(net: CrossbarNet, targets, v_lo, v_hi) -> WriteReport:
    """Write ``targets`` in [0, 1] by partial RESET, one half-select write per cell.

    Cell ``(i, j)`` gets amplitude ``v_lo + t * (v_hi - v_lo)``. Cells must be
    in their LRS already (see :func:`set_all`) and ``v_lo`` must exceed every
    cell's RESET onset.
    """
    t = np.asarray(targets, dtype=float)
    if t.shape != net.shape or np.any((t < 0) | (t > 1)):
        raise ValueError("targets must be an array of the crossbar shape with values in [0, 1]")
    if not v_lo > float(net.cells.cur[:, 3].max()):
        raise ValueError("v_lo must exceed the RESET onset of every cell")
    if not v_lo <= v_hi <= net.cells.iv.v_max:
        raise ValueError("need v_lo <= v_hi <= v_max")
    amp = v_lo + t * (v_hi - v_lo)
    iters = facts = 0
    worst = 0.0
    start = time.perf_counter()
    for i in range(net.rows):
        for j in range(net.cols):
            rep = write_cell(net, i, j, amp[i, j])
            iters += rep.iterations
            facts += rep.factorizations
            worst = max(worst, rep.residual)
    seconds = time.perf_counter() - start
    n = net.rows * net.cols
    return WriteReport(n, seconds, n / seconds, iters, facts, worst, True)


def image_voltages(net: CrossbarNet, margin=0.02, disturb_ratio=1.98):
    """Default ``(v_lo, v_hi)`` for :func:`write_image`.

    ``v_lo`` sits just above the largest RESET onset. ``v_hi`` stays below
    twice ``v_lo`` so that a half-selected cell (seeing ``v_hi / 2``) never
    crosses its own onset.
    """
    v_lo = float(net.cells.cur[:, 3].max()) + margin
    v_max = net.cells.iv.v_max
    if v_lo > v_max:
        raise ValueError("RESET onsets leave no write window below v_max")
    return v_lo, max(v_lo, min(v_max, disturb_ratio * v_lo))


def read_image(net: CrossbarNet, v_read=READ_V):
    """Read every cell and map currents to [0, 1], high current -> 0 (least RESET)."""
    cur = read_cells(net, v_read)
    lo, hi = cur.min(), cur.max()
    if hi == lo:
        return np.zeros(net.shape)
    return (hi - cur) / (hi - lo)
