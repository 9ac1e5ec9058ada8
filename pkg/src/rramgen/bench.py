"""Read and write throughput measurements.

OPS is the number of devices involved in an operation divided by its wall
time. Independent mode drives a :class:`~rramgen.cell.CellArray` directly;
crossbar mode solves the array network for every operation. Each benchmark
runs one untimed warm-up operation first so that one-off costs (page faults,
library initialization) do not enter the measurement.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .cell import CellArray, ModelParams
from .crossbar import DEFAULT_LEAD_R, READ_V, CrossbarNet, image_voltages, read_all, set_all, write_image


@dataclass
class BenchResult:
    mode: str
    operation: str
    devices: int
    shape: list | None
    lead_r: float | None
    repeat: int
    seconds: float  # total wall time of the timed operations
    ops: float
    setup_seconds: float
    seed: int

    def to_dict(self):
        return asdict(self)


def parse_size(text):
    """``"1048576"`` -> (1048576,), ``"64x32"`` -> (64, 32)."""
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"bad size {text!r}; use M or RxC") from None
    if len(dims) not in (1, 2) or min(dims) < 1:
        raise ValueError(f"bad size {text!r}; use M or RxC")
    return dims


def independent_read(model: ModelParams, m, repeat=5, seed=0, v_read=READ_V):
    t0 = time.perf_counter()
    cells = CellArray.from_model(model, m, np.random.default_rng(seed))
    setup = time.perf_counter() - t0
    cells.read(v_read)
    t0 = time.perf_counter()
    for _ in range(repeat):
        cells.read(v_read)
    sec = time.perf_counter() - t0
    return BenchResult("independent", "read", m, None, None, repeat, sec, m * repeat / sec, setup, seed)


def independent_write(model: ModelParams, m, repeat=5, seed=0):
    """Alternate full SET (``v_min``) and RESET (``v_max``) pulses; each pulse writes every cell."""
    t0 = time.perf_counter()
    cells = CellArray.from_model(model, m, np.random.default_rng(seed))
    setup = time.perf_counter() - t0
    pulses = (model.iv.v_min, model.iv.v_max)
    cells.take(np.arange(min(m, 1024))).apply(pulses[0])
    t0 = time.perf_counter()
    for k in range(repeat):
        cells.apply(pulses[k % 2])
    sec = time.perf_counter() - t0
    return BenchResult("independent", "write", m, None, None, repeat, sec, m * repeat / sec, setup, seed)


def crossbar_read(model: ModelParams, rows, cols, lead_r=DEFAULT_LEAD_R, repeat=5, seed=0, v_read=READ_V):
    """Full-array reads (all word lines at ``v_read``), each from a cold solver."""
    t0 = time.perf_counter()
    net = CrossbarNet.from_model(model, rows, cols, np.random.default_rng(seed), lead_r=lead_r)
    setup = time.perf_counter() - t0
    read_all(net, v_read)
    sec = 0.0
    for _ in range(repeat):
        net.reset_solver()
        t0 = time.perf_counter()
        read_all(net, v_read)
        sec += time.perf_counter() - t0
    n = rows * cols
    return BenchResult("crossbar", "read", n, [rows, cols], lead_r, repeat, sec, n * repeat / sec, setup, seed)


def crossbar_write(model: ModelParams, rows, cols, lead_r=DEFAULT_LEAD_R, repeat=1, seed=0):
    """Write a random image cell by cell after a global SET; ``repeat`` images."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    net = CrossbarNet.from_model(model, rows, cols, rng, lead_r=lead_r)
    setup = time.perf_counter() - t0
    read_all(net)
    sec = 0.0
    for _ in range(repeat):
        set_all(net)
        net.reset_solver()
        v_lo, v_hi = image_voltages(net)
        rep = write_image(net, rng.random((rows, cols)), v_lo, v_hi)
        sec += rep.seconds
    n = rows * cols
    return BenchResult("crossbar", "write", n, [rows, cols], lead_r, repeat, sec, n * repeat / sec, setup, seed)
