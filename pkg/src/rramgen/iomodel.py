"""Model files (JSON) and Verilog-A parameter emission.

Model file layout (``schema_version`` 1)::

    {
      "schema": "rramgen-model",
      "schema_version": 1,
      "metadata": {"seed": int | null, "dataset_sha256": str | null, "note": str | null},
      "var":    {"p", "dim", "A" (d x d), "B" (p x d x d), "C" (d x d)},
      "gammas": {"coeffs" (4 x 5), "z_lo" (4), "z_hi" (4)},
      "gmm":    {"k", "weights" (k), "means" (k x 8), "covs" (k x 8 x 8),
                 "center" (8), "scale" (8), "sigma_floor" (4)},
      "iv":     {"hi_coeffs" (6), "lo_coeffs" (7), "eta", "v0", "v_min", "v_max"}
    }

Floats are written with Python's shortest round-trip representation, so a
load reproduces every value bit for bit. Unknown and missing fields are
rejected with :class:`~rramgen.errors.SchemaMismatch`.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import ModelParams
from .d2d_gmm import GmmParams
from .errors import ParseError, SchemaMismatch
from .features import IvShape
from .transforms import GammaPolys
from .var_process import VarParams

SCHEMA = "rramgen-model"
SCHEMA_VERSION = 1


@dataclass
class ModelFile:
    model: ModelParams
    metadata: dict = field(default_factory=dict)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# encoding


def _list(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(m: ModelParams, metadata=None):
    meta = {"seed": None, "dataset_sha256": None, "note": None}
    meta.update(metadata or {})
    return {
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "metadata": meta,
        "var": {"p": m.var.p, "dim": m.var.dim, "A": _list(m.var.A), "B": _list(m.var.B), "C": _list(m.var.C)},
        "gammas": {"coeffs": _list(m.gammas.coeffs), "z_lo": _list(m.gammas.z_lo), "z_hi": _list(m.gammas.z_hi)},
        "gmm": {
            "k": m.gmm.k, "weights": _list(m.gmm.weights), "means": _list(m.gmm.means),
            "covs": _list(m.gmm.covs), "center": _list(m.gmm.center), "scale": _list(m.gmm.scale),
            "sigma_floor": _list(m.gmm.sigma_floor),
        },
        "iv": {
            "hi_coeffs": _list(m.iv.hi_coeffs), "lo_coeffs": _list(m.iv.lo_coeffs), "eta": float(m.iv.eta),
            "v0": float(m.iv.v0), "v_min": float(m.iv.v_min), "v_max": float(m.iv.v_max),
        },
    }


def _dump(obj, indent=0):
    """Objects one key per line, arrays and scalars compact on that line."""
    if not isinstance(obj, dict):
        return json.dumps(obj, allow_nan=False)
    pad = " " * (indent + 2)
    items = [f"{pad}{json.dumps(k)}: {_dump(v, indent + 2)}" for k, v in obj.items()]
    return "{\n" + ",\n".join(items) + "\n" + " " * indent + "}"


def dumps_model(m: ModelParams, metadata=None) -> str:
    """Canonical text of a model file: saving a loaded file reproduces it byte for byte."""
    return _dump(model_to_dict(m, metadata)) + "\n"


def save_model(m: ModelParams, path, metadata=None):
    Path(path).write_text(dumps_model(m, metadata))


# --------------------------------------------------------------------------
# decoding

_META_KEYS = {"seed", "dataset_sha256", "note"}


def _fields(obj, where, required, optional=()):
    if not isinstance(obj, dict):
        raise SchemaMismatch(f"{where or 'document'}: expected an object")
    for key in obj:
        if key not in required and key not in optional:
            raise SchemaMismatch(f"unknown field {where + '.' if where else ''}{key}")
    for key in required:
        if key not in obj:
            raise SchemaMismatch(f"missing field {where + '.' if where else ''}{key}")


def _array(obj, where, shape):
    try:
        a = np.array(obj, dtype=float)
    except (TypeError, ValueError):
        raise SchemaMismatch(f"{where}: expected numbers") from None
    if a.shape != tuple(shape):
        raise SchemaMismatch(f"{where}: expected shape {tuple(shape)}, got {a.shape}")
    return a


def _int(obj, where):
    if not isinstance(obj, int) or isinstance(obj, bool) or obj < 1:
        raise SchemaMismatch(f"{where}: expected a positive integer")
    return obj


def _real(obj, where):
    if not isinstance(obj, (int, float)) or isinstance(obj, bool):
        raise SchemaMismatch(f"{where}: expected a number")
    return float(obj)


def model_from_dict(doc) -> ModelFile:
    _fields(doc, "", ("schema", "schema_version", "metadata", "var", "gammas", "gmm", "iv"))
    if doc["schema"] != SCHEMA:
        raise SchemaMismatch(f"schema: expected {SCHEMA!r}, got {doc['schema']!r}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema_version: unsupported version {doc['schema_version']!r}")
    meta = doc["metadata"]
    _fields(meta, "metadata", (), _META_KEYS)

    v = doc["var"]
    _fields(v, "var", ("p", "dim", "A", "B", "C"))
    p, d = _int(v["p"], "var.p"), _int(v["dim"], "var.dim")
    var = VarParams(_array(v["A"], "var.A", (d, d)), _array(v["B"], "var.B", (p, d, d)),
                    _array(v["C"], "var.C", (d, d)))

    g = doc["gammas"]
    _fields(g, "gammas", ("coeffs", "z_lo", "z_hi"))
    coeffs = np.array(g["coeffs"], dtype=float) if isinstance(g["coeffs"], list) else None
    if coeffs is None or coeffs.ndim != 2 or coeffs.shape[0] != d:
        raise SchemaMismatch(f"gammas.coeffs: expected {d} coefficient rows")
    gam = GammaPolys(coeffs, _array(g["z_lo"], "gammas.z_lo", (d,)), _array(g["z_hi"], "gammas.z_hi", (d,)))

    m = doc["gmm"]
    _fields(m, "gmm", ("k", "weights", "means", "covs", "center", "scale", "sigma_floor"))
    k = _int(m["k"], "gmm.k")
    D = 2 * d
    gmm = GmmParams(
        _array(m["weights"], "gmm.weights", (k,)), _array(m["means"], "gmm.means", (k, D)),
        _array(m["covs"], "gmm.covs", (k, D, D)), _array(m["center"], "gmm.center", (D,)),
        _array(m["scale"], "gmm.scale", (D,)), _array(m["sigma_floor"], "gmm.sigma_floor", (d,)),
    )

    s = doc["iv"]
    _fields(s, "iv", ("hi_coeffs", "lo_coeffs", "eta", "v0", "v_min", "v_max"))
    iv = IvShape(_array(s["hi_coeffs"], "iv.hi_coeffs", (6,)), _array(s["lo_coeffs"], "iv.lo_coeffs", (7,)),
                 _real(s["eta"], "iv.eta"), _real(s["v0"], "iv.v0"), _real(s["v_min"], "iv.v_min"),
                 _real(s["v_max"], "iv.v_max"))
    return ModelFile(ModelParams(var, gam, gmm, iv), dict(meta))


def loads_model(text, source="<string>") -> ModelFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(doc)


def read_model_file(path) -> ModelFile:
    return loads_model(Path(path).read_text(), str(path))


def load_model(path) -> ModelParams:
    """Load a model file.

    Raises
    ------
    ParseError
        Malformed JSON (the message carries line and column).
    SchemaMismatch
        Missing, unknown or mis-shaped fields (the message names the field).
    """
    return read_model_file(path).model


# --------------------------------------------------------------------------
# Verilog-A


def _fmt(x):
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("non-finite parameter cannot be emitted")
    return repr(x)


def _array_param(name, values, per_line=8):
    flat = [_fmt(x) for x in np.ravel(values)]
    lines = [", ".join(flat[i:i + per_line]) for i in range(0, len(flat), per_line)]
    body = ",\n        ".join(lines)
    return f"    parameter real {name}[0:{len(flat) - 1}] = '{{\n        {body}\n    }};"


def _scalar_param(name, value):
    return f"    parameter real {name} = {_fmt(value)};"


_HDL_BODY = """
    // cell state
    real hist[0:{nhist}];     // VAR lags, lag 1 first
    real stats[0:7];          // sampled device means and standard deviations
    real cur[0:3];            // this cycle: R_H, V_S, R_L, V_R
    real nxt[0:3];            // next cycle, drawn at RESET onset
    real z[0:3], y[0:3], e[0:8], u[0:7];
    real r, v, vpk, ih, il, tgt, a, c, rl, rh, acc, pw, zz;
    integer phase, has_nxt, i, j, l, comp, s;

    analog function real poly_h;
        input x; real x;
        poly_h = ((((I_H[5] * x + I_H[4]) * x + I_H[3]) * x + I_H[2]) * x + I_H[1]) * x + I_H[0];
    endfunction

    analog function real poly_l;
        input x; real x;
        poly_l = (((((I_L[6] * x + I_L[5]) * x + I_L[4]) * x + I_L[3]) * x + I_L[2]) * x + I_L[1]) * x + I_L[0];
    endfunction

    analog begin
        @(initial_step) begin
            s = seed;
            // device statistics from the mixture
            acc = $rdist_uniform(s, 0.0, 1.0);
            comp = 0;
            pw = gmm_w[0];
            for (l = 1; l < K; l = l + 1) begin
                if (acc > pw) comp = l;
                pw = pw + gmm_w[l];
            end
            for (i = 0; i < 8; i = i + 1) e[i] = $rdist_normal(s, 0.0, 1.0);
            for (i = 0; i < 8; i = i + 1) begin
                u[i] = gmm_mean[8 * comp + i];
                for (j = 0; j <= i; j = j + 1) u[i] = u[i] + gmm_chol[64 * comp + 8 * i + j] * e[j];
                stats[i] = gmm_center[i] + gmm_scale[i] * u[i];
            end
            for (i = 0; i < 4; i = i + 1) stats[4 + i] = max(stats[4 + i], sigma_floor[i]);
            for (i = 0; i <= {nhist}; i = i + 1) hist[i] = 0.0;
            for (l = 0; l < {burn}; l = l + 1) begin
                `VAR_STEP
            end
            `VAR_STEP
            `DENORM(cur)
            has_nxt = 0;
            phase = 0;
            vpk = -1e9;
            r = (poly_l(V0) - V0 / cur[0]) / (poly_l(V0) - poly_h(V0));
            r = min(max(r, 0.0), 1.0);
        end

        v = V(p, n);
        if (phase == 2 && v <= nxt[1]) begin
            for (i = 0; i < 4; i = i + 1) cur[i] = nxt[i];
            has_nxt = 0;
            vpk = -1e9;
            phase = 0;
        end
        if (phase == 0 && v <= cur[1]) begin
            r = min(max((poly_l(V0) - V0 / cur[2]) / (poly_l(V0) - poly_h(V0)), 0.0), 1.0);
            phase = 1;
        end else if (phase != 0 && v > cur[3] && v > vpk) begin
            if (has_nxt == 0) begin
                `VAR_STEP
                `DENORM(nxt)
                has_nxt = 1;
            end
            rl = min(max((poly_l(V0) - V0 / cur[2]) / (poly_l(V0) - poly_h(V0)), 0.0), 1.0);
            rh = min(max((poly_l(V0) - V0 / nxt[0]) / (poly_l(V0) - poly_h(V0)), 0.0), 1.0);
            c = rh * poly_h(v_max) + (1.0 - rh) * poly_l(v_max);
            a = (rl * poly_h(cur[3]) + (1.0 - rl) * poly_l(cur[3]) - c) / pow(v_max - cur[3], eta);
            tgt = a * pow(max(v_max - min(v, v_max), 0.0), eta) + c;
            ih = poly_h(v);
            il = poly_l(v);
            r = max(r, min(max((il - tgt) / (il - ih), 0.0), 1.0));
            vpk = v;
            phase = 2;
        end
        I(p, n) <+ r * poly_h(V(p, n)) + (1.0 - r) * poly_l(V(p, n));
    end
endmodule
"""

_HDL_MACROS = """
// one VAR step: forward substitution of A x = sum_i B_i x_(n-i) + C eps
`define VAR_STEP \\
    for (i = 0; i < 4; i = i + 1) begin \\
        acc = 0.0; \\
        for (j = 0; j < 4; j = j + 1) acc = acc + C[4 * i + j] * $rdist_normal(s, 0.0, 1.0); \\
        for (l = 0; l < ORDER; l = l + 1) \\
            for (j = 0; j < 4; j = j + 1) acc = acc + B[16 * l + 4 * i + j] * hist[4 * l + j]; \\
        for (j = 0; j < i; j = j + 1) acc = acc - A[4 * i + j] * z[j]; \\
        z[i] = acc; \\
    end \\
    for (l = ORDER - 1; l > 0; l = l - 1) \\
        for (j = 0; j < 4; j = j + 1) hist[4 * l + j] = hist[4 * (l - 1) + j]; \\
    for (j = 0; j < 4; j = j + 1) hist[j] = z[j];

// gamma polynomials, de-normalization and physical clamps into X[0:3]
`define DENORM(X) \\
    for (i = 0; i < 4; i = i + 1) begin \\
        zz = min(max(z[i], z_lo[i]), z_hi[i]); \\
        y[i] = 0.0; \\
        for (j = GDEG; j >= 0; j = j - 1) y[i] = y[i] * zz + gamma[(GDEG + 1) * i + j]; \\
        X[i] = y[i] * stats[4 + i] + stats[i]; \\
    end \\
    X[0] = max(X[0], 100.0); \\
    X[2] = max(X[2], 100.0); \\
    X[1] = min(max(X[1], v_min), -1e-6); \\
    X[3] = min(max(X[3], 1e-6), v_max - 1e-6);
"""


def emit_hdl(m: ModelParams, module="rramgen_cell", seed=1) -> str:
    """Verilog-A source of a two-terminal cell with the model constants inlined.

    Arrays are flattened row-major: ``A[4 i + j]``, ``B[16 l + 4 i + j]`` for
    lag ``l + 1``, ``gamma[5 i + k]`` (ascending powers), ``gmm_mean[8 c + i]``
    and the lower Cholesky factors ``gmm_chol[64 c + 8 i + j]``.
    """
    p, d = m.var.p, m.var.dim
    k = m.gmm.k
    chol = np.array([np.linalg.cholesky(c) if np.any(c) else np.zeros_like(c) for c in m.gmm.covs])
    head = [
        "// Stochastic ReRAM cell: VAR cycle-to-cycle process, mixture device-to-device",
        "// statistics and a quasi-static switching I(V). Generated by rramgen.",
        "`include \"constants.vams\"",
        "`include \"disciplines.vams\"",
        _HDL_MACROS,
        f"module {module}(p, n);",
        "    inout p, n;",
        "    electrical p, n;",
        f"    parameter integer seed = {int(seed)};",
        f"    parameter integer ORDER = {p};",
        f"    parameter integer K = {k};",
        f"    parameter integer GDEG = {m.gammas.degree};",
        _array_param("A", m.var.A),
        _array_param("B", m.var.B),
        _array_param("C", m.var.C),
        _array_param("gamma", m.gammas.coeffs),
        _array_param("z_lo", m.gammas.z_lo),
        _array_param("z_hi", m.gammas.z_hi),
        _array_param("gmm_w", m.gmm.weights),
        _array_param("gmm_mean", m.gmm.means),
        _array_param("gmm_chol", chol),
        _array_param("gmm_center", m.gmm.center),
        _array_param("gmm_scale", m.gmm.scale),
        _array_param("sigma_floor", m.gmm.sigma_floor),
        _array_param("I_H", m.iv.hi_coeffs),
        _array_param("I_L", m.iv.lo_coeffs),
        _scalar_param("eta", m.iv.eta),
        _scalar_param("V0", m.iv.v0),
        _scalar_param("v_min", m.iv.v_min),
        _scalar_param("v_max", m.iv.v_max),
    ]
    body = _HDL_BODY.format(nhist=d * p - 1, burn=100)
    return "\n".join(head) + "\n" + body


_PARAM_RE = re.compile(r"parameter\s+real\s+(\w+)(?:\[0:(\d+)\])?\s*=\s*('\{(.*?)\}|[^;]+);", re.S)


def parse_hdl_params(text):
    """Extract ``parameter real`` values from emitted Verilog-A -> {name: ndarray}."""
    out = {}
    for mt in _PARAM_RE.finditer(text):
        name, last, literal, items = mt.groups()
        if last is None:
            out[name] = np.array(float(literal))
            continue
        vals = np.array([float(t) for t in items.split(",")])
        if len(vals) != int(last) + 1:
            raise ParseError(f"parameter {name}: declared {int(last) + 1} values, found {len(vals)}")
        out[name] = vals
    return out
