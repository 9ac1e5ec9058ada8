"""Command-line interface: ``rramgen <command> ...``.

Exit codes: 0 success, 1 other error, 2 validation failure, 3 solver
non-convergence, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .cell import CellArray
from .crossbar import (
    DEFAULT_LEAD_R,
    READ_V,
    CrossbarNet,
    image_voltages,
    read_cells,
    read_image,
    set_all,
    write_image,
)
from .errors import NoConvergence, ParseError, SchemaMismatch
from .features import extract_dataset, read_feature_csv, read_sweep_csv, write_feature_csv, write_sweep_csv
from .iomodel import dumps_model, emit_hdl, file_sha256, loads_model, read_model_file, save_model
from .pgm import read_pgm, write_pgm
from .synthio import (
    DEFAULT_NOISE,
    DEFAULT_SAMPLES,
    generate_features,
    generate_sweep_dataset,
    reference_defect_mean,
    reference_params,
    train,
)
from .validation import compare

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION, EXIT_NO_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


def _echo(obj):
    print(json.dumps(obj, indent=2))


def _load_model(path):
    return reference_params() if path is None else read_model_file(path).model


def _load_features(path):
    """Feature array (N, M, 4) from a feature CSV or, by extraction, a sweep CSV."""
    with open(path) as fh:
        line = fh.readline()
        while line.startswith("#"):
            line = fh.readline()
    if line.strip().startswith("device,cycle,voltage"):
        return extract_dataset(read_sweep_csv(path)).values
    return read_feature_csv(path)


# --------------------------------------------------------------------------
# commands


def cmd_synthgen(args):
    model = _load_model(args.model)
    ds = generate_sweep_dataset(model, args.devices, args.cycles, samples=args.samples,
                                rng=np.random.default_rng(args.seed), noise=args.noise)
    write_sweep_csv(ds, args.out)
    _echo({"out": str(args.out), "devices": args.devices, "cycles": args.cycles, "samples": args.samples,
           "noise": args.noise, "seed": args.seed})
    return EXIT_OK


def cmd_train(args):
    ds = read_sweep_csv(args.dataset)
    model, report = train(ds, p=args.p, k=args.k, seed=args.seed)
    save_model(model, args.out, {"seed": args.seed, "dataset_sha256": file_sha256(args.dataset)})
    rep = report.to_dict()
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=2) + "\n")
    _echo(rep)
    return EXIT_OK


def cmd_generate(args):
    model = _load_model(args.model)
    values = generate_features(model, args.devices, args.cycles, np.random.default_rng(args.seed))
    write_feature_csv(values, args.out)
    _echo({"out": str(args.out), "devices": args.devices, "cycles": args.cycles, "seed": args.seed})
    return EXIT_OK


def cmd_validate(args):
    train_values = _load_features(args.dataset)
    gen_values = _load_features(args.generated)
    defect = reference_defect_mean() if args.defect_reference else None
    rep = compare(train_values, gen_values, k=args.k, seed=args.seed, defect_mean=defect)
    if args.json:
        _echo({**rep.to_dict(), "ok": rep.ok})
    else:
        print(rep.summary())
    return EXIT_OK if rep.ok else EXIT_VALIDATION


def _run_bench(args, operation):
    model = _load_model(args.model)
    dims = bench.parse_size(args.size)
    if args.mode == "independent":
        m = int(np.prod(dims))
        fn = bench.independent_read if operation == "read" else bench.independent_write
        res = fn(model, m, repeat=args.repeat, seed=args.seed)
    else:
        if len(dims) == 1:
            dims = (dims[0], dims[0])
        fn = bench.crossbar_read if operation == "read" else bench.crossbar_write
        res = fn(model, *dims, lead_r=args.lead_r, repeat=args.repeat, seed=args.seed)
    _echo(res.to_dict())
    return EXIT_OK


def cmd_readbench(args):
    return _run_bench(args, "read")


def cmd_writebench(args):
    return _run_bench(args, "write")


def _resize_nearest(img, rows, cols):
    r = (np.arange(rows) * img.shape[0] // rows)
    c = (np.arange(cols) * img.shape[1] // cols)
    return img[np.ix_(r, c)]


def _save_state(path, net: CrossbarNet, model_text):
    cells = net.cells
    arrays = {k: getattr(cells, k) for k in CellArray._STATE}
    np.savez_compressed(path, rows=net.rows, cols=net.cols, lead_r=net.lead_r, x=net.x,
                        model=np.array(model_text), rng=np.array(json.dumps(cells.rng.bit_generator.state)),
                        **arrays)


def _load_state(path):
    with np.load(path) as z:
        model = loads_model(str(z["model"]), f"{path}:model").model
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(z["rng"]))
        parts = {k: z[k] for k in CellArray._STATE}
        cells = CellArray(model.iv, model=model, rng=rng, **parts)
        return CrossbarNet(int(z["rows"]), int(z["cols"]), cells, float(z["lead_r"]), x=z["x"].copy())


def cmd_write_image(args):
    model = _load_model(args.model)
    img = read_pgm(args.image)
    rows, cols = bench.parse_size(args.size) if args.size else img.shape
    img = _resize_nearest(img, rows, cols)
    net = CrossbarNet.from_model(model, rows, cols, np.random.default_rng(args.seed), lead_r=args.lead_r)
    set_all(net)
    v_lo, v_hi = image_voltages(net)
    v_lo = args.vlo if args.vlo is not None else v_lo
    v_hi = args.vhi if args.vhi is not None else max(v_hi, v_lo)
    rep = write_image(net, img, v_lo, v_hi)
    readout = read_image(net)
    out = {"shape": [rows, cols], "lead_r": args.lead_r, "v_lo": v_lo, "v_hi": v_hi, "seed": args.seed,
           "seconds": rep.seconds, "ops": rep.ops, "newton_iterations": rep.iterations,
           "factorizations": rep.factorizations, "max_residual": rep.max_residual,
           "pearson_readout": float(np.corrcoef(img.ravel(), readout.ravel())[0, 1])}
    if args.state:
        _save_state(args.state, net, dumps_model(model))
        out["state"] = str(args.state)
    if args.out:
        write_pgm(args.out, readout)
        out["out"] = str(args.out)
    _echo(out)
    return EXIT_OK


def cmd_read_image(args):
    net = _load_state(args.state)
    write_pgm(args.out, read_image(net, args.v_read))
    out = {"state": str(args.state), "out": str(args.out), "shape": [net.rows, net.cols], "v_read": args.v_read}
    if args.csv:
        cur = read_cells(net, args.v_read)
        rows, cols = np.indices(cur.shape)
        np.savetxt(args.csv, np.column_stack([rows.ravel(), cols.ravel(), cur.ravel()]),
                   fmt=("%d", "%d", "%.9e"), delimiter=",", header="row,col,current", comments="")
        out["csv"] = str(args.csv)
    _echo(out)
    return EXIT_OK


def cmd_export_hdl(args):
    text = emit_hdl(_load_model(args.model))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    ap = argparse.ArgumentParser(prog="rramgen", description="Stochastic ReRAM cell models: synthesize, "
                                 "train, generate, validate and benchmark.")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_arg(p, required=False):
        p.add_argument("--model", required=required, help="model JSON file (default: built-in reference model)")

    p = sub.add_parser("synthgen", help="write a synthetic sweep dataset CSV")
    model_arg(p)
    p.add_argument("--devices", type=int, default=64)
    p.add_argument("--cycles", type=int, default=1000)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("train", help="fit a model to a sweep dataset CSV")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the training report JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write generated features for M devices x N cycles")
    model_arg(p)
    p.add_argument("--devices", type=int, default=64)
    p.add_argument("--cycles", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="compare generated features with a dataset")
    p.add_argument("dataset", help="sweep CSV or feature CSV")
    p.add_argument("generated", help="feature CSV (or sweep CSV)")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--defect-reference", action="store_true",
                   help="also check the weight of the reference model's defect cluster")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    for name, fn in (("readbench", cmd_readbench), ("writebench", cmd_writebench)):
        p = sub.add_parser(name, help=f"{name[:-5]} throughput (OPS)")
        model_arg(p)
        p.add_argument("--mode", choices=("independent", "crossbar"), default="independent")
        p.add_argument("--size", default="1048576", help="cell count M or crossbar RxC")
        p.add_argument("--lead-r", type=float, default=DEFAULT_LEAD_R)
        p.add_argument("--repeat", type=int, default=5)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)

    p = sub.add_parser("write-image", help="write a PGM image into a crossbar by partial RESET")
    model_arg(p)
    p.add_argument("image")
    p.add_argument("--size", help="crossbar RxC (default: image size, nearest-neighbour resampling)")
    p.add_argument("--lead-r", type=float, default=DEFAULT_LEAD_R)
    p.add_argument("--vlo", type=float, help="amplitude for 0 (default: just above the largest RESET onset)")
    p.add_argument("--vhi", type=float, help="amplitude for 1 (default: below twice vlo, disturb-free)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state", help="save the written crossbar here (.npz) for read-image")
    p.add_argument("--out", help="write the read-back image (PGM)")
    p.set_defaults(func=cmd_write_image)

    p = sub.add_parser("read-image", help="read a saved crossbar back into a PGM image")
    p.add_argument("state")
    p.add_argument("--out", required=True)
    p.add_argument("--v-read", type=float, default=READ_V)
    p.add_argument("--csv", help="also dump per-cell read currents as row,col,current")
    p.set_defaults(func=cmd_read_image)

    p = sub.add_parser("export-hdl", help="emit Verilog-A source with the model constants")
    model_arg(p)
    p.add_argument("--out", help="output .va file (default: stdout)")
    p.set_defaults(func=cmd_export_hdl)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (OSError, SchemaMismatch, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - report any module error as a diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
