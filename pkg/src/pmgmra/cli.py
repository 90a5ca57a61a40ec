"""Command line entry point: ``pmgmra <subcommand> ...``.

Exit status: 0 on success, 1 when a pipeline or validation check fails,
2 on usage errors (bad flags, missing inputs).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .covertree import (build_cover_tree, deserialize_cover_tree,
                        serialize_cover_tree, validate_cover_tree)
from .datasets import RAW_DTYPES, SYNTHETIC_KINDS, DatasetSpec, load_dataset
from .dyadic import DimPolicy, DyadicParams
from .errors import GmraError, InvalidInput, NotFound
from .pipeline import (BACKENDS, STAGES, default_shelf_path, footprint_mib,
                       ingest, ratio, run_pipeline, validate_artifacts,
                       write_jsonl)
from .shelf import open_shelf
from .wavelets import (batch_transform, igwt, load_coefficients, load_model,
                       save_coefficients, write_coefficients_csv)


class UsageError(Exception):
    pass


def _dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--idx", action="append", default=[], metavar="PATH",
                   help="IDX file (repeat to concatenate, e.g. train then test)")
    g.add_argument("--raw", metavar="PATH", help="raw little-endian matrix")
    g.add_argument("--raw-dtype", choices=sorted(RAW_DTYPES), default="f64")
    g.add_argument("--synthetic", choices=SYNTHETIC_KINDS, metavar="KIND")
    g.add_argument("--n", type=int)
    g.add_argument("--D", type=int)
    g.add_argument("--d", type=int, default=2, help="intrinsic dimension (synthetic)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--normalize", action="store_true", help="scale integer data to [0, 1]")
    g.add_argument("--limit", type=int, help="keep only the first LIMIT rows")
    g.add_argument("--storage", choices=("f32", "f64"), help="float width on the shelf")
    g.add_argument("--name", help="dataset name used in outputs")


def _gmra_args(p):
    p.add_argument("--dim-policy", default="energy:0.95", type=_policy)
    p.add_argument("--min-cell-size", type=int, default=10)
    p.add_argument("--j-min", type=int)


def _shelf_args(p, backend=True):
    p.add_argument("--shelf-path", type=Path,
                   help="region file (default: $GMRA_SHELF_DIR/<name>.shelf)")
    p.add_argument("--consistency", choices=("none", "wal"), default="none")
    p.add_argument("--capacity", type=int, help="region size in bytes")
    if backend:
        p.add_argument("--backend", choices=BACKENDS, default="shelf")


def _policy(text):
    try:
        return DimPolicy.parse(text)
    except InvalidInput as exc:
        raise argparse.ArgumentTypeError(str(exc))


def dataset_spec(args):
    sources = sum([bool(args.idx), args.raw is not None, args.synthetic is not None])
    if sources != 1:
        raise UsageError("give exactly one of --idx, --raw or --synthetic")
    common = dict(normalize=args.normalize, limit=args.limit, storage=args.storage)
    if args.idx:
        for p in args.idx:
            if not Path(p).exists():
                raise UsageError(f"missing input {p}")
        name = args.name or Path(args.idx[0]).name.split(".")[0]
        return DatasetSpec(name, "idx", paths=tuple(args.idx), **common)
    if args.raw is not None:
        if not Path(args.raw).exists():
            raise UsageError(f"missing input {args.raw}")
        if args.n is None or args.D is None:
            raise UsageError("--raw needs --n and --D")
        return DatasetSpec(args.name or Path(args.raw).stem, "rawf64", n=args.n, D=args.D,
                           paths=(args.raw,), raw_dtype=args.raw_dtype, **common)
    if args.n is None or args.D is None:
        raise UsageError("--synthetic needs --n and --D")
    name = args.name or f"{args.synthetic}-{args.n}x{args.D}-s{args.seed}"
    return DatasetSpec(name, "synthetic", n=args.n, D=args.D, kind=args.synthetic,
                       d=args.d, seed=args.seed, **common)


def _shelf_path(args, name, suffix=".shelf"):
    if args.shelf_path is not None:
        return args.shelf_path
    path = default_shelf_path(name, suffix)
    if path is None:
        raise UsageError("no --shelf-path given and GMRA_SHELF_DIR is unset")
    return path


def _existing(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"missing {what} {path}")
    return Path(path)


def _params(args):
    return DyadicParams(args.dim_policy, args.min_cell_size, args.j_min)


def _print(obj):
    print(json.dumps(obj, sort_keys=True))


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(args):
    spec = dataset_spec(args)
    path = _shelf_path(args, spec.name)
    path, shape = ingest(spec, path, args.consistency, args.capacity)
    _print({"shelf": str(path), "n": shape[0], "D": shape[1],
            "dtype": spec.storage_dtype.name, "bytes": path.stat().st_size,
            "MiB": round(footprint_mib(path), 2)})
    return 0


def cmd_covertree_build(args):
    spec = dataset_spec(args)
    X = load_dataset(spec)
    tree = build_cover_tree(X, implementation=args.implementation)
    serialize_cover_tree(tree, args.out)
    _print({"tree": str(args.out), "n": tree.n, "top_scale": tree.top_scale,
            "bottom_scale": tree.bottom_scale, "kernels": args.implementation or kernels.BACKEND})
    return 0


def cmd_covertree_validate(args):
    spec = dataset_spec(args)
    X = load_dataset(spec)
    tree = deserialize_cover_tree(_existing(args.tree, "cover tree file"), X)
    report = validate_cover_tree(tree, X)
    for v in report[:args.show]:
        print(f"{v.kind}: {v.a} {v.b} {v.detail}", file=sys.stderr)
    _print({"covertree": len(report)})
    return 1 if report else 0


def cmd_gmra_build(args):
    spec = dataset_spec(args)
    path = _shelf_path(args, spec.name)
    tree_path = args.tree or Path(str(path) + ".ctree")
    if not args.build_covertree:
        _existing(tree_path, "cover tree file (build it first or pass --build-covertree)")
    result = run_pipeline(spec, tree_path, _params(args), args.backend, path,
                          trials=args.trials, build_covertree=args.build_covertree,
                          consistency=args.consistency, capacity=args.capacity,
                          transform=not args.no_transform, membership=args.membership)
    records = result.timings.records()
    if args.timings:
        write_jsonl(records, args.timings)
    else:
        write_jsonl(records, sys.stdout)
    if result.summary is not None:
        print(json.dumps({"summary": result.summary}, sort_keys=True), file=sys.stderr)
        if result.summary["max_rel_error"] > args.roundtrip_tol:
            print(f"roundtrip error {result.summary['max_rel_error']:.3g} exceeds "
                  f"{args.roundtrip_tol:g}", file=sys.stderr)
            return 1
    return 0


def cmd_transform(args):
    path = _existing(args.shelf_path, "shelf")
    shelf = open_shelf(path)
    try:
        model = load_model(shelf)
        if args.input is not None:
            X = np.load(_existing(args.input, "input"))
            training = False
        else:
            X = np.asarray(shelf.get_array("data/X"), dtype=np.float64)
            training = True
        table, summary = batch_transform(model, X, training=training,
                                         use_membership=args.membership and training)
        if args.store:
            save_coefficients(shelf, table)
        if args.csv:
            write_coefficients_csv(args.csv, model, table)
    finally:
        shelf.close()
    _print(summary)
    return 0


def cmd_reconstruct(args):
    path = _existing(args.shelf_path, "shelf")
    shelf = open_shelf(path)
    try:
        if "coeffs/leaf_ids" not in shelf:
            raise UsageError(f"{path} holds no stored coefficients (run transform --store)")
        model = load_model(shelf)
        table = load_coefficients(shelf)
        out = np.array([igwt(model, table.row(model, i), scale=args.scale)
                        for i in range(len(table))]).reshape(len(table), model.ambient_dim)
    finally:
        shelf.close()
    if args.out.suffix == ".npy":
        np.save(args.out, out)
    else:
        np.savetxt(args.out, out, delimiter=",", fmt="%.17g")
    _print({"rows": int(out.shape[0]), "out": str(args.out)})
    return 0


def cmd_bench(args):
    spec = dataset_spec(args)
    base = _shelf_path(args, spec.name, suffix="")
    tree_path = args.tree or Path(str(base) + ".ctree")
    if not args.build_covertree:
        _existing(tree_path, "cover tree file (build it first or pass --build-covertree)")
    results = {}
    for i, backend in enumerate(BACKENDS):
        results[backend] = run_pipeline(
            spec, tree_path, _params(args), backend, Path(f"{base}.{backend}.shelf"),
            trials=args.trials, build_covertree=args.build_covertree and i == 0,
            consistency=args.consistency, capacity=args.capacity, transform=False)
    sink = args.timings if args.timings else sys.stdout
    for r in results.values():
        write_jsonl(r.timings.records(), sink)
    rho = ratio(results["shelf"].timings, results["volatile"].timings)
    rows = []
    for backend, r in results.items():
        t = r.timings
        rows.append(f"{backend:9s} " + "  ".join(
            f"{s}={t.mean(s):.4f}+-{t.stddev(s):.4f}" for s in STAGES))
    print("\n".join(rows), file=sys.stderr)
    print(f"shelf/volatile total = {rho:.3f} (bound {args.max_ratio:g})", file=sys.stderr)
    return 0 if rho <= args.max_ratio else 1


def cmd_validate(args):
    path = _existing(args.shelf_path, "shelf")
    tree = _existing(args.tree, "cover tree file") if args.tree else None
    report = validate_artifacts(path, tree)
    for suite, items in report.items():
        print(f"{suite}: {len(items)} violations")
        for v in items[:args.show]:
            print(f"  {tuple(v)}", file=sys.stderr)
    return 1 if any(report.values()) else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pmgmra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="store a dataset on a tightly sized shelf")
    _dataset_args(p)
    _shelf_args(p, backend=False)
    p.set_defaults(func=cmd_ingest)

    ct = sub.add_parser("covertree", help="build or validate a cover tree file")
    ctsub = ct.add_subparsers(dest="action", required=True)
    p = ctsub.add_parser("build")
    _dataset_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--implementation", choices=sorted(kernels.IMPLEMENTATIONS))
    p.set_defaults(func=cmd_covertree_build)
    p = ctsub.add_parser("validate")
    _dataset_args(p)
    p.add_argument("--tree", type=Path, required=True)
    p.add_argument("--show", type=int, default=10)
    p.set_defaults(func=cmd_covertree_validate)

    gm = sub.add_parser("gmra", help="run the GMRA pipeline")
    gmsub = gm.add_subparsers(dest="action", required=True)
    p = gmsub.add_parser("build")
    _dataset_args(p)
    _shelf_args(p)
    _gmra_args(p)
    p.add_argument("--tree", type=Path, help="cover tree file (default: <shelf>.ctree)")
    p.add_argument("--build-covertree", action="store_true")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--timings", type=Path, help="append JSONL timings here")
    p.add_argument("--no-transform", action="store_true")
    p.add_argument("--membership", action="store_true",
                   help="encode training rows through the leaf that holds them")
    p.add_argument("--roundtrip-tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_gmra_build)

    p = sub.add_parser("transform", help="encode rows with a stored model")
    p.add_argument("--shelf-path", type=Path, required=True)
    p.add_argument("--input", type=Path, help=".npy rows (default: the stored data/X)")
    p.add_argument("--membership", action="store_true")
    p.add_argument("--csv", type=Path)
    p.add_argument("--store", action="store_true", help="save as coeffs/* on the shelf")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("reconstruct", help="invert stored coefficients")
    p.add_argument("--shelf-path", type=Path, required=True)
    p.add_argument("--scale", type=int, help="stop at this scale (coarse approximation)")
    p.add_argument("--out", type=Path, required=True, help=".npy or .csv")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="timing splits on both backends")
    _dataset_args(p)
    _shelf_args(p, backend=False)
    _gmra_args(p)
    p.add_argument("--tree", type=Path)
    p.add_argument("--build-covertree", action="store_true")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--timings", type=Path)
    p.add_argument("--max-ratio", type=float, default=3.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="run every invariant suite on artifacts")
    p.add_argument("--shelf-path", type=Path, required=True)
    p.add_argument("--tree", type=Path)
    p.add_argument("--show", type=int, default=5)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, NotFound) as exc:
        print(f"pmgmra: error: {exc}", file=sys.stderr)
        return 2
    except GmraError as exc:
        print(f"pmgmra: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
