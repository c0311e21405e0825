"""Batch command line: ``cspn <command> [flags]``.

Every command accepts ``--seed``, ``--threads``, ``--out`` and ``--config``.
A config file holds ``key = value`` lines (keys are flag names with or without
the leading dashes); flags given on the command line override it. The fully
resolved configuration is written to ``<out>/config.txt``.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
Failures print one line ``cspn: <kind>: <reason>`` to standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import abcspn as ab
from . import circuit as cc
from . import citest
from . import data as dio
from . import learn as ln
from . import optimize as op

EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 1, 2, 3
COMMON = ("seed", "threads", "out", "config")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for numeric failures here
    def error(self, message):
        raise UsageError(message)


# -- config files -------------------------------------------------------------------


def _scalar(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[section]`` headers are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().lstrip("-").replace("-", "_")] = _scalar(value)
    return out


def write_config(args, out: Path) -> None:
    lines = [f"command = {args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func"):
            continue
        lines.append(f"{k} = {json.dumps(v) if isinstance(v, str) else v}")
    (out / "config.txt").write_text("\n".join(lines) + "\n")


# -- shared helpers -------------------------------------------------------------------


def _fmt(v, precision: str) -> str:
    return format(float(v), ".17g" if precision == "full" else ".10g")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, path=None) -> dio.Dataset:
    data = dio.load_csv(path or args.data, args.schema)
    if args.evidence_fraction is not None:
        if args.schema is not None:
            raise UsageError("--evidence-fraction applies only to schema-less binary files")
        data = dio.EvidenceMask(args.evidence_fraction, seed=args.mask_seed).apply(data)
    return data


def _evidence(args, model: cc.Circuit) -> np.ndarray:
    """X matrix from a file holding either every schema column or only the X columns."""
    if args.schema is None:
        data = _load(args)
        return np.asarray(data.x)
    schema = dio.read_schema(args.schema)
    first = Path(args.data).read_text().split("\n", 1)[0]
    if len(first.split(",")) == len(schema.x_indices) != len(schema):
        schema = dio.Schema(tuple(schema.columns[i] for i in schema.x_indices))
        x = np.asarray(dio.load_csv(args.data, schema).values)
    else:
        x = np.asarray(dio.load_csv(args.data, schema).x)
    if x.shape[1] != model.num_x:
        raise UsageError(f"model expects {model.num_x} evidence columns, data has {x.shape[1]}")
    return x


def _learn_params(args) -> ln.LearnParams:
    return ln.LearnParams(
        min_instances=args.min_instances, alpha=args.alpha, K=args.K, cluster_method=args.cluster_method,
        seed=args.seed, min_frac=args.min_frac, max_depth=args.max_depth, gating_ridge=args.gating_ridge,
        leaf_ridge=args.leaf_ridge, threads=args.threads)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def evaluate_metrics(model: cc.Circuit, y, x) -> tuple:
    """(mean CLL, RMSE of the circuit's predictive means, per-row CLL)."""
    ll = cc.log_density(model, y, x)
    rmse = float(np.sqrt(np.mean((cc.expectation(model, x) - y) ** 2)))
    return float(np.mean(ll)), rmse, ll


def _report_metrics(out: Path, mean_ll, rmse, ll, n, precision, name="mean_cll") -> None:
    rows = [(name, _fmt(mean_ll, precision))]
    if rmse is not None:
        rows.append(("rmse", _fmt(rmse, precision)))
    rows.append(("n", str(n)))
    _write_rows(out / "metrics.csv", ("metric", "value"), rows)
    _write_rows(out / "per_sample.csv", ("row", name.replace("mean_", "")),
                ((i, _fmt(v, precision)) for i, v in enumerate(ll)))
    print(" ".join(f"{k}={v}" for k, v in rows))


def _summary(model, stats=None) -> dict:
    out = cc.structure_summary(model)
    if stats is not None:
        out["learn_stats"] = {k: getattr(stats, k) for k in vars(stats)}
    return out


def _print_summary(s: dict) -> None:
    print(f"nodes={s['nodes']} leaves={s['leaf']} products={s['product']} gatings={s['gating']} "
          f"depth={s['depth']} root={s['root_kind']} partition={s['root_partition']}")


# -- commands -------------------------------------------------------------------------


def cmd_learn(args) -> None:
    data = _load(args)
    stats = ln.LearnStats()
    model = ln.learn_cspn(data, _learn_params(args), stats)
    out = _out_dir(args)
    cc.save(model, out / "model.json")
    s = _summary(model, stats)
    (out / "summary.json").write_text(json.dumps(s, indent=1) + "\n")
    _print_summary(s)


def cmd_train(args) -> None:
    data = _load(args)
    valid = _load(args, args.valid) if args.valid else None
    stats = None
    if args.model:
        model = cc.load(args.model)
    else:
        stats = ln.LearnStats()
        model = ln.learn_cspn(data, _learn_params(args), stats)
    ctrl = op.OptControl(step=args.step, decay=args.decay, batch_size=args.batch_size, max_epochs=args.epochs,
                         patience=args.patience, seed=args.seed, merge_valid=args.merge_valid)
    out = _out_dir(args)
    res = op.train(model, data, valid, ctrl, log_path=out / "train_log.csv")
    cc.save(res.circuit, out / "model.json")
    s = _summary(res.circuit, stats)
    s["best_epoch"] = res.best_epoch
    (out / "summary.json").write_text(json.dumps(s, indent=1) + "\n")
    _print_summary(s)
    target = valid if valid is not None else data
    mean_ll, rmse, ll = evaluate_metrics(res.circuit, target.y, target.x)
    _report_metrics(out, mean_ll, rmse, ll, len(ll), args.precision)


def cmd_eval(args) -> None:
    model = cc.load(args.model)
    data = _load(args)
    if data.y.shape[1] != model.num_y or data.x.shape[1] != model.num_x:
        raise UsageError(f"model is |Y|={model.num_y}, |X|={model.num_x}; data is |Y|={data.y.shape[1]}, |X|={data.x.shape[1]}")
    mean_ll, rmse, ll = evaluate_metrics(model, data.y, data.x)
    _report_metrics(_out_dir(args), mean_ll, rmse, ll, len(ll), args.precision)


def _y_names(args, model):
    if args.schema is None:
        return [f"y{i}" for i in range(model.num_y)]
    schema = dio.read_schema(args.schema)
    return [schema.columns[i].name for i in schema.y_indices]


def _write_y(path, names, values) -> None:
    _write_rows(path, names, ([repr(float(v)) if v != int(v) else str(int(v)) for v in row] for row in values))


def cmd_sample(args) -> None:
    model = cc.load(args.model)
    x = _evidence(args, model)
    x = np.repeat(x, args.n, axis=0)
    draws = cc.sample(model, x, np.random.default_rng(args.seed))
    _write_y(_out_dir(args) / "samples.csv", _y_names(args, model), draws)
    print(f"wrote {draws.shape[0]} samples")


def cmd_mpe(args) -> None:
    model = cc.load(args.model)
    y = cc.mpe(model, _evidence(args, model))
    _write_y(_out_dir(args) / "mpe.csv", _y_names(args, model), y)
    print(f"wrote {y.shape[0]} MPE assignments")


def cmd_citest(args) -> None:
    data = _load(args)
    g = citest.dependence_graph(data.y, data.x if data.x.shape[1] else None, alpha=args.alpha, seed=args.seed,
                                threads=args.threads)
    out = _out_dir(args)
    rows = [(i, j, _fmt(t.statistic, args.precision), _fmt(t.p_value, args.precision), t.method)
            for (i, j), t in sorted(g.tests.items())]
    _write_rows(out / "citest.csv", ("i", "j", "statistic", "p_value", "method"), rows)
    comps = g.connected_components()
    (out / "components.json").write_text(json.dumps([list(map(int, c)) for c in comps]) + "\n")
    print(f"tests={g.num_tests} edges={len(g.edges)} components={[list(map(int, c)) for c in comps]}")


def _read_images(path, binarize=None) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.pgm"))
        if not files:
            raise UsageError(f"no .pgm files in {p}")
        raw = [dio.read_pgm(f) for f in files]
        images = np.stack([r[0] if isinstance(r, tuple) else r for r in raw]).astype(float)
        maxval = 255.0
    else:
        images = dio.read_idx(p).astype(float)
        maxval = 255.0
    if images.ndim != 3:
        raise UsageError(f"expected a stack of 2-d images, got shape {images.shape}")
    images = images / maxval
    if binarize is not None:
        images = (images > binarize).astype(float)
    return images


def _read_labels(path) -> np.ndarray:
    p = Path(path)
    if p.suffix in (".csv", ".txt"):
        return np.loadtxt(p, dtype=np.int64, ndmin=1, delimiter=",")
    return dio.read_idx(p).astype(np.int64).ravel()


def _grid(spec: str, images) -> ab.BlockGrid:
    try:
        r, c = (int(t) for t in spec.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid must look like 2x2, got {spec!r}") from None
    return ab.BlockGrid(images.shape[1], images.shape[2], r, c)


def cmd_abcspn_train(args) -> None:
    images = _read_images(args.images, args.binarize)
    labels = _read_labels(args.labels)
    model = ab.abcspn_train(images, labels, _grid(args.grid, images), _learn_params(args), args.num_classes, args.leaf)
    out = _out_dir(args)
    ab.save_model(model, out)
    stats = [{k: getattr(s, k) for k in vars(s)} for s in model.stats]
    (out / "learn_stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    print(f"blocks={model.grid.num_blocks} classes={model.num_classes} "
          f"root_ci_tests={[s.root_ci_tests for s in model.stats]}")


def cmd_abcspn_eval(args) -> None:
    model = ab.load_model(args.model)
    images = _read_images(args.images, args.binarize)
    labels = _read_labels(args.labels)
    ll = np.atleast_1d(ab.abcspn_log_likelihood(model, images, labels))
    _report_metrics(_out_dir(args), float(np.mean(ll)), None, ll, len(ll), args.precision, name="mean_ll")


def cmd_abcspn_sample(args) -> None:
    model = ab.load_model(args.model)
    if args.mixture is not None:
        classes = np.array([float(t) for t in args.mixture.split(",")])
    elif args.cls is not None:
        classes = np.full(args.n, args.cls, dtype=np.int64)
    else:
        classes = None
    images = ab.abcspn_sample(model, classes, np.random.default_rng(args.seed), n=args.n)
    out = _out_dir(args)
    for k, img in enumerate(images):
        dio.write_pgm(out / f"sample_{k:04d}.pgm", np.rint(img * 255).astype(np.int64), maxval=255)
    print(f"wrote {len(images)} images to {out}")


# -- parser ---------------------------------------------------------------------------


def _common(p) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=".")
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("--precision", choices=("short", "full"), default="short",
                   help="printed digits for reals: 10 (short) or 17 (full)")


def _data_flags(p, required=True) -> None:
    p.add_argument("--data", required=required, help="CSV file")
    p.add_argument("--schema", default=None, help="schema sidecar (name,type,role per line); default all-binary targets")
    p.add_argument("--evidence-fraction", type=float, default=None, help="seeded evidence mask for schema-less files")
    p.add_argument("--mask-seed", type=int, default=0)


def _learn_flags(p) -> None:
    p.add_argument("--min-instances", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--cluster-method", choices=ln.CLUSTER_METHODS, default="kmeans")
    p.add_argument("--min-frac", type=float, default=None)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--gating-ridge", type=float, default=1e-3)
    p.add_argument("--leaf-ridge", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cspn", description="Conditional sum-product networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("learn", help="learn a structure from data")
    _common(p), _data_flags(p), _learn_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("train", help="learn (or load) a circuit and refine it by CLL ascent")
    _common(p), _data_flags(p), _learn_flags(p)
    p.add_argument("--model", default=None, help="start from this model instead of learning one")
    p.add_argument("--valid", default=None, help="validation CSV (same schema)")
    p.add_argument("--step", type=float, default=1e-2)
    p.add_argument("--decay", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--merge-valid", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean CLL and RMSE of a model on data")
    _common(p), _data_flags(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, what in (("sample", cmd_sample, "draw Y given each evidence row"),
                             ("mpe", cmd_mpe, "most probable Y given each evidence row")):
        p = sub.add_parser(name, help=what)
        _common(p), _data_flags(p)
        p.add_argument("--model", required=True)
        if name == "sample":
            p.add_argument("--n", type=int, default=1, help="draws per evidence row")
        p.set_defaults(func=func)

    p = sub.add_parser("citest", help="pairwise conditional independence tests among targets")
    _common(p), _data_flags(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_citest)

    def image_flags(p):
        p.add_argument("--images", required=True, help="IDX file or directory of PGM images")
        p.add_argument("--labels", required=True, help="IDX or CSV class ids")
        p.add_argument("--binarize", type=float, default=None, help="threshold on [0,1] intensities")

    p = sub.add_parser("abcspn-train", help="train a block-wise autoregressive image model")
    _common(p), image_flags(p), _learn_flags(p)
    p.add_argument("--grid", default="2x2", help="block rows x block columns")
    p.add_argument("--leaf", choices=sorted(ab.LEAF_MODES), default="gaussian")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_abcspn_train)

    p = sub.add_parser("abcspn-eval", help="joint log-likelihood of labelled images")
    _common(p), image_flags(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_abcspn_eval)

    p = sub.add_parser("abcspn-sample", help="sample images as PGM files")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--mixture", default=None, help="comma-separated class weights")
    p.add_argument("--n", type=int, default=1)
    p.set_defaults(func=cmd_abcspn_sample)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    config = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    sub.set_defaults(**config)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        t0 = time.perf_counter()
        write_config(args, _out_dir(args))
        args.func(args)
        print(f"done in {time.perf_counter() - t0:.2f}s")
        return 0
    except OSError as e:
        print(f"cspn: io: {e}", file=sys.stderr)
        return EXIT_IO
    except ArithmeticError as e:
        print(f"cspn: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as e:
        msg = str(e)
        kind = "io" if isinstance(e, dio.DataError) and msg.startswith("cannot read") else "validation"
        print(f"cspn: {kind}: {msg}", file=sys.stderr)
        return EXIT_IO if kind == "io" else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
