"""Command-line entry point: ``midrep <command> [options]``.

Every command accepts ``--config FILE`` with ``key=value`` lines whose keys are
the command's long option names (dashes or underscores); explicit options win
over the file.  Exit codes: 0 success, 1 a failed check (grad-check above its
threshold), 2 validation/protocol errors, 3 I/O or format errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, data, featex, netdef, trainer
from .errors import FormatError, MidrepError, ParseError, ValidationError

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _floats(text) -> tuple[float, ...]:
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _reps(text) -> tuple[str, ...]:
    reps = tuple(t for t in str(text).replace(",", " ").split())
    bad = [r for r in reps if r not in featex.REP_NAMES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown representation(s) {bad}")
    return reps


# --------------------------------------------------------------------------
# commands


def _spec(args, num_classes: int = 0):
    return netdef.build_network("table1", side=args.side, width=args.width, num_classes=num_classes)


def cmd_init_weights(args) -> int:
    spec = _spec(args, args.num_classes)
    netdef.save_weights(netdef.init_weights(spec, args.seed), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _load_labels(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def cmd_train_cnn(args) -> int:
    x_tr, x_val = data.read_raw_tensor(args.images), data.read_raw_tensor(args.val_images)
    y_tr, y_val = _load_labels(args.labels), _load_labels(args.val_labels)
    num_classes = int(max(y_tr.max(), y_val.max())) + 1
    spec = _spec(args, num_classes)
    config = trainer.TrainConfig(
        base_lr=args.base_lr, lr_decay_factor=args.lr_decay_factor, plateau_patience=args.plateau_patience,
        max_decays=args.max_decays, momentum=args.momentum, batch_size=args.batch_size,
        dropout_rate=args.dropout_rate, weight_decay=args.weight_decay, clip_norm=args.clip_norm,
        seed=args.seed, epochs=args.epochs, augment=args.augment,
    )
    weights, log = trainer.train_cnn(spec, x_tr, y_tr, x_val, y_val, config)
    netdef.save_weights(weights, args.out)
    if args.log:
        (log.to_json if str(args.log).endswith(".json") else log.to_csv)(args.log)
    best = max(e["val_acc"] for e in log.epochs)
    print(f"best val accuracy {best:.4f}; decays at epochs {log.decay_events}; wrote {args.out}")
    return EXIT_OK


def _table(args) -> data.AttributeTable:
    table = data.parse_attr_list(args.attr)
    if getattr(args, "partition", None):
        table = table.with_partition(data.parse_partition(args.partition))
    return table


def cmd_extract(args) -> int:
    table = _table(args)
    weights = netdef.load_weights(args.weights)
    side = int(weights.meta.get("input_side", netdef.DEFAULT_SIDE))
    width = args.width
    spec = netdef.build_network("table1", side=side, width=width)
    weights.validate(spec)
    reps = args.reps
    if args.doubled:
        fc = [r for r in reps if r not in featex.CONV_REPS]
        if fc:
            raise ValidationError(f"doubled input has no FC representations; drop {fc}")
    features = featex.FeatureSet()
    image_dir = Path(args.images)
    ids = table.split_ids(args.split) if args.split else np.arange(len(table))
    for start in range(0, len(ids), args.batch_size):
        chunk = ids[start : start + args.batch_size]
        patches = np.stack([data.preprocess(data.decode_image(image_dir / table.filenames[i]), args.doubled).data
                            for i in chunk])
        for rep, mat in featex.extract_batch(spec, weights, patches, reps).items():
            features.add(rep, chunk, mat)
    featex.save_feature_cache(features, args.out)
    print(f"extracted {len(ids)} images x {len(reps)} representations; wrote {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    table = _table(args)
    features = featex.load_feature_cache(args.features)
    c_policy = args.C[0] if len(args.C) == 1 else args.C
    attributes = args.attributes.split(",") if args.attributes else None
    result = bench.sweep(features, table, args.selection_split, c_policy, attributes, args.reps,
                         seed=args.seed, threads=args.threads, balanced=args.balanced)
    result.check()
    bench.save_sweep(result, args.out)
    for attr, rep in result.chosen.items():
        print(f"{attr}\t{rep}\t{result.grid[attr][rep]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    table = _table(args)
    features = featex.load_feature_cache(args.features)
    result = bench.load_sweep(args.sweep)
    report = bench.evaluate(result, features, table, args.test_split, args.dataset)
    bench.emit(report, "json", args.out)
    print(f"overall {report.overall:.2f}%; wrote {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.published_table2:
        report = bench.build_report(bench.load_published_table2(args.published_table2), meta={"dataset": args.published_table2})
    elif args.report:
        report = bench.load_report(args.report)
    else:
        raise ValidationError("report needs --report or --published-table2")
    text = bench.emit(report, args.format, args.out)
    if not args.out:
        sys.stdout.write(text)
    status = EXIT_OK
    if args.fixture:
        rows = bench.compare_fixture(report, args.fixture, args.tolerance, args.dataset or None)
        for r in rows:
            got = "-" if r.report is None else f"{r.report:.4f}"
            delta = "-" if r.delta is None else f"{r.delta:+.4f}"
            mark = "n/a" if r.passed is None else ("ok" if r.passed else "FAIL")
            print(f"{r.key}\t{r.column}\t{got}\t{r.fixture:.4f}\t{delta}\t{mark}")
        if any(r.passed is False for r in rows):
            status = EXIT_CHECK
    return status


def cmd_grad_check(args) -> int:
    spec = netdef.build_network("table1", side=args.side, width=args.width, num_classes=args.num_classes)
    weights = netdef.init_weights(spec, args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(-1, 1, size=(3, args.side, args.side))
    label = int(rng.integers(args.num_classes))
    worst = trainer.grad_check(spec, weights, x, label, probes=args.probes, h=args.h, seed=args.seed)
    ok = worst <= args.threshold
    print(f"max relative error {worst:.3e} over {args.probes} probes ({'ok' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(func=func)
        return p

    def geometry(p, side=netdef.DEFAULT_SIDE, width=1.0):
        p.add_argument("--side", type=int, default=side, help="input side the network is built for")
        p.add_argument("--width", type=float, default=width, help="channel-count multiplier")

    p = command("init-weights", cmd_init_weights, "write a randomly initialized weight file")
    geometry(p)
    p.add_argument("--num-classes", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("train-cnn", cmd_train_cnn, "train a classifier head on aligned faces")
    geometry(p)
    p.add_argument("--images", required=True, help="raw tensor (N, 3, 120, 120)")
    p.add_argument("--labels", required=True, help="text file, one class index per line")
    p.add_argument("--val-images", required=True)
    p.add_argument("--val-labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log (.csv or .json)")
    defaults = trainer.TrainConfig()
    for key in ("base_lr", "lr_decay_factor", "momentum", "dropout_rate", "weight_decay", "clip_norm"):
        p.add_argument("--" + key.replace("_", "-"), type=float, default=getattr(defaults, key))
    for key in ("plateau_patience", "max_decays", "batch_size", "epochs"):
        p.add_argument("--" + key.replace("_", "-"), type=int, default=getattr(defaults, key))
    p.add_argument("--augment", type=_bool, default=defaults.augment)

    p = command("extract", cmd_extract, "extract representations into a feature cache")
    p.add_argument("--weights", required=True)
    p.add_argument("--width", type=float, default=1.0, help="channel multiplier the weights were built with")
    p.add_argument("--attr", required=True, help="list_attr file naming the images")
    p.add_argument("--partition", help="partition file; with --split restricts the images")
    p.add_argument("--split", choices=data.SPLITS)
    p.add_argument("--images", required=True, help="directory holding the aligned images")
    p.add_argument("--reps", type=_reps, default=featex.REP_NAMES)
    p.add_argument("--doubled", type=_bool, default=False, help="240x240 inputs, conv representations only")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", required=True)

    p = command("sweep", cmd_sweep, "train per-attribute, per-layer SVMs and select the best layer")
    p.add_argument("--features", required=True)
    p.add_argument("--attr", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--selection-split", choices=("train", "val"), default="train")
    p.add_argument("--C", type=_floats, default=(1.0,), help="one value, or a grid chosen on val")
    p.add_argument("--attributes", help="comma-separated subset")
    p.add_argument("--reps", type=_reps, default=featex.REP_NAMES)
    p.add_argument("--balanced", type=_bool, default=False)
    p.add_argument("--out", required=True, help="output directory")

    p = command("evaluate", cmd_evaluate, "test accuracy of the selected models")
    p.add_argument("--sweep", required=True, help="directory written by sweep")
    p.add_argument("--features", required=True)
    p.add_argument("--attr", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--test-split", choices=data.SPLITS, default="test")
    p.add_argument("--dataset", default="")
    p.add_argument("--out", required=True, help="report JSON")

    p = command("report", cmd_report, "render a report and compare it with a fixture")
    p.add_argument("--report", help="report JSON written by evaluate")
    p.add_argument("--published-table2", choices=("celeba", "lfwa"), help="use the packaged published column instead")
    p.add_argument("--format", choices=("csv", "json", "markdown", "grid"), default="markdown")
    p.add_argument("--out")
    p.add_argument("--fixture", help="fixture CSV path")
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--dataset", default="", help="fixture column (defaults to the report's dataset)")

    p = command("grad-check", cmd_grad_check, "finite-difference check of a width-reduced network")
    geometry(p, side=56, width=0.125)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-6)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if not early.config or early.command not in subparsers.choices:
        return parser.parse_args(argv)
    config = read_config(early.config)
    sub = subparsers.choices[early.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in config.items():
        action = known.get(key)
        if action is None or key in ("config", "func", "help"):
            raise ValidationError(f"unknown config key {key!r} for {early.command}")
        defaults[key] = action.type(value) if action.type else value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except (FormatError, ParseError, OSError) as exc:
        print(f"midrep: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MidrepError, ValueError) as exc:
        print(f"midrep: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
