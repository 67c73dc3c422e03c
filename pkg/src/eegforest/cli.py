"""``eegforest`` command line: synth | features | train | prune | sweep | eval | bench.

Every flag can also come from an INI file passed with ``--config`` (keys
under ``[run]`` use the flag's long name, dashes or underscores).  Flags on
the command line win.  The fully resolved configuration is logged to stderr
as one JSON line before the command runs.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 capacity error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import compact as ctf
from .dataset import (FeatureTable, FrequencyGroup, LabelScheme, SynthConfig,
                      build_feature_table, extract_group, load_corpus,
                      split_patient_independent, synth_corpus, write_corpus)
from .errors import (CapacityError, CompactFormatError, CorruptionError, DataFormatError,
                     InvalidArgumentError)
from .evaluation import bench_inference, evaluate, prune_curve
from .forest import (TreeParams, grow_forest, prune_forest, prune_to_budget, refit_counts)

log = logging.getLogger("eegforest")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CAPACITY = 0, 1, 2, 3
SPLITS = ("all", "train", "val", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratios(text):
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return parts


def _common(p, scheme=False, group=False):
    p.add_argument("--config", help="INI file with a [run] section of defaults")
    p.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for all randomness")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    if scheme:
        p.add_argument("--scheme", choices=[s.value for s in LabelScheme], default=None)
    if group:
        p.add_argument("--group", choices=[g.value for g in FrequencyGroup], default="a")


def build_parser():
    parser = _Parser(prog="eegforest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic annotated corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=8)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--fs", type=int, default=250)
    p.add_argument("--duration", type=float, default=600.0, help="seconds per recording")
    p.add_argument("--artifact-rate", type=float, default=0.3)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--miss-rate", type=float, default=0.1)
    p.add_argument("--artifact-gain", type=float, default=1.0)

    p = sub.add_parser("features", help="window, featurise and label a corpus")
    _common(p, group=True)
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLITS, default="all",
                   help="keep one patient-independent split (seeded by --seed)")
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))

    p = sub.add_parser("train", help="grow an Extra-Trees forest and pack it")
    _common(p, scheme=True)
    p.add_argument("features")
    p.add_argument("--out", required=True)
    p.add_argument("--n-trees", type=int, default=64)
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--max-features", type=int, default=None,
                   help="features tried per split (default ceil(sqrt(n_features)))")
    p.add_argument("--thresholds", type=int, default=1, help="random thresholds per feature")
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--lane-width", type=int, default=8)

    p = sub.add_parser("prune", help="cost-complexity prune a packed model")
    _common(p, scheme=True)
    p.add_argument("model")
    p.add_argument("--train-features", required=True,
                   help="training table; restores the per-node class counts pruning needs")
    p.add_argument("--out", required=True)
    how = p.add_mutually_exclusive_group(required=True)
    how.add_argument("--budget", type=int, help="node payload budget in bytes")
    how.add_argument("--alpha", type=float)

    p = sub.add_parser("sweep", help="accuracy-vs-size curve as CSV")
    _common(p, scheme=True)
    p.add_argument("model")
    p.add_argument("features", help="evaluation table")
    p.add_argument("--train-features", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--points", type=int, default=50)

    p = sub.add_parser("eval", help="classification metrics as CSV")
    _common(p, scheme=True)
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--out", default="-")

    p = sub.add_parser("bench", help="per-window inference timing")
    _common(p)
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--limit", type=int, default=500, help="windows used (0 = all)")
    p.add_argument("--out", default="-")
    return parser


def _apply_config(parser, argv):
    """Turn ``[run]`` keys of a ``--config`` file into subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise DataFormatError("cannot read config file", known.config)
    if not cp.has_section("run"):
        raise DataFormatError("config file needs a [run] section", known.config)
    values = {k.replace("-", "_"): v for k, v in cp.items("run")}
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command in subparsers.choices:
        sp = subparsers.choices[command]
        dests = {a.dest for a in sp._actions}
        unknown = set(values) - dests
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sp.set_defaults(**values)


def _write_text(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _scheme_of(args, model):
    if args.scheme is not None:
        return LabelScheme.parse(args.scheme)
    if model.scheme is None:
        raise InvalidArgumentError("model carries no label scheme; pass --scheme")
    return model.scheme


def _labels(table, scheme, model):
    y = table.y(scheme)
    arity = 1 if y.ndim == 1 else y.shape[1]
    if arity != model.n_outputs:
        raise DataFormatError(
            f"{scheme.value} labels have arity {arity} but the model has {model.n_outputs} outputs")
    if table.X.shape[1] != model.n_features:
        raise DataFormatError(
            f"table has {table.X.shape[1]} features, the model expects {model.n_features}")
    return y


def _trained_forest(args, model, scheme):
    """Unpack a model and restore class counts from its training table."""
    table = FeatureTable.from_csv(args.train_features)
    y = _labels(table, scheme, model)
    Y = y[:, np.newaxis] if y.ndim == 1 else y
    forest = ctf.unpack_forest(model)
    forest.trees = [[refit_counts(t, table.X, Y[:, o], forest.n_classes) for t in per_output]
                    for o, per_output in enumerate(forest.trees)]
    return forest


def cmd_synth(args):
    cfg = SynthConfig(args.patients, args.channels, args.fs, args.duration, args.artifact_rate,
                      args.classes, args.seed, artifact_gain=args.artifact_gain,
                      miss_rate=args.miss_rate)
    corpus = synth_corpus(cfg)
    write_corpus(corpus, args.out)
    log.info("wrote %d recordings to %s", len(corpus), args.out)


def cmd_features(args):
    corpus = extract_group(load_corpus(args.corpus, args.threads), args.group)
    if args.split != "all":
        parts = dict(zip(SPLITS[1:], split_patient_independent(corpus, args.ratios, args.seed)))
        corpus = parts[args.split]
    table = build_feature_table(corpus, args.threads)
    table.to_csv(args.out)
    log.info("wrote %d windows to %s", len(table), args.out)


def cmd_train(args):
    scheme = LabelScheme.parse(args.scheme or "bc")
    table = FeatureTable.from_csv(args.features)
    if len(table) == 0:
        raise DataFormatError("feature table has no rows", args.features)
    params = TreeParams(args.max_features, args.thresholds, args.min_samples_leaf,
                        args.max_depth)
    forest = grow_forest(table.X, table.y(scheme), args.n_trees, params, args.seed,
                         scheme=scheme, lane_width=args.lane_width, threads=args.threads)
    model = ctf.pack_forest(forest)
    ctf.save(model, args.out)
    log.info("packed %d trees, %d nodes, %d bytes", model.n_trees, model.node_count(),
             ctf.packed_size_bytes(model))


def cmd_prune(args):
    model = ctf.load(args.model)
    scheme = _scheme_of(args, model)
    forest = _trained_forest(args, model, scheme)
    if args.budget is not None:
        forest, alpha = prune_to_budget(forest, args.budget)
    else:
        if args.alpha < 0:
            raise InvalidArgumentError("--alpha must be non-negative")
        forest, alpha = prune_forest(forest, args.alpha), args.alpha
    pruned = ctf.pack_forest(forest)
    ctf.save(pruned, args.out)
    log.info("alpha=%r: %d -> %d nodes, %d bytes", alpha, model.node_count(),
             pruned.node_count(), ctf.packed_size_bytes(pruned))


def cmd_sweep(args):
    model = ctf.load(args.model)
    scheme = _scheme_of(args, model)
    forest = _trained_forest(args, model, scheme)
    table = FeatureTable.from_csv(args.features)
    y = _labels(table, scheme, model)
    curve = prune_curve(forest, table.X, y, scheme, max_points=args.points,
                        threads=args.threads)
    _write_text(curve.to_csv(), args.out)


def cmd_eval(args):
    model = ctf.load(args.model)
    scheme = _scheme_of(args, model)
    table = FeatureTable.from_csv(args.features)
    y = _labels(table, scheme, model)
    _write_text(evaluate(model, table.X, y, scheme).to_csv(), args.out)


def cmd_bench(args):
    model = ctf.load(args.model)
    table = FeatureTable.from_csv(args.features)
    if table.X.shape[1] != model.n_features:
        raise DataFormatError(
            f"table has {table.X.shape[1]} features, the model expects {model.n_features}")
    X = table.X if args.limit <= 0 else table.X[: args.limit]
    report = bench_inference(model, X, args.repetitions)
    _write_text("".join(f"{k},{v!r}\n" for k, v in report.items()), args.out)


COMMANDS = {
    "synth": cmd_synth, "features": cmd_features, "train": cmd_train, "prune": cmd_prune,
    "sweep": cmd_sweep, "eval": cmd_eval, "bench": cmd_bench,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except DataFormatError as exc:
        print(f"eegforest: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgumentError as exc:
        print(f"eegforest: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s")
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "quiet"}
    log.info("config %s", json.dumps(resolved, default=str, sort_keys=True))
    try:
        COMMANDS[args.command](args)
    except CapacityError as exc:
        print(f"eegforest: capacity: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (DataFormatError, CompactFormatError, CorruptionError, OSError) as exc:
        print(f"eegforest: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgumentError as exc:
        print(f"eegforest: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
