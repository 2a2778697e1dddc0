"""Command-line entry point: ``resboost {train,eval,convert,check}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error or malformed input.
All machine-readable output is JSON.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import checks
from .core_math import DimensionError
from .data_io import DataError, DatasetManifest, DatasetStream, iter_feature_rows, scan_manifest
from .resnet import (
    MODES,
    BoostedResNet,
    CheckpointError,
    TreeModule,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_stream,
)
from .boosting import MaxNormBound, ShrinkageState, make_loss
from .tree import TreeSpecError, classical_predict, import_tree, validate_import_spec

SEED_ENV = "RESBOOST_SEED"
METRICS_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input that should exit with the usage code."""


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _emit(obj, out=None):
    text = _dump(obj)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _eval_split(net, manifest, split):
    return evaluate(net, DatasetStream(manifest, 4096, split, shuffle=False).epoch(0))


# -- train ----------------------------------------------------------------------


def cmd_train(args):
    seed = args.seed if args.seed is not None else _default_seed()
    manifest = scan_manifest(args.data, _label_arg(args.label_column), args.delimiter,
                             not args.no_header, seed)
    config = {
        "data": args.data, "trees": args.trees, "depth": args.depth, "mode": args.mode,
        "eta": args.eta, "theta_lr": args.theta_lr, "lr": args.lr, "epochs": args.epochs,
        "batch_size": args.batch_size, "max_norm": args.max_norm, "temperature": args.temperature,
        "loss": args.loss,
    }
    net = BoostedResNet.build(manifest.n_features, manifest.n_classes, args.trees, args.depth,
                              mode=args.mode, eta=args.eta, theta_lr=args.theta_lr,
                              max_norm=args.max_norm, temperature=args.temperature,
                              loss=args.loss, seed=seed)
    stream = DatasetStream(manifest, args.batch_size, "train", seed=seed)
    if args.epochs > 0:
        report = train_stream(net, stream, args.epochs, seed=seed, lr=args.lr)
    else:
        report = None
    train_acc, _ = _eval_split(net, manifest, "train")
    test_acc, _ = _eval_split(net, manifest, "test")
    metrics = {
        "schema_version": METRICS_VERSION,
        "train_acc": train_acc,
        "test_acc": test_acc,
        "per_epoch_loss": report.per_epoch_loss if report else [],
        "per_epoch_acc": report.per_epoch_acc if report else [],
        "theta_final": net.theta.tolist(),
        "regret_ledger": report.ledger.to_dict() if report else None,
        "n_modules": net.n_modules,
        "classes": manifest.classes,
        "seed": seed,
        "config": config,
    }
    save_checkpoint(net, args.out, {"manifest": manifest.to_dict(), "config": config, "seed": seed})
    _emit(metrics, args.metrics or f"{args.out}.metrics.json")
    print(f"train_acc={train_acc:.4f} test_acc={test_acc:.4f} checkpoint={args.out}", file=sys.stderr)
    return EXIT_OK


def _label_arg(value):
    try:
        return int(value)
    except ValueError:
        return value


# -- eval -----------------------------------------------------------------------


def cmd_eval(args):
    net, doc = load_checkpoint(args.model)
    if "manifest" not in doc:
        raise CheckpointError(f"{args.model} carries no dataset manifest")
    manifest = DatasetManifest.from_dict(doc["manifest"])
    if args.data:
        manifest = manifest.with_path(args.data)
    if manifest.n_features != net.in_width:
        raise DimensionError(f"checkpoint expects {net.in_width} features, manifest has {manifest.n_features}")
    acc, confusion = _eval_split(net, manifest, args.split)
    _emit({
        "schema_version": METRICS_VERSION,
        "split": args.split,
        "accuracy": acc,
        "n": int(confusion.sum()),
        "classes": manifest.classes,
        "confusion": confusion.tolist(),
    }, args.out)
    return EXIT_OK


# -- convert ----------------------------------------------------------------------


def cmd_convert(args):
    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = json.load(fh)
        validate_import_spec(spec)
        tree = import_tree(spec, args.temperature)
    except (json.JSONDecodeError, TreeSpecError) as exc:
        raise UsageError(f"bad tree spec {args.spec}: {exc}") from None
    k, c = tree.n_features, tree.out_width
    # one module, zero projection shortcut: the score is exactly the tree output
    loss = make_loss("softmax", c) if c >= 2 else make_loss("logistic", 2)
    net = BoostedResNet([TreeModule(tree)], np.eye(c), ShrinkageState.zeros(1), "vanilla",
                        [np.zeros((c, k))], MaxNormBound(np.inf), loss)
    save_checkpoint(net, args.out, {"tree_spec": spec})
    result = {"schema_version": METRICS_VERSION, "checkpoint": args.out, "n_nodes": tree.topology.n_nodes,
              "n_features": k, "out_width": c}
    if args.verify:
        rows = mismatched = 0
        drop = None if args.label_column is None else int(args.label_column)
        for X in iter_feature_rows(args.verify, k, args.delimiter, not args.no_header, drop):
            ours, _ = tree.forward_deterministic(X)
            ref, _ = classical_predict(spec, X)
            rows += len(X)
            mismatched += int(np.sum(ours != ref))
        result["verify"] = {"rows": rows, "mismatched": mismatched, "passed": mismatched == 0}
        _emit(result)
        return EXIT_OK if mismatched == 0 else EXIT_FAIL
    _emit(result)
    return EXIT_OK


# -- check ------------------------------------------------------------------------


def cmd_check(args):
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        names = checks.select_checks(args.only)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    reports = checks.run_checks(seed, names, force_fail=args.force_fail)
    passed = all(r.passed for r in reports)
    _emit({"schema_version": METRICS_VERSION, "passed": passed, "seed": seed,
           "checks": [r.to_dict() for r in reports]}, args.out)
    return EXIT_OK if passed else EXIT_FAIL


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="resboost", description="Boosted residual networks of neural decision trees.")
    sub = p.add_subparsers(dest="command", required=True)

    def csv_flags(sp):
        sp.add_argument("--delimiter", default=",")
        sp.add_argument("--no-header", action="store_true", help="first row is data, not column names")

    t = sub.add_parser("train", help="train on a CSV and write a checkpoint plus metrics JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--label-column", default="-1", help="header name or index (default: last column)")
    csv_flags(t)
    t.add_argument("--trees", type=_positive_int, default=15)
    t.add_argument("--depth", type=_positive_int, default=5)
    t.add_argument("--mode", choices=MODES, default="shrinkage")
    t.add_argument("--eta", type=float, default=1.0)
    t.add_argument("--theta-lr", type=float, default=0.01)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--epochs", type=_nonneg_int, default=200)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--max-norm", type=float, default=5.0)
    t.add_argument("--temperature", type=float, default=1.0)
    t.add_argument("--loss", choices=("softmax", "logistic"), default="softmax")
    t.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", default=None, help="metrics path (default: <out>.metrics.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion counts of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", default=None, help="CSV to score (default: the training file)")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("convert", help="classical tree JSON -> single-tree checkpoint")
    c.add_argument("--spec", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--verify", default=None, help="CSV whose rows must route identically")
    c.add_argument("--label-column", default=None, help="column of --verify to ignore")
    csv_flags(c)
    c.set_defaults(func=cmd_convert)

    k = sub.add_parser("check", help="run the property-check suite")
    k.add_argument("--seed", type=int, default=None)
    k.add_argument("--only", action="append", default=None, help="check name or group; repeatable")
    k.add_argument("--out", default=None)
    k.add_argument("--force-fail", action="store_true", help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_check)
    return p


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"resboost: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, DimensionError, ValueError, OSError) as exc:
        print(f"resboost: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
