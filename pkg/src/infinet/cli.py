"""``infinet`` command line: verification suites, demo comparison, train/eval/params.

Exit codes: 0 success, 1 a check failed, 2 usage error or missing input.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checks
from .data import DataFormatError, load_cifar10_dir, synth_blobs
from .interaction import ABLATION_KINDS, enumerate_monomials, interaction_dim, parse_kind
from .model import FAMILY, build_model, count_parameters, get_variant, load_checkpoint
from .tensor import precision_from_env
from .training import TrainConfig, evaluate, train

log = logging.getLogger("infinet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# data helpers

SYNTH_VAL_SEED = 10_001


def load_data(spec: str, size: int, per_class: int, val_per_class: int, seed: int = 1):
    """``synth`` or a CIFAR-10 binary directory/file -> (train, val)."""
    if spec == "synth":
        train_set = synth_blobs(10, per_class, size, size, seed=seed)
        val_set = synth_blobs(10, val_per_class, size, size, seed=SYNTH_VAL_SEED + seed)
        return train_set, val_set
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"data path {spec!r} does not exist")
    try:
        return load_cifar10_dir(path)
    except (DataFormatError, FileNotFoundError) as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# subcommands

def cmd_dim(args) -> int:
    try:
        d = interaction_dim(args.n, args.k)
    except OverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if not args.verify:
        print(d)
        return EXIT_OK
    try:
        count = len(enumerate_monomials(args.n, args.k))
    except ValueError as exc:
        print(f"{d} SKIPPED ({exc})")
        return EXIT_FAIL
    ok = count == d
    print(f"{d} {'MATCH' if ok else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_kernel_check(args) -> int:
    results = checks.kernel_suites(args.trials, args.max_norm, args.series_terms, seed=args.seed,
                                   tol=args.tol)
    if args.per_trial:
        errs = checks.series_errors(args.trials, args.max_norm, args.series_terms, seed=args.seed)
        for i, e in enumerate(errs):
            print(f"trial {i} series_err={e!r}")
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    results = checks.gradcheck_suite(args.scope, seeds=args.seeds)
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_demo_compare(args) -> int:
    dtype = precision_from_env("f32")
    if args.data == "synth":
        train_set, val_set = checks.demo_data(args.image_size, args.per_class, args.val_per_class)
    else:
        train_set, val_set = load_data(args.data, args.image_size, 0, 0)
        if not val_set:
            raise UsageError(f"{args.data}: demo-compare needs a test_batch.bin for validation")
    report = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    rows = checks.demo_compare(train_set, val_set, epochs=args.epochs, seeds=range(args.seeds),
                               width=args.width, batch_size=args.batch, lr=args.lr, dtype=dtype,
                               kinds=args.kinds, parallel=args.parallel, progress=report)
    out = Path(args.out)
    with out.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "seed", "final_val_acc"])
        for kind, seed, acc in rows:
            w.writerow([kind, seed, repr(acc)])
    medians = checks.median_by_kind(rows)
    order = sorted(medians, key=medians.get)
    for kind in order:
        print(f"{kind:10s} median_val_acc={medians[kind]:.4f}")
    print("ordering: " + " < ".join(order))
    return EXIT_OK


def _model_for(args, dtype):
    cfg = get_variant(args.variant, kind=parse_kind(args.kind))
    return cfg, build_model(cfg, seed=args.seed, dtype=dtype)


def cmd_train(args) -> int:
    dtype = precision_from_env("f32")
    cfg, model = _model_for(args, dtype)
    train_set, val_set = load_data(args.data, cfg.input_size, args.per_class, args.val_per_class, args.seed + 1)
    if args.data != "synth" and cfg.input_size != 32:
        raise UsageError(f"variant {cfg.variant} expects {cfg.input_size}px inputs; CIFAR-10 is 32px")
    tc = TrainConfig(total_epochs=args.epochs, batch_size=args.batch, seed=args.seed, base_lr=args.lr,
                     augment=args.augment, parallel=args.parallel)
    ckpt = Path(args.checkpoint)
    metrics = Path(args.metrics) if args.metrics else ckpt.with_suffix(".csv")
    result = train(model, train_set, tc, val=val_set or None, checkpoint=ckpt, metrics=metrics)
    for r in result.rows:
        print(f"epoch {r.epoch} loss {r.train_loss:.4f} train_acc {r.train_acc:.4f} "
              f"val_acc {'-' if r.val_acc is None else f'{r.val_acc:.4f}'}")
    print(f"checkpoint {ckpt}")
    print(f"metrics {metrics}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dtype = precision_from_env("f32")
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists() or not Path(str(path) + ".json").exists():
            raise UsageError(f"checkpoint {path} (or its .json sidecar) not found")
        model = load_checkpoint(path, dtype=dtype)
        size = getattr(getattr(model, "config", None), "input_size", 32)
    else:
        cfg, model = _model_for(args, dtype)
        size = cfg.input_size
    if args.data == "synth":
        dataset = synth_blobs(10, args.per_class, size, size, seed=SYNTH_VAL_SEED + args.seed)
    else:
        train_set, val_set = load_data(args.data, size, 0, 0)
        dataset = val_set or train_set
    acc = evaluate(model, dataset)
    print(f"accuracy {acc:.4f} n={len(dataset)}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = get_variant(args.variant)
    counts = count_parameters(cfg)
    for part, n in counts.items():
        if part != "total":
            print(f"{part:8s} {n:>12,d}")
    print(f"{'total':8s} {counts['total']:>12,d}  ({counts['total'] / 1e6:.2f}M)")
    if args.all:
        for name in FAMILY:
            print(f"{name:8s} {count_parameters(get_variant(name))['total']:>12,d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infinet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("dim", help="dimension of the k-order interaction space")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--k", type=_positive, required=True)
    s.add_argument("--verify", action="store_true", help="cross-check by monomial enumeration")
    s.set_defaults(func=cmd_dim)

    s = sub.add_parser("kernel-check", help="RBF series, symmetry, range and Gram PSD suites")
    s.add_argument("--trials", type=_positive, default=100)
    s.add_argument("--max-norm", type=float, default=2.0)
    s.add_argument("--series-terms", type=_nonneg, default=20)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-trial", action="store_true", help="print the series error of every trial")
    s.set_defaults(func=cmd_kernel_check)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--scope", choices=["layers", "interact", "block", "model"], default="layers")
    s.add_argument("--seeds", type=_positive, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("demo-compare", help="train the five demo-net variants and compare")
    s.add_argument("--data", default="synth")
    s.add_argument("--epochs", type=_nonneg, default=10)
    s.add_argument("--seeds", type=_positive, default=3)
    s.add_argument("--out", default="demo_compare.csv")
    s.add_argument("--width", type=_positive, default=checks.DEMO_WIDTH)
    s.add_argument("--batch", type=_positive, default=checks.DEMO_BATCH)
    s.add_argument("--lr", type=float, default=checks.DEMO_LR)
    s.add_argument("--image-size", type=_positive, default=checks.DEMO_IMAGE_SIZE)
    s.add_argument("--per-class", type=_nonneg, default=checks.DEMO_TRAIN_PER_CLASS)
    s.add_argument("--val-per-class", type=_nonneg, default=checks.DEMO_VAL_PER_CLASS)
    s.add_argument("--kinds", nargs="+", choices=list(ABLATION_KINDS), default=list(ABLATION_KINDS))
    s.add_argument("--parallel", type=_nonneg, default=0)
    s.set_defaults(func=cmd_demo_compare)

    for name, func, help_ in (("train", cmd_train, "train a model variant"),
                              ("eval", cmd_eval, "evaluate a checkpoint (or a fresh model)")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--variant", default="micro")
        s.add_argument("--kind", default="rbf")
        s.add_argument("--data", default="synth")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--per-class", type=_nonneg, default=100)
        s.add_argument("--checkpoint", default="infinet.ckpt" if name == "train" else None)
        if name == "train":
            s.add_argument("--epochs", type=_nonneg, default=10)
            s.add_argument("--batch", type=_positive, default=64)
            s.add_argument("--lr", type=float, default=None)
            s.add_argument("--metrics", default=None)
            s.add_argument("--val-per-class", type=_nonneg, default=20)
            s.add_argument("--augment", action="store_true")
            s.add_argument("--parallel", type=_nonneg, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("params", help="parameter count of a variant")
    s.add_argument("--variant", default="tiny")
    s.add_argument("--all", action="store_true", help="also list the whole T/S/B/L/XL family")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
