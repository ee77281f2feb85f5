"""Command-line entry point: ``iss <subcommand> [flags]``.

Every subcommand also accepts ``--config file.json`` whose keys mirror the
flag names; explicit flags override the file.  The resolved configuration is
echoed to stderr as JSON, results go to stdout.

Exit codes: 0 success, 1 usage or parameter error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import analysis, harness
from . import poisongen as pg
from .dataset import (
    DataError,
    LabeledDataset,
    SplitSpec,
    load_cifar_binary,
    load_cifar_dir,
    mark_poisoned,
    read_itf1,
    subset,
    write_cifar_binary,
    write_itf1,
)
from .imageops import apply_op, parse_op
from .tinynet import (
    NumericalError,
    ShapeError,
    TrainConfig,
    adversarial_train,
    evaluate,
    init_model,
    load_model,
    save_model,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_DATA_DIR = os.environ.get("ISS_CIFAR_DIR", "cifar-10-batches-bin")

log = logging.getLogger("iss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers ---------------------------------------------------------------------------

def _is_itf1(path: str) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == b"ITF1"


def _load_labeled(path: str) -> LabeledDataset:
    if _is_itf1(path):
        raise DataError(f"{path}: ITF1 files carry no labels; give a CIFAR-format binary")
    return load_cifar_binary(path)


def _train_cfg(args, preprocess=None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       momentum=args.momentum, lr_schedule=args.lr_schedule,
                       weight_decay=args.weight_decay, seed=args.seed,
                       augment=getattr(args, "augment", None), preprocess=preprocess)


def _arch(name: str):
    return harness._arch_by_name(name)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=pg._json_default) + "\n")


# --- subcommands -------------------------------------------------------------------------

def cmd_ingest(args) -> None:
    ds = load_cifar_dir(args.data_dir, train=args.split == "train")
    if args.count:
        ds, _ = subset(ds, SplitSpec(args.count, 0, not args.unbalanced, args.seed))
    write_cifar_binary(args.out, ds)
    _emit({"out": args.out, "count": len(ds), "class_counts": ds.class_counts().tolist()})


def cmd_poison(args) -> None:
    ds = _load_labeled(args.input)
    if args.class_id is not None:
        ds = mark_poisoned(ds, class_id=args.class_id)
    else:
        ds = mark_poisoned(ds, fraction=args.fraction, seed=args.seed)
    params = {"eps": args.eps} if args.eps is not None else {}
    if args.method == "lsp":
        params["patch_size"] = args.patch_size
    for key in ("pgd_steps", "pgd_step_size", "outer_iters", "stop_loss"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    cfg = _train_cfg(args)
    arch = _arch(args.arch)
    if args.method in ("hypo", "tap") and args.surrogate:
        surrogate = load_model(args.surrogate)
        budget = harness.budget_from(params)
        if args.method == "hypo":
            pert = pg.error_min_poison(ds, surrogate, budget, "hypo", seed=args.seed)
        else:
            pert = pg.targeted_adv_poison(ds, surrogate, budget)
    else:
        pert = harness.make_poison(args.method, ds, args.seed, params, arch, cfg)
    pg.save_perturbation(args.out, pert, {"source": os.path.abspath(args.input)})
    if args.poisoned_out:
        write_cifar_binary(args.poisoned_out, pg.apply_perturbation(ds, pert))
    _emit({**pert.sidecar(), "out": args.out, "budget_ok": bool(pert.budget_ok().all())})


def cmd_compress(args) -> None:
    op = parse_op(args.op)
    if _is_itf1(args.input):
        images = read_itf1(args.input)
        write_itf1(args.out, apply_op(op, images))
        n = len(images)
    else:
        ds = load_cifar_binary(args.input)
        write_cifar_binary(args.out, ds.with_images(apply_op(op, ds.images)))
        n = len(ds)
    _emit({"op": str(op), "count": n, "out": args.out})


def cmd_train(args) -> None:
    ds = _load_labeled(args.input)
    op = parse_op(args.op) if args.op else None
    cfg = _train_cfg(args, op)
    model = init_model(_arch(args.arch), args.seed, np.float32 if args.dtype == "float32" else np.float64)
    if args.adversarial:
        model = adversarial_train(model, ds, cfg, args.at_eps, args.at_steps, args.at_step_size)
    else:
        model = train(model, ds, cfg)
    save_model(args.out, model)
    _emit({"out": args.out, "train_accuracy": evaluate(model, ds, op), "epoch": model.epoch})


def cmd_eval(args) -> None:
    model = load_model(args.model)
    ds = _load_labeled(args.input)
    op = parse_op(args.op) if args.op else None
    _emit({"accuracy": evaluate(model, ds, op), "count": len(ds), "op": args.op})


def cmd_analyze(args) -> None:
    deltas = read_itf1(args.input).astype(np.float64)
    report = analysis.spectrum_report(args.method, deltas)
    rows = [(args.method, args.seed, r, s) for r, s in zip(report.per_image_ratios, report.per_image_spreads)]
    sys.stdout.write(analysis.spectrum_csv(rows))
    if args.png_dir:
        os.makedirs(args.png_dir, exist_ok=True)
        for i, d in enumerate(deltas[: args.png_count]):
            with open(os.path.join(args.png_dir, f"{args.method}_{i:04d}.png"), "wb") as f:
                f.write(analysis.export_png(d))
    log.info("mean ratio %.4f, mean spread %.4f", report.mean_high_freq_ratio, report.mean_channel_spread)


def matrix_specs(cfg: dict) -> list[harness.ExperimentSpec]:
    """Specs from a matrix config: either explicit ``specs`` or one row per ``poisons`` entry."""
    if "specs" in cfg:
        return [harness.ExperimentSpec.from_dict(s) for s in cfg["specs"]]
    common = {k: v for k, v in cfg.items() if k in harness.ExperimentSpec.__dataclass_fields__}
    params = cfg.get("poison_params", {})
    return [harness.ExperimentSpec.from_dict({**common, "poison": p, "poison_params": params.get(p, {})})
            for p in cfg["poisons"]]


def cmd_matrix(args) -> None:
    if not args.config:
        raise UsageError("matrix needs --config")
    with open(args.config) as f:
        cfg = json.load(f)
    specs = matrix_specs(cfg)
    report = harness.run_matrix(specs, load_cifar_dir(args.data_dir, True),
                                load_cifar_dir(args.data_dir, False), jobs=args.jobs)
    csv_text = report.to_csv()
    sys.stdout.write(csv_text)
    if args.out_csv:
        with open(args.out_csv, "w") as f:
            f.write(csv_text)
    if args.out_json:
        with open(args.out_json, "w") as f:
            f.write(report.to_json())


def cmd_diagnose(args) -> None:
    params = {"eps": args.eps} if args.eps is not None else {}
    spec = harness.ExperimentSpec(poison=args.method, poison_params=params, arch=_arch(args.arch),
                                  train_cfg=_train_cfg(args), seeds=(args.seed,),
                                  train_count=args.train_count, test_count=args.test_count)
    res = harness.poisoned_test_diagnostic(spec, load_cifar_dir(args.data_dir, True),
                                           load_cifar_dir(args.data_dir, False), args.seed, args.iss)
    _emit({"method": args.method, "seed": args.seed, "poisoned_test": res.acc_poisoned_test,
           "clean_test": res.acc_clean_test, "iss_poisoned_test": res.acc_iss_poisoned_test,
           "iss": res.iss})


# --- parser ----------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p):
    p.add_argument("--arch", default="mlp", choices=["linear", "mlp", "cnn"])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lr-schedule", default="cosine", choices=["cosine", "constant"])
    p.add_argument("--weight-decay", type=float, default=5e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iss", description="Availability poisons and image-compression countermeasures.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="write a (balanced) CIFAR-format subset")
    _common(p)
    p.add_argument("--data-dir", default=DEFAULT_DATA_DIR)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--unbalanced", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("poison", help="generate perturbations for a CIFAR-format file")
    _common(p)
    _training(p)
    p.add_argument("--method", required=True, choices=[m for m in harness.POISONS if m != "none"])
    p.add_argument("--eps", type=float)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--pgd-steps", type=int)
    p.add_argument("--pgd-step-size", type=float)
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--stop-loss", type=float)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--class-id", type=int)
    p.add_argument("--surrogate", help="ITM1 model for hypo/tap (trained on the input if omitted)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="ITF1 perturbation file; a .json sidecar is written next to it")
    p.add_argument("--poisoned-out", help="also write the poisoned set as a CIFAR-format binary")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("compress", help="apply a compression op to ITF1 or CIFAR-format images")
    _common(p)
    p.add_argument("--op", required=True, help="e.g. gray, jpeg:10, bdr:2, median, gray+jpeg:10")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="train a model on a CIFAR-format file")
    _common(p)
    _training(p)
    p.add_argument("--op", help="countermeasure applied to training images")
    p.add_argument("--augment", choices=["cutout", "cutmix", "mixup"])
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--at-eps", type=float, default=8.0)
    p.add_argument("--at-steps", type=int, default=10)
    p.add_argument("--at-step-size", type=float, default=2.0)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of an ITM1 model on a CIFAR-format file")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--op")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-image spectrum CSV for an ITF1 perturbation file")
    _common(p)
    p.add_argument("--method", default="unknown")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--png-dir")
    p.add_argument("--png-count", type=int, default=10)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("matrix", help="run a poison x countermeasure matrix")
    _common(p)
    p.add_argument("--data-dir", default=DEFAULT_DATA_DIR)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("diagnose", help="poisoned-test diagnostic for one poison")
    _common(p)
    _training(p)
    p.add_argument("--method", required=True, choices=[m for m in harness.POISONS if m != "none"])
    p.add_argument("--eps", type=float)
    p.add_argument("--iss", help="countermeasure applied to the poisoned test set")
    p.add_argument("--train-count", type=int, default=5000)
    p.add_argument("--test-count", type=int, default=2000)
    p.add_argument("--data-dir", default=DEFAULT_DATA_DIR)
    p.set_defaults(func=cmd_diagnose)
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config and command and command != "matrix":
        with open(known.config) as f:
            file_cfg = json.load(f)
        sub = subparsers[command]
        known_dests = {a.dest for a in sub._actions}
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(file_cfg) - known_dests)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in file_cfg:
                action.required = False
        sub.set_defaults(**file_cfg)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"iss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"iss: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps({"resolved_config": resolved}, sort_keys=True), file=sys.stderr)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except UsageError as exc:
        print(f"iss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"iss: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, OSError) as exc:
        print(f"iss: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"iss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
