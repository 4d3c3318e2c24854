"""Command-line entry point: ``cacseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgtext
from .ablation import SUITES, rows_csv, run_suite
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .data import Dataset, FormatError, SceneSpec, SpecError, generate, read_dataset, write_dataset
from .gradcheck import op_checks, stop_gradient_check, total_loss_check
from .losses import LossConfigError
from .timing import time_overhead
from .train import EVAL_MODES, RunConfig, TrainingDiverged, evaluate, metrics_csv, train

log = logging.getLogger("cacseg")

DEFAULT_COUNT = 512
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"
RESOLVED_CONFIG_NAME = "config.resolved"

RUNTIME_ERRORS = (OSError, FormatError, CheckpointFormatError, cfgtext.ConfigError, SpecError,
                  LossConfigError, TrainingDiverged, ValueError)


def _read_spec(path) -> tuple[SceneSpec, int]:
    schema = dict(asdict(SceneSpec()), count=DEFAULT_COUNT)
    values = cfgtext.coerce(cfgtext.parse(Path(path).read_text()), schema)
    count = values.pop("count", DEFAULT_COUNT)
    spec = SceneSpec(**values)
    spec.validate()
    return spec, count


def cmd_gen_data(args) -> int:
    spec, count = _read_spec(args.spec)
    out = Path(args.out)
    write_dataset(out, generate(spec, count), spec.h, spec.w, spec.n_classes)
    resolved = cfgtext.dump(dict(asdict(spec), count=count))
    out.with_name(out.name + ".spec").write_text(resolved)
    print(f"wrote {count} samples to {out}")
    return 0


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else RunConfig.loads(Path(path).read_text())


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_set, val_set = read_dataset(args.data), read_dataset(args.val)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG_NAME).write_text(cfg.dumps())
    ckpt, rows = train(cfg, train_set, val_set)
    save_checkpoint(out_dir / CHECKPOINT_NAME, ckpt)
    (out_dir / METRICS_NAME).write_text(metrics_csv(rows, train_set.n_classes))
    last = rows[-1]
    print(f"epoch {last.epoch} val mIoU ({last.mode}) {last.miou:.4f}; wrote {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    row = evaluate(ckpt, dataset, args.mode)
    sys.stdout.write(metrics_csv([replace(row, split="eval")], dataset.n_classes))
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    print("== tensor operations")
    for name, report in op_checks(args.seed).items():
        _, _, err = report.worst
        print(f"{name:<20} {'PASS' if report.passed else 'FAIL'}  worst rel err {err:.3e}")
        ok &= report.passed
    print("== total loss (all terms, class-wise entropy KL): encoder, C, theta_p")
    report = total_loss_check(args.seed)
    print(report.format())
    ok &= report.passed
    print("== stop-gradient: d(kl)/d(theta_y) must be exactly zero")
    grads = stop_gradient_check(args.seed)
    for name, g in grads["kl"].items():
        peak = float(abs(g).max())
        print(f"{name:<16} max |grad| {peak!r}  {'PASS' if peak == 0.0 else 'FAIL'}")
        ok &= peak == 0.0
    live = max(float(abs(g).max()) for g in grads["ce_y"].values())
    print(f"ce_y reaches theta_y: max |grad| {live:.3e}  {'PASS' if live > 0 else 'FAIL'}")
    ok &= live > 0
    print("gradcheck " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


def _split_for_val(dataset: Dataset) -> tuple[Dataset, Dataset]:
    cut = max(1, (4 * len(dataset)) // 5)
    if cut >= len(dataset):
        raise ValueError("dataset too small to hold out a validation split; pass --val")
    head = Dataset(dataset.samples[:cut], dataset.h, dataset.w, dataset.n_classes)
    tail = Dataset(dataset.samples[cut:], dataset.h, dataset.w, dataset.n_classes)
    return head, tail


def cmd_ablate(args) -> int:
    data = read_dataset(args.data)
    if args.val:
        train_set, val_set = data, read_dataset(args.val)
    else:
        train_set, val_set = _split_for_val(data)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ValueError("--seeds must list at least one seed")
    extra = {} if args.epochs is None else {"epochs": args.epochs}
    out = Path(args.out)
    rows = run_suite(args.suite, train_set, val_set, seeds, config_dir=out.with_name(out.name + ".configs"),
                     on_row=lambda r: print(f"{r.suite} {r.variant:<8} seed {r.seed} mIoU "
                                            f"({r.eval_mode}) {r.miou[r.eval_mode]:.4f}", flush=True),
                     **extra)
    out.write_text(rows_csv(rows))
    return 0


def cmd_time(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    result = time_overhead(ckpt, read_dataset(args.data), args.repeats)
    print(result.format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacseg", description="Context-aware classifier experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--spec", required=True, help="scene spec file (key = value)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoint + metrics")
    p.add_argument("--config", help="run config file; defaults apply when omitted")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=EVAL_MODES, default="estimated")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation set; defaults to the last fifth of --data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("time", help="inference overhead of the context-aware head")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=50)
    p.set_defaults(func=cmd_time)
    return parser


def _thread_limit():
    raw = os.environ.get("CAC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise cfgtext.ConfigError(f"CAC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise cfgtext.ConfigError(f"CAC_THREADS must be a positive integer, got {raw!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"cacseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
