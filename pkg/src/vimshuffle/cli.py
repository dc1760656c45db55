"""Single executable: train, pretrain, bench, gradcheck, eval, synth-data, ab-experiment.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure (including a
NaN-loss abort).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .bench import BenchTimingError, format_report, run_bench, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .config import ConfigError, TrainConfig, ab_experiment_config, load_config
from .data import DatasetFormatError, synthesize, write_records
from .gradcheck import format_results, run_battery
from .train import (InterruptedTraining, NanLossError, build_model, evaluate,
                    load_train_eval, overfit_ab_experiment, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sp) -> None:
    sp.add_argument("--config", default=None, help="JSON config file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable, dotted paths)")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")
    sp.add_argument("--out", default="out", help="output directory")
    sp.add_argument("--serial", action="store_true",
                    help="strict serial mode (bitwise-deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vimshuffle",
                     description="Vision Mamba training with layer-wise shuffle regularization")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("train", help="supervised classification training"))
    _add_common(sub.add_parser("pretrain", help="masked feature distillation pre-training"))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")

    p = sub.add_parser("bench", help="throughput benchmark, shuffle on vs off")
    _add_common(p)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seq-lens", default="64,196,576,1024",
                   help="comma-separated patch-token counts (square grids)")
    p.add_argument("--no-worst-case", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    _add_common(p)

    p = sub.add_parser("synth-data", help="write a synthetic dataset file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output .bin file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--serial", action="store_true")

    p = sub.add_parser("ab-experiment", help="overfitting A/B: shuffle on vs off")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of paired runs")

    return parser


def _load_cfg(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = load_config(args.config, args.set, base=base)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args, mode: str) -> int:
    cfg = dataclasses.replace(_load_cfg(args), mode=mode)
    result = train(cfg, args.out, serial=args.serial)
    if mode == "mfd":
        print(f"pretrain: {cfg.epochs} epochs, final loss {result.final_train_loss:.4f} "
              f"-> {result.metrics_path}")
    else:
        print(f"train: {cfg.epochs} epochs, final eval top1 {result.final_eval_top1:.4f} "
              f"-> {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model = build_model(cfg)
    loaded = load_checkpoint(args.ckpt)
    loaded = {k: v for k, v in loaded.items() if not k.startswith("ema.")}
    load_into(model.named_parameters(), loaded)
    _, eval_ds = load_train_eval(cfg, serial=args.serial)
    loss, top1 = evaluate(model, eval_ds, cfg.batch_size)
    print(f"eval: loss {loss:.4f}, top1 {top1:.4f} on {len(eval_ds)} samples")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    seq_lens = tuple(int(s) for s in args.seq_lens.split(","))
    report = run_bench(cfg.model, seq_lens=seq_lens, batch=args.batch,
                       iters=args.iters, warmup=args.warmup, slws=cfg.slws,
                       seed=cfg.seed, include_worst_case=not args.no_worst_case)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"
    write_bench_csv(report, csv_path)
    print(format_report(report))
    worst = max(r.overhead_pct for r in report.rows)
    print(f"bench: max throughput loss {worst:.2f}% -> {csv_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_battery()
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} ops within threshold")
    return 0 if not failed else 2


def _cmd_synth_data(args) -> int:
    images, labels = synthesize(args.n, args.seed, serial=args.serial)
    write_records(args.out, images, labels)
    size = Path(args.out).stat().st_size
    print(f"synth-data: wrote {args.n} records ({size} bytes) to {args.out}")
    return 0


def _cmd_ab(args) -> int:
    cfg = _load_cfg(args, base=ab_experiment_config())
    seeds = [cfg.seed + i for i in range(args.seeds)]
    report = overfit_ab_experiment(cfg, seeds, args.out, serial=args.serial)
    base, reg = report.summary["baseline"], report.summary["slws"]
    print(f"ab-experiment: baseline train loss {base['train_loss']:.4f} "
          f"eval top1 {base['eval_top1']:.4f} | slws train loss {reg['train_loss']:.4f} "
          f"eval top1 {reg['eval_top1']:.4f} -> {report.report_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "train":
            return _cmd_train(args, "supervised")
        if args.command == "pretrain":
            return _cmd_train(args, "mfd")
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        if args.command == "ab-experiment":
            return _cmd_ab(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NanLossError, InterruptedTraining, BenchTimingError, DatasetFormatError,
            CheckpointError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
