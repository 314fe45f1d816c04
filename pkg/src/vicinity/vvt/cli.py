# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

"""
vvt command line: verify, report, bench, train, eval.
Exit codes: 0 success, 1 failed verification or run, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import Optional, Sequence, List

import torch

from . import __version__
from .attention import AttentionMode
from .backbone import variant_spec
from .bench import sweep, write_csv, fit_slopes, to_json as bench_json
from .checkpoint import load_checkpoint
from .config import RunConfig, TrainConfig, VARIANT_NAMES
from .data import build_datasets, default_data_dir
from .error import ConfigError, DatasetError, CheckpointError, DivergenceError, GridError, CapacityError, UnsupportedModeError
from .flops import flop_model, fr_sweep
from .train import build_model, train, evaluate_top1, compare_modes, format_comparison, CONFIG_FILE
from .util import dataclass_factory_filter_empty
from .verify import run_all, format_summary

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _mode(value: str) -> AttentionMode:
    try:
        return AttentionMode(value)
    except ValueError:
        raise argparse.ArgumentTypeError('unknown mode "%s". Valid modes: %s' % (value, ", ".join(m.value for m in AttentionMode)))


def _modes(value: str) -> tuple:
    return tuple(_mode(v.strip()) for v in value.split(",") if v.strip())


def _ints(value: str) -> tuple:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma-separated integers, got "%s"' % value)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError('expected "on" or "off", got "%s"' % value)
    return value == "on"


def cmd_verify(precision: str = "double", seed: int = 0, cases: int = 100, as_json: bool = False) -> int:
    reports = run_all(precision=precision, seed=seed, cases=cases)
    if as_json:
        print(json.dumps([{
            "suite": r.name,
            "passed": r.passed,
            "checks": [asdict(c) for c in r.results]
        } for r in reports], indent=2))
    else:
        print(format_summary(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_report(run: RunConfig, fpc: bool = True, fr_ratio: Optional[int] = None, class_count: int = 1000,
               fr_ratios: Sequence[int] = (), as_json: bool = False) -> int:
    spec = variant_spec(run.variant, mode=run.mode, fpc_enabled=fpc)
    if fr_ratio is not None:
        spec = spec.with_fr_ratio(fr_ratio)
        spec.validate()
    report = flop_model(spec, run.mode, run.resolution, class_count=class_count)
    if as_json:
        data = asdict(report.to_json(), dict_factory=dataclass_factory_filter_empty)
        if fr_ratios:
            data["fr_sweep"] = [{"fr_ratio": r, "params": p, "gflops": g} for r, p, g in fr_sweep(spec, fr_ratios, run.resolution, run.mode, class_count)]
        print(json.dumps(data, indent=2))
        return EXIT_OK

    print("variant %s, mode %s, FPC %s, input %dx%d" % (spec.name, run.mode.value, "on" if fpc else "off", run.resolution, run.resolution))
    print("params      %d (%.2f M)" % (report.params, report.params / 1e6))
    print("GFLOPs      %.3f (MACs %.3f G + elementwise %.3f G)" % (report.gflops, report.macs / 1e9, report.elementwise / 1e9))
    print("GFLOPs x2   %.3f" % report.flops_2x)
    print("attention   %.4f GMACs" % report.attention_gflops)
    for k in range(len(spec.stages)):
        stage = report.stage_total(k)
        print("  stage %d   %.3f GMACs, %.3f G elementwise" % (k + 1, stage.macs / 1e9, stage.elementwise / 1e9))
    print("convention: %s" % report.convention)
    if fr_ratios:
        print("%8s %14s %10s" % ("fr_ratio", "params", "GFLOPs"))
        for r, p, g in fr_sweep(spec, fr_ratios, run.resolution, run.mode, class_count):
            print("%8d %14d %10.3f" % (r, p, g))
    return EXIT_OK


def cmd_bench(run: RunConfig, channel_divisor: int = 1, batch: int = 1, max_bytes: Optional[int] = None,
              timed: bool = True, json_path: Optional[str] = None) -> int:
    spec = variant_spec(run.variant)
    if channel_divisor != 1:
        spec = spec.scaled(channel_divisor)
    modes = run.modes or (AttentionMode.VICINITY_2D, AttentionMode.SOFTMAX_ORACLE)
    torch.manual_seed(run.seed)
    points = sweep(spec, modes, run.resolutions, run.repeats, seed=run.seed, batch=batch, max_bytes=max_bytes, timed=timed)

    out = run.output_path or "bench.csv"
    with open(out, "w", encoding="utf-8", newline="") as f:
        write_csv(points, f)
    if json_path:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(asdict(bench_json(spec, points, run.repeats)), f, indent=1)

    print("wrote %d rows to %s" % (len(points), out))
    for name, slope in sorted(fit_slopes(points).items()):
        print("slope %-28s %.3f" % (name, slope))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed,
        "mode": getattr(args, "mode", None),
        "fpc": getattr(args, "fpc", None),
        "fr_ratio": getattr(args, "fr", None),
        "total_epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "out_dir": getattr(args, "out", None),
    }
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    config.validate()
    return config


def cmd_train(config: TrainConfig, data_dir: Optional[str] = None, compare: Sequence[AttentionMode] = ()) -> int:
    train_set, val_set = build_datasets(config.dataset, seed=config.seed, data_dir=data_dir)
    if compare:
        rows = compare_modes(config, compare, train_set, val_set, out_dir=config.out_dir)
        print(format_comparison(rows))
        return EXIT_OK
    model = build_model(config, train_set.class_count)
    result = train(model, train_set, config, val_set)
    last = result.log[-1]
    print("epochs %d, first loss %.4f, final loss %.4f, val top-1 %s" % (
        last.epoch, result.initial_loss, result.final_loss, "-" if last.val_top1 is None else "%.4f" % last.val_top1))
    print("log %s" % result.log_path)
    print("checkpoint %s" % result.checkpoint_dir)
    return EXIT_OK


def cmd_eval(checkpoint_dir: str, config: Optional[TrainConfig] = None, data_dir: Optional[str] = None,
             split: str = "val", mode: Optional[AttentionMode] = None) -> int:
    """ mode re-evaluates the trained parameters under another attention mode """
    if config is None:
        # train writes config.json next to the checkpoint directory
        path = os.path.join(os.path.dirname(os.path.normpath(checkpoint_dir)), CONFIG_FILE)
        if not os.path.isfile(path):
            raise ConfigError("No --config given and %s does not exist" % path)
        config = TrainConfig.from_file(path)
    spec, model = load_checkpoint(checkpoint_dir, mode)
    train_set, val_set = build_datasets(config.dataset, seed=config.seed, data_dir=data_dir)
    dataset = train_set if split == "train" else val_set
    print("top-1 %.6f on %d %s samples, mode %s" % (evaluate_top1(model, dataset), len(dataset), split, spec.mode.value))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vvt", description="Vicinity Vision Transformer tools")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: 0, or the config file value)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="Run the oracle, invariant and gradient suites")
    p.add_argument("--precision", choices=("double", "single"), default="double",
                   help="Oracle/invariant precision; single relaxes the tolerance to 1e-3. Gradients always run in double")
    p.add_argument("--cases", type=int, default=100, help="Random oracle-equivalence cases (default: 100)")
    p.add_argument("--json", action="store_true", help="Machine-readable output")

    p = sub.add_parser("report", parents=[common], help="Print parameter count and analytic GFLOPs")
    p.add_argument("--variant", choices=VARIANT_NAMES, default="tiny")
    p.add_argument("--res", type=int, default=224, help="Input side in pixels, a multiple of 32 (default: 224)")
    p.add_argument("--mode", type=_mode, default=AttentionMode.VICINITY_2D, help="Attention mode (default: vicinity2d)")
    p.add_argument("--fpc", type=_on_off, default=True, help="Feature Preserving Connection on|off (default: on)")
    p.add_argument("--fr", type=int, default=None, help="Feature-reduction ratio override")
    p.add_argument("--classes", type=int, default=1000, help="Classifier width (default: 1000)")
    p.add_argument("--fr-sweep", type=_ints, default=(), help="Also tabulate these FR ratios, e.g. 1,2,4,8")
    p.add_argument("--json", action="store_true", help="Machine-readable output")

    p = sub.add_parser("bench", parents=[common], help="Resolution sweep: analytic GFLOPs and measured forward time")
    p.add_argument("--variant", choices=VARIANT_NAMES, default="tiny")
    p.add_argument("--modes", type=_modes, default=(AttentionMode.VICINITY_2D, AttentionMode.SOFTMAX_ORACLE),
                   help="Comma-separated modes (default: vicinity2d,softmax)")
    p.add_argument("--res", type=_ints, default=(64, 128, 192, 256, 320), help="Comma-separated input sides")
    p.add_argument("--repeats", type=int, default=3, help="Timed forward passes per point, at least 3")
    p.add_argument("--channel-divisor", type=int, default=1, help="Shrink every stage's channels by this factor")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--max-bytes", type=int, default=None, help="Record points over this activation estimate as OOM")
    p.add_argument("--analytic-only", action="store_true", help="Skip the timed forward passes")
    p.add_argument("--out", default="bench.csv", help="CSV output path (default: bench.csv)")
    p.add_argument("--json", default=None, help="Optional JSON report path")

    for name, help_text in (("train", "Train a model from a JSON config"), ("eval", "Top-1 accuracy of a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")
        p.add_argument("--data-dir", default=None, help="CIFAR directory (default: $VVT_DATA_DIR)")
        if name == "train":
            p.add_argument("--mode", type=_mode, default=None, help="Attention mode override")
            p.add_argument("--fpc", type=_on_off, default=None, help="Feature Preserving Connection on|off override")
            p.add_argument("--fr", type=int, default=None, help="Feature-reduction ratio override")
            p.add_argument("--epochs", type=int, default=None, help="total_epochs override")
            p.add_argument("--lr", type=float, default=None, help="lr override")
            p.add_argument("--out", default=None, help="out_dir override")
            p.add_argument("--compare", type=_modes, default=(), help="Train once per listed mode and print a comparison table")
        else:
            p.add_argument("--mode", type=_mode, default=None,
                           help="Evaluate under this attention mode instead of the trained one")
            p.add_argument("--checkpoint", required=True, help="Checkpoint directory")
            p.add_argument("--split", choices=("train", "val"), default="val")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    seed = 0 if args.seed is None else args.seed
    torch.manual_seed(seed)
    try:
        if args.command == "verify":
            return cmd_verify(args.precision, seed, args.cases, args.json)
        if args.command == "report":
            run = RunConfig(command="report", variant=args.variant, mode=args.mode, resolution=args.res, seed=seed)
            run.validate()
            return cmd_report(run, fpc=args.fpc, fr_ratio=args.fr, class_count=args.classes,
                              fr_ratios=args.fr_sweep, as_json=args.json)
        if args.command == "bench":
            run = RunConfig(command="bench", variant=args.variant, modes=args.modes, resolutions=args.res,
                            repeats=args.repeats, seed=seed, output_path=args.out)
            run.validate()
            return cmd_bench(run, args.channel_divisor, args.batch, args.max_bytes, not args.analytic_only, args.json)
        data_dir = args.data_dir or default_data_dir()
        if args.command == "train":
            return cmd_train(_train_config(args), data_dir, args.compare)
        config = _train_config(args) if args.config else None
        return cmd_eval(args.checkpoint, config, data_dir, args.split, args.mode)
    except ConfigError as ex:
        print("%s: usage error: %s" % (parser.prog, ex.msg), file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, DivergenceError, GridError, CapacityError, UnsupportedModeError) as ex:
        print("%s: %s: %s" % (parser.prog, type(ex).__name__, ex.msg), file=sys.stderr)
        return EXIT_FAILED
