"""Command-line entry point: ``stepquant <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("stepquant")


class UsageError(Exception):
    pass


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("seed", "strategy", "n_groups", "weight_bits", "act_bits", "calib_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "bits", None) is not None:
        overrides["weight_bits"] = overrides["act_bits"] = args.bits
    if getattr(args, "out_dir", None) is not None:
        overrides["out_dir"] = args.out_dir
    return cfg.replace(**overrides) if overrides else cfg


def _echo(cfg: ExperimentConfig, command: str, out_dir: Path, **extra) -> None:
    """Write the fully resolved configuration next to the run's outputs."""
    pipeline.write_json(out_dir / f"{command}.config.json",
                        {"command": command, "config": cfg.to_dict(), "seed": cfg.seed, **extra})


def _load(path, need_bundle=False):
    if path is None:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(path)
    if need_bundle and ckpt.bundle is None:
        raise UsageError(f"{path} holds no quantized model; run 'calibrate' first")
    return ckpt


def cmd_train(args, cfg, out):
    ckpt, losses = pipeline.train(cfg)
    path = Path(args.output or out / "fp.json")
    save_checkpoint(path, ckpt)
    log.info("trained %d epochs, final loss %.5f -> %s", len(losses),
             losses[-1] if losses else float("nan"), path)
    return {"checkpoint": str(path)}


def cmd_calibrate(args, cfg, out):
    ckpt = _load(args.checkpoint)
    bundle, result = pipeline.calibrate(ckpt.params, cfg)
    ckpt.bundle = bundle
    path = Path(args.output or out / "quant.json")
    save_checkpoint(path, ckpt)
    result.write_logs(out / "logs")
    log.info("assignment %s -> %s", bundle.assignment.to_list(), path)
    return {"checkpoint": str(path), "source": str(args.checkpoint)}


def cmd_sample(args, cfg, out):
    ckpt = _load(args.checkpoint)
    bundle = None if args.full_precision else ckpt.bundle
    points = pipeline.sample(ckpt.params, bundle, cfg, args.n)
    path = Path(args.output or out / "samples.csv")
    pipeline.write_samples(path, points)
    return {"samples": str(path), "source": str(args.checkpoint)}


def cmd_eval(args, cfg, out):
    ckpt = _load(args.checkpoint, need_bundle=True)
    report = pipeline.evaluate_bundle(ckpt.params, ckpt.bundle, cfg, ckpt.seed)
    path = Path(args.output or out / "metrics.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    print(json.dumps({k: getattr(report, k) for k in ("c_error", "g_error", "mmd2", "mmd2_fp")}))
    return {"metrics": str(path), "source": str(args.checkpoint)}


def _ablation_checkpoint(args, cfg, out):
    if args.checkpoint:
        return _load(args.checkpoint)
    ckpt, _ = pipeline.train(cfg)
    save_checkpoint(out / "fp.json", ckpt)
    return ckpt


def cmd_ablate_groups(args, cfg, out):
    result = pipeline.ablate_groups(_ablation_checkpoint(args, cfg, out), cfg)
    path = Path(args.output or out / "ablate_groups.json")
    pipeline.write_json(path, result)
    return {"result": str(path)}


def cmd_ablate_strategy(args, cfg, out):
    result = pipeline.ablate_strategy(_ablation_checkpoint(args, cfg, out), cfg)
    path = Path(args.output or out / "ablate_strategy.json")
    pipeline.write_json(path, result)
    return {"result": str(path)}


def cmd_report(args, cfg, out):
    written = pipeline.report(args.inputs, args.output or out / "tables")
    for p in written:
        print(p)
    return {"tables": [str(p) for p in written]}


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "sample": cmd_sample,
            "eval": cmd_eval, "ablate-groups": cmd_ablate_groups,
            "ablate-strategy": cmd_ablate_strategy, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepquant",
                                     description="Timestep-grouped activation quantization "
                                                 "for toy diffusion models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", help="directory for outputs and the config echo")
        p.add_argument("-o", "--output", help="explicit output path")
        if name != "train":
            p.add_argument("--checkpoint", help="checkpoint JSON to start from")
        if name in ("calibrate", "eval", "ablate-strategy", "sample"):
            p.add_argument("--strategy")
            p.add_argument("--groups", dest="n_groups", type=int)
            p.add_argument("--bits", type=int, help="weight and activation bitwidth")
            p.add_argument("--calib-size", dest="calib_size", type=int)
        if name == "sample":
            p.add_argument("-n", type=int, default=1000, help="number of points")
            p.add_argument("--full-precision", action="store_true")
        if name == "report":
            p.add_argument("inputs", nargs="+", help="run JSON files to merge")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg, out)
        _echo(cfg, args.command, out, **extra)
    except (ConfigError, CheckpointError, UsageError, ValueError, OSError) as exc:
        print(f"stepquant {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
