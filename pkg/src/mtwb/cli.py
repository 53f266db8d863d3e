"""Command-line entry point: ``mtwb <command> [--config FILE] [--seed N] [--out DIR] [--preset NAME]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import PRESETS, build_config, load_config
from .errors import ConfigError


def _global_flags(p):
    p.add_argument("--config", type=Path, help="JSON experiment config (or a run manifest to replay)")
    p.add_argument("--seed", type=int, help="master seed (u64); overrides the config")
    p.add_argument("--out", type=Path, help="output directory, owned exclusively by this run")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: desk)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtwb", description="Transformer wireless workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate train/val/test channel datasets"),
        ("ce-train", "train pilots + estimator, evaluate over the SNR grid"),
        ("ce-eval", "evaluate a trained estimator over the SNR grid"),
        ("csi-train", "train feedback autoencoders over the bit grid"),
        ("csi-eval", "evaluate trained feedback autoencoders"),
        ("hbf-train", "train hybrid beamformers (perfect CSI and feedback)"),
        ("hbf-eval", "evaluate trained hybrid beamformers"),
    ]:
        _global_flags(sub.add_parser(name, help=help_text))
    p = sub.add_parser("sweep", help="run or evaluate one pipeline along a grid axis")
    _global_flags(p)
    p.add_argument("--pipeline", choices=("ce", "csi", "hbf"))
    p.add_argument("--axis", required=True, choices=("snr_db", "feedback_bits"))
    p.add_argument("--values", required=True, nargs="+", type=float)
    p = sub.add_parser("compare", help="rank schemes per coordinate and report crossovers")
    p.add_argument("files", nargs="+", type=Path)
    p.add_argument("--json", type=Path, help="also write the comparison as JSON")
    return parser


def _config(args, pipeline=None):
    overrides = dict(preset=args.preset, seed=args.seed, out=str(args.out) if args.out else None, pipeline=pipeline)
    if args.config is not None:
        return load_config(args.config, **overrides)
    return build_config(None, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "compare":
            records = [r for f in args.files for r in harness.read_results(f)]
            result = harness.compare(records)
            print(harness.format_comparison(result))
            if args.json:
                args.json.write_text(json.dumps(result, indent=2) + "\n")
            return 0
        if args.command == "gen-data":
            for split, info in harness.generate_data(_config(args)).items():
                print(f"{split}: {info['path']} (seed {info['seed']})")
            return 0
        if args.command == "sweep":
            cfg = _config(args, args.pipeline)
            values = [int(v) if args.axis == "feedback_bits" else v for v in args.values]
            records = harness.sweep(cfg, args.axis, values)
        else:
            cfg = _config(args, harness.COMMANDS[args.command][0])
            records = harness.run(cfg, args.command)
    except (ConfigError, harness.RunLockedError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for r in records:
        print(f"{r.scheme:32s} {r.coordinate:>6g} {r.metric} {r.value:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
