"""Command-line entry points.

Subcommands: gen-data, train, eval, ablate, mask-preview, recon-dump.
Every command is driven by one YAML config file and is reproducible
from (config, seed) alone. The worker count for per-image metric
computation comes from the SIGNRECON_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import build_model, init_parameters
from .config import ExperimentConfig, desk_preset
from .errors import SignReconError
from .pipeline import (
    run_ablate,
    run_eval,
    run_gen_data,
    run_mask_preview,
    run_recon_dump,
    run_train,
)
from .training import describe_model


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = desk_preset()
    else:
        cfg = ExperimentConfig.load_yaml(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _add_common(p: argparse.ArgumentParser, need_out: bool = True) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    if need_out:
        p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signrecon",
        description="Side information-guided normalisation for undersampled MRI "
        "reconstruction: data synthesis, training, evaluation and ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic styled dataset")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")

    p = sub.add_parser("train", help="run two-stage training")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset dir or manifest path")
    p.add_argument(
        "--stage",
        choices=("both", "pretrain", "finetune"),
        default="both",
        help="which training stages to run",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate", help="side-information ablations of a checkpoint")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("mask-preview", help="render the sampling mask to an image file")
    _add_common(p, need_out=False)
    p.add_argument("--out", type=Path, required=True, help="output image path (.png)")

    p = sub.add_parser("recon-dump", help="write ground truth / zero-filled / recon grids")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--baseline-checkpoint", type=Path, default=None)
    p.add_argument("--baseline-config", type=Path, default=None)
    p.add_argument("-n", type=int, default=4, help="number of grids to write")

    p = sub.add_parser("describe", help="print the configured architecture summary")
    _add_common(p, need_out=False)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            manifest = run_gen_data(cfg, args.out, force=args.force)
            print(f"wrote {manifest}")
        elif args.command == "train":
            result = run_train(cfg, args.data, args.out, stage=args.stage)
            best = result["outcome"].best
            print(
                f"stage={best.stage} best_val_psnr={best.best_val_psnr:.2f}dB "
                f"checkpoint={result['final_checkpoint']}"
            )
        elif args.command == "eval":
            report = run_eval(cfg, args.data, args.checkpoint, args.out)
            print(report.to_table_text(), end="")
        elif args.command == "ablate":
            reports = run_ablate(cfg, args.data, args.checkpoint, args.out)
            for label, report in reports.items():
                print(f"[{label}]")
                print(report.to_table_text(), end="")
        elif args.command == "mask-preview":
            path = run_mask_preview(cfg, args.out, seed=args.seed)
            print(f"wrote {path}")
        elif args.command == "recon-dump":
            bcfg = (
                ExperimentConfig.load_yaml(args.baseline_config)
                if args.baseline_config is not None
                else None
            )
            paths = run_recon_dump(
                cfg,
                args.data,
                args.checkpoint,
                args.out,
                n=args.n,
                baseline_checkpoint=args.baseline_checkpoint,
                baseline_config=bcfg,
            )
            print(f"wrote {len(paths)} grids to {args.out}")
        elif args.command == "describe":
            model = build_model(cfg.model.build_config(), cfg.schema)
            init_parameters(model, cfg.seed)
            print(f"config_hash={cfg.config_hash()}")
            print(describe_model(model))
    except SignReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
