"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``evaluate``, ``report``, ``all``,
``encoder info``, ``diffusion sample``.  A JSON config file supplies the
run parameters; ``--set field=value`` flags override individual fields and
the ``RECON_OOD_SEED`` environment variable overrides the seed last.

Exit codes: 0 success, 2 config error, 3 missing dependency stage,
4 training-quality floor miss, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import CheckpointFormatError
from .config import RunConfig
from .encoder import EncoderNet
from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    StageDependencyError,
    TrainingFloorError,
)
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_STAGE = 3
EXIT_QUALITY_FLOOR = 4
EXIT_IO = 5

SEED_ENV_VAR = "RECON_OOD_SEED"


def _parse_override(text: str) -> tuple:
    if "=" not in text:
        raise DomainError(f"--set expects field=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args) -> RunConfig:
    """Resolve the effective config: file, then --set flags, then env seed."""
    if getattr(args, "config", None):
        cfg = RunConfig.from_json_file(args.config)
    else:
        cfg = RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        doc = cfg.to_dict()
        unknown = set(overrides) - set(doc)
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        doc.update(overrides)
        cfg = RunConfig.from_dict(doc)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg = cfg.with_overrides(seed=int(env_seed))
        except ValueError as exc:
            raise DomainError(f"{SEED_ENV_VAR} must be an integer") from exc
    return cfg


def _add_config_args(parser) -> None:
    parser.add_argument("--config", help="path to a JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("--set", action="append", metavar="FIELD=VALUE",
                        help="override any config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recon-ood",
        description="Reconstruction-based OOD detection pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-data", "generate the synthetic dataset"),
        ("train", "train encoder and denoiser"),
        ("evaluate", "calibrate, score, and write the report"),
        ("all", "run gen-data, train, and evaluate"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_args(p)

    p_report = sub.add_parser("report", help="re-render table and PR CSVs")
    p_report.add_argument("report_json", help="path to report.json")
    p_report.add_argument("--out-dir", help="directory for rendered files")

    p_enc = sub.add_parser("encoder", help="encoder checkpoint utilities")
    enc_sub = p_enc.add_subparsers(dest="encoder_command", required=True)
    p_info = enc_sub.add_parser("info", help="print checkpoint metadata")
    p_info.add_argument("checkpoint", help="path to encoder.ckpt")

    p_diff = sub.add_parser("diffusion", help="diffusion model utilities")
    diff_sub = p_diff.add_subparsers(dest="diffusion_command", required=True)
    p_sample = diff_sub.add_parser(
        "sample", help="dump original/reconstruction PGM pairs")
    _add_config_args(p_sample)
    p_sample.add_argument("--count", type=int, default=4,
                          help="images per split to reconstruct")
    return parser


def _cmd_encoder_info(args) -> int:
    net, accuracy = EncoderNet.load(args.checkpoint)
    print(f"embed_dim: {net.embed_dim}")
    print(f"n_classes: {net.n_classes}")
    print(f"temperature: {net.temperature:.6g}")
    acc_text = f"{accuracy:.4f}" if accuracy >= 0 else "not recorded"
    print(f"zero_shot_accuracy: {acc_text}")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "report":
        text = pipeline.cmd_report(args.report_json, args.out_dir)
        print(text, end="")
        return EXIT_OK
    if args.command == "encoder":
        return _cmd_encoder_info(args)

    cfg = load_config(args)
    if args.command == "gen-data":
        run_dir = pipeline.cmd_gen_data(cfg)
        print(f"dataset written under {run_dir}")
    elif args.command == "train":
        run_dir = pipeline.cmd_train(cfg)
        print(f"checkpoints written under {run_dir}")
    elif args.command == "evaluate":
        report = pipeline.cmd_evaluate(cfg)
        print(pipeline.render_text_table(report), end="")
    elif args.command == "all":
        report = pipeline.cmd_all(cfg)
        print(pipeline.render_text_table(report), end="")
    elif args.command == "diffusion":
        written = pipeline.cmd_sample_reconstructions(cfg, args.count)
        print(f"wrote {len(written)} PGM files under {cfg.run_dir() / 'samples'}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON at line {exc.lineno} column "
              f"{exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, DimensionError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as exc:
        print(f"missing stage dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING_STAGE
    except TrainingFloorError as exc:
        print(f"training quality floor missed: {exc}", file=sys.stderr)
        return EXIT_QUALITY_FLOOR
    except (OSError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
