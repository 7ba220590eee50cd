"""Command line entry point.

    diloco-desk run CONFIG       run the configured stages, write reports
    diloco-desk compare CONFIG   sync vs. DiLoCo vs. hybrid from one init
    diloco-desk validate CONFIG  check CONFIG and print the effective config

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, config_to_dict, dump_config, load_config
from .engine import ConfigError
from .experiment import VARIANTS, comparison_summary, compare_variants, execute, variant_stages
from .reports import write_comparison, write_run

log = logging.getLogger("diloco_desk")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def config_digest(cfg: RunConfig) -> str:
    data = config_to_dict(cfg)
    data.pop("output_dir")
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def cmd_run(cfg: RunConfig) -> int:
    theta, reports = execute(cfg)
    write_run(cfg.output_dir, reports, cfg.seed, cfg.report_formats, config_digest(cfg))
    for r in reports:
        log.info("%s/%s final probe loss %.6f, %d comm events, %d bytes",
                 r.stage, r.method, r.final_probe_loss(), r.ledger.count(), r.ledger.total_bytes)
    log.info("wrote %s", cfg.output_dir)
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    for v in VARIANTS:  # fail fast before any training
        variant_stages(cfg, v)
    results = compare_variants(cfg)
    digest = config_digest(cfg)
    root = Path(cfg.output_dir)
    for variant, (theta, reports) in results.items():
        write_run(root / variant, reports, cfg.seed, cfg.report_formats, digest)
    summary = comparison_summary(results)
    summary["config_digest"] = digest
    write_comparison(root, results, summary)
    for stage, ratio in summary["communication_ratio"].items():
        log.info("stage %s: sync/diloco communication ratio %.3f", stage, ratio)
    log.info("wrote %s", root)
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="YAML run configuration")
    common.add_argument("--output-dir", help="override output_dir from the config")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    parser = argparse.ArgumentParser(prog="diloco-desk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the configured stages")
    sub.add_parser("compare", parents=[common], help="three-way sync/diloco/hybrid comparison")
    sub.add_parser("validate", parents=[common], help="validate and print effective config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        if args.output_dir:
            cfg = replace(cfg, output_dir=args.output_dir)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
