#!/usr/bin/env python3
"""
rhflow - command-line entry point

    rhflow <run|verify|functionals|reduced-volume> --config PATH [--refine N] [--out DIR]
"""

import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, List, Optional

from .core.config import Config
from .lab import COMMANDS, RHFlowLab
from .utils.error_handler import EXIT_CONFIG, EXIT_FAILURE, ConfigError


def setup_logging(config: Config) -> None:
    """Configure the logging system based on configuration settings."""
    log_file = config.get('log_file', 'rhflow.log')
    log_level = config.get('log_level', 'INFO')

    logging.basicConfig(
        level=getattr(logging, log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            RotatingFileHandler(
                log_file,
                maxBytes=1024 * 1024,  # 1MB
                backupCount=5
            ),
            logging.StreamHandler()
        ],
        force=True
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rhflow', description="Coupled Ricci / harmonic-map flow laboratory")
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', required=True, help="YAML or JSON run configuration")
    parser.add_argument('--refine', type=int, default=None, help="refinement factor for verify suites")
    parser.add_argument('--out', default=None, help="output directory (overrides output.dir)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides: Dict[str, Any] = {}
    if args.refine is not None:
        overrides['verify.refine'] = args.refine
    if args.out is not None:
        overrides['output.dir'] = args.out

    try:
        config = Config(args.config, overrides)
    except ConfigError as e:
        # logging is not configured yet; the config decides where it goes
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(config)
    logger = logging.getLogger(__name__)
    try:
        lab = RHFlowLab(config, args.out)
        return lab.dispatch(args.command)
    except Exception as e:
        logger.critical(f"Failed to run '{args.command}': {e}", exc_info=True)
        return EXIT_FAILURE


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
