#!/usr/bin/env python3
"""
Main entry point for the stoic command line
"""

import logging
import os
import sys

from stoic_diffusion.cli import build_parser, run


def main(argv: list[str] | None = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    level = args.log_level or os.environ.get("STOIC_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
