"""
Self-synthesis meta-learning CLI

    python main.py <command> [--config FILE] [--seed N] [--out DIR]
                             [--backend unroll|adjoint] [--threads N] ...

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from typing import List, Optional

import structlog
import torch

from commands_registry import EXIT_USAGE, CommandCategory, dispatch_command, list_commands
from config import get_settings
from run_context import clear_run_context

# Import commands module to register all handlers and load schemas
from commands import ALL_COMMAND_SCHEMAS

# ============================================================================
# LOGGING
# ============================================================================

def configure_logging() -> None:
    settings = get_settings()
    log_renderer = (
        structlog.dev.ConsoleRenderer()
        if settings.log_format == "console"
        else structlog.processors.JSONRenderer()
    )
    level = logging.getLevelName(settings.log_level.upper())
    if not isinstance(level, int):
        level = logging.INFO

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%Y-%m-%d %H:%M:%S"),
            log_renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
    )


logger = structlog.get_logger()


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    lines = []
    for category in CommandCategory:
        entries = list_commands(category)
        if entries:
            lines.append(f"{category.value} commands:")
            lines.extend(f"  {e['name']:<16} {e['description']}" for e in entries)
    parser = argparse.ArgumentParser(
        prog="mass",
        description="Meta-learned self-synthesis of auxiliary training data.",
        epilog="\n".join(lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="<command>")
    subparsers.required = True
    for schema in ALL_COMMAND_SCHEMAS.values():
        schema.add_to(subparsers)
    return parser


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0; malformed flags exit 2
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    torch.set_num_threads(1)
    params = vars(args)
    command = params.pop("command")
    try:
        return dispatch_command(command, params)
    finally:
        clear_run_context()


if __name__ == "__main__":
    sys.exit(main())
