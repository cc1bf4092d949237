"""
Command registry and dispatch for the meta-learning CLI
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import structlog
from pydantic import ValidationError

from utils.errors import ContractError, MassError, UsageError

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandCategory(str, Enum):
    """Command categories for organization"""
    EXPERIMENT = "experiment"
    DIAGNOSTIC = "diagnostic"


@dataclass
class CommandMetadata:
    """Metadata for a registered command"""
    name: str
    category: CommandCategory
    description_short: str
    handler: Callable[[Dict[str, Any]], int]


# Global command registry
COMMAND_REGISTRY: Dict[str, CommandMetadata] = {}


def register_command(
    name: str,
    category: CommandCategory,
    description_short: str
):
    """
    Register a handler as a `mass` subcommand

    The handler receives the parsed flags as a dict and returns the process
    exit code. Its argparse flags come from the CommandSchema of the same name;
    the category only groups the command in the --help epilog.

    Raises:
        ContractError: the name is already taken
    """
    def decorator(handler_func):
        if name in COMMAND_REGISTRY:
            raise ContractError(f"command '{name}' is already registered")

        COMMAND_REGISTRY[name] = CommandMetadata(
            name=name,
            category=category,
            description_short=description_short,
            handler=handler_func
        )

        return handler_func

    return decorator


def dispatch_command(command_name: str, params: Dict[str, Any]) -> int:
    """
    Run a registered command and map failures onto exit codes

    Args:
        command_name: Name of the command to execute
        params: Parsed command-line arguments

    Returns:
        Process exit code: 0 success, 1 runtime failure, 2 usage error
    """
    command = COMMAND_REGISTRY.get(command_name)

    if not command:
        logger.error("command_not_found", command=command_name)
        return EXIT_USAGE

    logger.info(
        "command_dispatch",
        command=command_name,
        category=command.category.value,
        params_keys=sorted(k for k, v in params.items() if v is not None)
    )

    try:
        code = command.handler(params)

        logger.info(
            "command_dispatch_success",
            command=command_name,
            exit_code=code
        )

        return code

    except (UsageError, ValidationError) as e:
        logger.error(
            "command_usage_error",
            command=command_name,
            error=str(e),
            error_type=type(e).__name__
        )
        print(f"usage error: {e}")
        return EXIT_USAGE

    except MassError as e:
        logger.error(
            "command_failed",
            command=command_name,
            error=str(e),
            error_type=type(e).__name__
        )
        print(f"error: {e}")
        return EXIT_FAILURE

    except OSError as e:
        logger.error(
            "command_io_error",
            command=command_name,
            path=getattr(e, "filename", None),
            error=str(e)
        )
        print(f"I/O error: {e}")
        return EXIT_FAILURE

    except Exception as e:
        # Catch-all for unexpected errors
        logger.error(
            "command_dispatch_error",
            command=command_name,
            error=str(e),
            error_type=type(e).__name__
        )
        raise


def list_commands(category: Optional[CommandCategory] = None) -> List[Dict[str, str]]:
    """
    List all registered commands

    Args:
        category: Optional filter by category

    Returns:
        List of command metadata (name, category, description)
    """
    commands = COMMAND_REGISTRY.values()

    if category:
        commands = [c for c in commands if c.category == category]

    return [
        {
            "name": command.name,
            "category": command.category.value,
            "description": command.description_short
        }
        for command in commands
    ]
