"""
Exception hierarchy shared by the engine, the store and the CLI.

commands_registry.dispatch_command maps these onto process exit codes:
- UsageError            -> 2
- any other MassError   -> 1
"""

from typing import Optional


class MassError(Exception):
    """Base class for every error raised on purpose by this project"""


class ContractError(MassError, ValueError):
    """A precondition or layout contract was violated by the caller"""


class NumericFault(MassError, ArithmeticError):
    """A non-finite value appeared during evaluation or differentiation"""

    def __init__(self, segment: str, where: str = "value"):
        self.segment = segment
        self.where = where
        super().__init__(f"non-finite {where} in segment '{segment}'")


class CheckpointError(MassError):
    """Checkpoint file is corrupted, truncated or from another format version"""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class TaskFormatError(MassError):
    """A task-set line could not be parsed"""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class UsageError(MassError):
    """Bad command-line or config-file input"""

    def __init__(self, message: str, hint: Optional[str] = None):
        self.hint = hint
        super().__init__(message if not hint else f"{message} ({hint})")
