"""
Run context for log correlation

Every log line emitted while a command runs carries the run ID, the command
name and (during meta-training) the current meta-step.
"""

import uuid
from contextvars import ContextVar
from typing import Optional

import structlog

# Context variables (thread-safe)
run_id_ctx: ContextVar[str] = ContextVar("run_id", default="")
command_ctx: ContextVar[str] = ContextVar("command", default="")
meta_step_ctx: ContextVar[int] = ContextVar("meta_step", default=-1)


def bind_run_context(command: str, run_id: Optional[str] = None) -> str:
    """
    Generate (or reuse) a run ID and bind it to the structlog context

    Returns:
        The run ID, also written into the run manifest
    """
    run_id = run_id or uuid.uuid4().hex[:12]
    run_id_ctx.set(run_id)
    command_ctx.set(command)
    structlog.contextvars.bind_contextvars(run_id=run_id, command=command)
    return run_id


def bind_meta_step(step: int) -> None:
    meta_step_ctx.set(step)
    structlog.contextvars.bind_contextvars(meta_step=step)


def clear_run_context() -> None:
    run_id_ctx.set("")
    command_ctx.set("")
    meta_step_ctx.set(-1)
    structlog.contextvars.clear_contextvars()
