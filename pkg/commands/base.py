"""
Shared base classes and run-directory helpers for CLI commands.

This module centralizes:
- CommandSchema: declarative description of a subcommand and its flags
- GLOBAL_ARGUMENTS: flags accepted by every command
- Run helpers: resolve_config, prepare_run, save_task_sets, load_task_sets, load_base_model
- Re-exports: register_command, CommandCategory from commands_registry
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import structlog

from commands_registry import CommandCategory, register_command  # noqa: F401 (re-export)
from config import (
    BASE_MODEL_FIELDS,
    TASK_FIELDS,
    RunConfig,
    differing_fields,
    fields_text,
    load_run_config,
    save_run_config,
)
from engine import store
from engine.orchestrator import init_train_state, pretrain_base, state_to_checkpoint
from engine.seqmodel import ModelConfig, ModelParams
from engine.taskgen import Task, make_task_split
from run_context import bind_run_context
from utils.errors import UsageError

logger = structlog.get_logger()

DEFAULT_OUT = "runs/default"


# ============================================================================
# COMMAND SCHEMA
# ============================================================================

@dataclass
class Argument:
    flags: Tuple[str, ...]
    options: Dict[str, Any] = field(default_factory=dict)


class CommandSchema:
    """Base class for command schemas (argparse format)"""

    def __init__(
        self,
        name: str,
        description: str,
        arguments: Optional[List[Argument]] = None,
        category: str = "experiment"
    ):
        self.name = name
        self.description = description
        self.arguments = arguments or []
        self.category = category

    def add_to(self, subparsers) -> None:
        """Attach this command (and the global flags) to an argparse subparsers object"""
        parser = subparsers.add_parser(self.name, help=self.description, description=self.description)
        for argument in GLOBAL_ARGUMENTS + self.arguments:
            parser.add_argument(*argument.flags, **argument.options)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "arguments": [list(a.flags) for a in self.arguments],
        }


GLOBAL_ARGUMENTS: List[Argument] = [
    Argument(("--config",), {"default": None, "help": "key=value run config file"}),
    Argument(("--seed",), {"type": int, "default": None, "help": "master seed override"}),
    Argument(("--out",), {"default": DEFAULT_OUT, "help": "run directory"}),
    Argument(("--backend",), {"choices": ["unroll", "adjoint"], "default": None,
                              "help": "meta-gradient backend override"}),
    Argument(("--threads",), {"type": int, "default": None, "help": "task-parallel worker threads"}),
]


# ============================================================================
# RUN HELPERS
# ============================================================================

def resolve_config(params: Dict[str, Any]) -> RunConfig:
    """
    Config file (or the run directory's manifest), then CLI overrides

    Raises:
        UsageError: unreadable values or invalid overrides
    """
    path = params.get("config")
    if path is None:
        manifest = Path(params.get("out") or DEFAULT_OUT) / store.CONFIG_FILE
        if manifest.exists():
            path = manifest
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    config = load_run_config(path)

    overrides = {}
    if params.get("seed") is not None:
        overrides["master_seed"] = params["seed"]
    if params.get("backend") is not None:
        overrides["backend"] = params["backend"]
    if params.get("threads") is not None:
        overrides["threads"] = params["threads"]
    return config.with_overrides(**overrides) if overrides else config


def prepare_run(params: Dict[str, Any], command: str, **overrides: Any) -> Tuple[Path, RunConfig]:
    """Resolve the config, create the run directory and write the manifest"""
    config = resolve_config(params)
    if overrides:
        config = config.with_overrides(**overrides)
    out = Path(params.get("out") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    run_id = bind_run_context(command)
    save_run_config(out / store.CONFIG_FILE, config)
    logger.info("run_prepared", out=str(out), run_id=run_id, master_seed=config.master_seed)
    return out, config


def save_task_sets(out: Path, config: RunConfig, train: List[Task], evaluation: List[Task]) -> None:
    """Write both task sets and the config fields they were generated from"""
    store.save_tasks(out / store.TRAIN_TASKS_FILE, train)
    store.save_tasks(out / store.EVAL_TASKS_FILE, evaluation)
    store.atomic_write_text(out / store.TASKS_CONFIG_FILE, fields_text(config, TASK_FIELDS))


def load_task_sets(out: Path, config: RunConfig) -> Tuple[List[Task], List[Task]]:
    """Task sets from the run directory; regenerated when missing or made under other task settings"""
    train_path, eval_path = out / store.TRAIN_TASKS_FILE, out / store.EVAL_TASKS_FILE
    provenance = out / store.TASKS_CONFIG_FILE
    if train_path.exists() and eval_path.exists() and provenance.exists():
        if provenance.read_text(encoding="utf-8") == fields_text(config, TASK_FIELDS):
            return store.load_tasks(train_path), store.load_tasks(eval_path)
        logger.warning("tasks_stale", out=str(out), master_seed=config.master_seed)
    train, evaluation = make_task_split(config)
    save_task_sets(out, config, train, evaluation)
    return train, evaluation


def load_base_model(out: Path, config: RunConfig, train_tasks: List[Task]) -> ModelParams:
    """The warm-started base model, pretrained and cached on first use"""
    path = out / store.BASE_CHECKPOINT_FILE
    if path.exists():
        checkpoint = store.load_checkpoint(path)
        stale = differing_fields(checkpoint.config, config, BASE_MODEL_FIELDS)
        if not stale:
            return ModelParams(ModelConfig.from_run_config(checkpoint.config), checkpoint.generator)
        logger.warning("base_model_stale", path=str(path), fields=stale)

    base = pretrain_base(config, train_tasks)
    store.save_checkpoint(path, state_to_checkpoint(init_train_state(config, base)))
    return base


def load_generator(path: Path) -> ModelParams:
    checkpoint = store.load_checkpoint(path)
    return ModelParams(ModelConfig.from_run_config(checkpoint.config), checkpoint.generator)
