"""
Experiments

Schemas and handlers for the experiment pipeline:
- make-tasks (EXPERIMENT)
- train (EXPERIMENT)
- adapt (EXPERIMENT)
- eval (EXPERIMENT)
- baseline (EXPERIMENT)
"""

from pathlib import Path
from typing import Any, Dict

import structlog

from commands.base import (
    DEFAULT_OUT,
    Argument,
    CommandCategory,
    CommandSchema,
    load_base_model,
    load_generator,
    load_task_sets,
    prepare_run,
    register_command,
    save_task_sets,
)
from config import save_run_config
from engine import orchestrator, store
from engine.seqmodel import VOCAB
from engine.taskgen import make_task_split, render
from run_context import bind_run_context
from utils.errors import UsageError

logger = structlog.get_logger()


# ============================================================================
# SCHEMAS
# ============================================================================

MAKE_TASKS_SCHEMA = CommandSchema(
    name="make-tasks",
    description="Create the rule-disjoint train and eval task sets in the run directory.",
)

TRAIN_SCHEMA = CommandSchema(
    name="train",
    description="Meta-train generator and scorer; checkpoints and metrics go to the run directory.",
    arguments=[
        Argument(("--resume",), {"default": None, "help": "checkpoint to continue from"}),
        Argument(("--stop-after",), {"type": int, "default": None,
                                     "help": "stop once this many meta-steps are done"}),
        Argument(("--outer",), {"choices": ["verified", "gold"], "default": None,
                                "help": "outer-loss variant override"}),
    ],
)

ADAPT_SCHEMA = CommandSchema(
    name="adapt",
    description="Test-time self-synthesis and adaptation on one eval task; prints the answer.",
    arguments=[
        Argument(("--task-index",), {"type": int, "default": 0, "help": "index into tasks.eval"}),
        Argument(("--checkpoint",), {"default": None, "help": "generator checkpoint (default: base model)"}),
    ],
)

EVAL_SCHEMA = CommandSchema(
    name="eval",
    description="Per-family accuracy of a generator checkpoint on the eval suite.",
    arguments=[
        Argument(("--checkpoint",), {"default": None, "help": "generator checkpoint (default: base model)"}),
        Argument(("--no-adapt",), {"action": "store_true", "help": "answer without test-time adaptation"}),
        Argument(("--compare-base",), {"action": "store_true", "help": "also report per-family gains over base"}),
    ],
)

BASELINE_SCHEMA = CommandSchema(
    name="baseline",
    description="Run one comparison method end to end and write its results table.",
    arguments=[
        Argument(("name",), {"help": f"one of {', '.join(orchestrator.BASELINES)}"}),
    ],
)


# ============================================================================
# HANDLERS
# ============================================================================

@register_command(
    name="make-tasks",
    category=CommandCategory.EXPERIMENT,
    description_short="Create train/eval task sets"
)
def make_tasks_handler(params: Dict[str, Any]) -> int:
    out, config = prepare_run(params, "make-tasks")
    train, evaluation = make_task_split(config)
    save_task_sets(out, config, train, evaluation)
    print(f"tasks: {len(train)} train, {len(evaluation)} eval -> {out}")
    if evaluation:
        print(f"example: {VOCAB.decode(render(evaluation[0]))}")
    return 0


@register_command(
    name="train",
    category=CommandCategory.EXPERIMENT,
    description_short="Meta-train generator and scorer"
)
def train_handler(params: Dict[str, Any]) -> int:
    resume = None
    if params.get("resume"):
        # the checkpoint's config is authoritative; only the pool size may change
        resume = store.load_checkpoint(params["resume"])
        if params.get("threads"):
            resume.config = resume.config.with_overrides(threads=params["threads"])
        config = resume.config
        out = Path(params.get("out") or DEFAULT_OUT)
        out.mkdir(parents=True, exist_ok=True)
        bind_run_context("train")
        save_run_config(out / store.CONFIG_FILE, config)
    else:
        overrides = {"outer_variant": params["outer"]} if params.get("outer") else {}
        out, config = prepare_run(params, "train", **overrides)

    train, _ = load_task_sets(out, config)
    base = load_base_model(out, config, train)
    state = orchestrator.meta_train(config, train, base, out_dir=out, resume=resume,
                                    stop_after=params.get("stop_after"))
    final = out / store.checkpoint_name(state.meta_step)
    if not final.exists():
        store.save_checkpoint(final, orchestrator.state_to_checkpoint(state))
    print(f"trained to meta-step {state.meta_step}; checkpoint {final}")
    return 0


@register_command(
    name="adapt",
    category=CommandCategory.EXPERIMENT,
    description_short="Adapt on one eval task and answer"
)
def adapt_handler(params: Dict[str, Any]) -> int:
    out, config = prepare_run(params, "adapt")
    train, evaluation = load_task_sets(out, config)
    index = params.get("task_index", 0)
    if not 0 <= index < len(evaluation):
        raise UsageError(f"task index {index} outside [0, {len(evaluation)})")
    task = evaluation[index]
    model = load_generator(Path(params["checkpoint"])) if params.get("checkpoint") else load_base_model(out, config, train)

    result = orchestrator.test_time_adapt(model, task, config)
    verdict = "correct" if result.answer == str(task.gold) else "wrong"
    print(f"task: {VOCAB.decode(render(task))}")
    print(f"examples: {result.parsed}/{result.generated} parsed; adapted={result.adapted}")
    print(f"answer: {result.answer} (gold {task.gold}, {verdict})")
    return 0


@register_command(
    name="eval",
    category=CommandCategory.EXPERIMENT,
    description_short="Evaluate a checkpoint on the eval suite"
)
def eval_handler(params: Dict[str, Any]) -> int:
    out, config = prepare_run(params, "eval")
    train, evaluation = load_task_sets(out, config)
    base = load_base_model(out, config, train)
    model = load_generator(Path(params["checkpoint"])) if params.get("checkpoint") else base

    method = "model" if params.get("checkpoint") else "base"
    table = orchestrator.evaluate_params(model, evaluation, config, adapt_first=not params.get("no_adapt"),
                                         method=method)
    rows = table.rows()
    extra: Dict[str, Any] = {}
    if params.get("compare_base"):
        base_table = orchestrator.evaluate_params(base, evaluation, config, adapt_first=False, method="base")
        rows = base_table.rows() + rows
        report = orchestrator.family_gain_report(base_table, table)
        extra["family_gains"] = report.model_dump()
    text = store.write_results_table(out, orchestrator.RESULT_COLUMNS, rows, extra)
    print(text, end="")
    return 0


@register_command(
    name="baseline",
    category=CommandCategory.EXPERIMENT,
    description_short="Run one comparison method"
)
def baseline_handler(params: Dict[str, Any]) -> int:
    name = params["name"]
    if name not in orchestrator.BASELINES:
        raise UsageError(f"unknown baseline '{name}'", hint=f"choose one of {', '.join(orchestrator.BASELINES)}")
    out, config = prepare_run(params, f"baseline-{name}")
    train, evaluation = load_task_sets(out, config)
    base = load_base_model(out, config, train)

    method_dir = out / name
    method_dir.mkdir(parents=True, exist_ok=True)
    table = orchestrator.run_baseline(name, config, train, evaluation, base, out_dir=method_dir)

    extra: Dict[str, Any] = {}
    if name != "base":
        base_table = orchestrator.run_baseline("base", config, train, evaluation, base)
        extra["family_gains"] = orchestrator.family_gain_report(base_table, table).model_dump()
    text = store.write_results_table(method_dir, orchestrator.RESULT_COLUMNS, table.rows(), extra)
    print(text, end="")
    return 0


EXPERIMENT_SCHEMAS = {
    "make-tasks": MAKE_TASKS_SCHEMA,
    "train": TRAIN_SCHEMA,
    "adapt": ADAPT_SCHEMA,
    "eval": EVAL_SCHEMA,
    "baseline": BASELINE_SCHEMA,
}
