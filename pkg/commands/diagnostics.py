"""
Diagnostics

Schemas and handlers for numerical verification:
- gradcheck (DIAGNOSTIC)
- bench-metagrad (DIAGNOSTIC)

SyntheticInstance builds a small but complete bilevel problem (model,
adapter, scorer, task, examples) that both commands and the tests use.
"""

import time
from dataclasses import dataclass
from typing import Any, Dict, List

import structlog
import torch

from commands.base import Argument, CommandCategory, CommandSchema, prepare_run, register_command
from engine import diffcore, metagrad, store
from engine.adapt import InnerConfig
from engine.diffcore import ParamVector
from engine.metagrad import BilevelProblem, build_problem, outer_loss_gold
from engine.scorer import ScorerConfig, ScorerParams, init_scorer
from engine.seqmodel import ARROW, END, EXAMPLE, VOCAB, LoraDelta, ModelConfig, ModelParams, init_lora, init_params, nll
from engine.taskgen import AuxExample, DifficultyConfig, Task, gold_sequence, make_aux_example, sample_task
from utils.seeding import numpy_stream, stream

logger = structlog.get_logger()


# ============================================================================
# SYNTHETIC PROBLEMS
# ============================================================================

@dataclass
class SyntheticInstance:
    params: ModelParams
    delta0: LoraDelta
    scorer: ScorerParams
    task: Task
    examples: List[AuxExample]
    problem: BilevelProblem


def synthetic_instance(
    model_config: ModelConfig,
    scorer_config: ScorerConfig,
    n_examples: int,
    inner: InnerConfig,
    seed: int = 0,
) -> SyntheticInstance:
    """
    Random instance with non-degenerate second-order structure: adapter B
    factors and the scorer head are randomized so no gradient vanishes
    """
    params = init_params(model_config, stream(seed, "synthetic", "model"))
    delta0 = init_lora(model_config, stream(seed, "synthetic", "lora"))
    gen = stream(seed, "synthetic", "perturb")
    delta0 = delta0.with_factors(delta0.factors.map(
        lambda t: t + 0.1 * torch.randn(t.shape, dtype=t.dtype, generator=gen)
    ))

    scorer = init_scorer(scorer_config, stream(seed, "synthetic", "scorer"))
    scorer = scorer.with_vector(scorer.vector.replace({
        "head.weight": 0.5 * torch.randn(scorer_config.width, dtype=diffcore.DTYPE, generator=gen),
        "head.bias": 0.1 * torch.randn(1, dtype=diffcore.DTYPE, generator=gen),
    }))

    task = sample_task(seed, DifficultyConfig())
    rng = numpy_stream(seed, "synthetic", "examples")
    examples = []
    for _ in range(n_examples):
        x, y = (int(v) for v in rng.integers(task.modulus, size=2))
        raw = [VOCAB.id(EXAMPLE)] + VOCAB.digits(x) + [VOCAB.id(ARROW)] + VOCAB.digits(y) + [VOCAB.id(END)]
        examples.append(make_aux_example(task, raw))

    problem = build_problem(
        params, delta0, examples, scorer, task,
        lambda delta: outer_loss_gold(params, delta, task), inner,
    )
    return SyntheticInstance(params, delta0, scorer, task, examples, problem)


def default_instance(config, n_examples: int = 4, steps: int = 2, block_size: int = 1) -> SyntheticInstance:
    inner = InnerConfig(steps=steps, lr=config.inner_lr, weighted=True, block_size=block_size)
    return synthetic_instance(
        ModelConfig.from_run_config(config),
        ScorerConfig.from_run_config(config),
        n_examples,
        inner,
        seed=config.master_seed,
    )


# ============================================================================
# CHECKS
# ============================================================================

def gradient_errors(instance: SyntheticInstance, eps: float = 1e-6, seed: int = 0) -> Dict[str, float]:
    """Relative errors of grad / hvp / mixed / meta-gradient against central differences"""
    problem = instance.problem
    gen = stream(seed, "gradcheck")
    errors: Dict[str, float] = {}

    tokens, mask = gold_sequence(instance.task)

    def model_loss(vector: ParamVector) -> torch.Tensor:
        return nll(instance.params.with_vector(vector), instance.delta0, tokens, mask)

    x = instance.params.vector
    d = diffcore.random_like(x, gen)
    analytic = diffcore.grad(model_loss, x).dot(d)
    errors["grad"] = diffcore.relative_error(analytic.reshape(1), diffcore.directional_difference(model_loss, x, d, eps).reshape(1))

    theta, eta = problem.theta0, problem.eta

    def inner_at(t: ParamVector) -> torch.Tensor:
        return problem.inner_loss(t, eta)

    v = diffcore.random_like(theta, gen)
    hv = diffcore.hvp(inner_at, theta, v)
    fd = diffcore.grad(inner_at, theta.axpy(eps, v)).sub(diffcore.grad(inner_at, theta.axpy(-eps, v))).scale(0.5 / eps)
    errors["hvp"] = diffcore.relative_error(hv, fd)
    errors["hvp_reverse"] = diffcore.relative_error(hv, diffcore.hvp_reverse(inner_at, theta, v))

    mixed = diffcore.mixed_partial(problem.inner_loss, theta, eta, v)

    def eta_grad(t: ParamVector) -> ParamVector:
        return diffcore.grad(lambda e: problem.inner_loss(t, e), eta)

    fd_mixed = eta_grad(theta.axpy(eps, v)).sub(eta_grad(theta.axpy(-eps, v))).scale(0.5 / eps)
    errors["mixed"] = diffcore.relative_error(mixed, fd_mixed)

    grads = metagrad.meta_grad_adjoint(problem)
    u = diffcore.random_like(eta, gen)
    meta_eps = 1e-4
    fd_meta = (
        metagrad.outer_from_eta(problem, eta.axpy(meta_eps, u)) - metagrad.outer_from_eta(problem, eta.axpy(-meta_eps, u))
    ) / (2 * meta_eps)
    errors["meta"] = diffcore.relative_error(grads.g_eta.dot(u).reshape(1), fd_meta.reshape(1))
    return errors


# ============================================================================
# SCHEMAS
# ============================================================================

GRADCHECK_SCHEMA = CommandSchema(
    name="gradcheck",
    description="Check grad, hvp, mixed partials and meta-gradients against finite differences.",
    arguments=[
        Argument(("--tolerance",), {"type": float, "default": 1e-5, "help": "max relative error for grad/hvp/mixed"}),
        Argument(("--meta-tolerance",), {"type": float, "default": 1e-4, "help": "max relative error for the meta-gradient"}),
    ],
    category="diagnostic",
)

BENCH_METAGRAD_SCHEMA = CommandSchema(
    name="bench-metagrad",
    description="Compare unroll and adjoint backends: retained states, wall time, agreement.",
    arguments=[
        Argument(("--inner-steps",), {"type": int, "default": 8, "help": "inner steps K"}),
        Argument(("--block",), {"type": int, "default": 2, "help": "snapshot block size B"}),
        Argument(("--examples",), {"type": int, "default": 4, "help": "auxiliary examples m"}),
    ],
    category="diagnostic",
)


# ============================================================================
# HANDLERS
# ============================================================================

@register_command(
    name="gradcheck",
    category=CommandCategory.DIAGNOSTIC,
    description_short="Finite-difference derivative checks"
)
def gradcheck_handler(params: Dict[str, Any]) -> int:
    _, config = prepare_run(params, "gradcheck")
    started = time.perf_counter()
    errors = gradient_errors(default_instance(config), seed=config.master_seed)

    limits = {name: params.get("tolerance", 1e-5) for name in errors}
    limits["meta"] = params.get("meta_tolerance", 1e-4)
    failed = [name for name, err in errors.items() if not err <= limits[name]]
    for name, err in errors.items():
        status = "FAIL" if name in failed else "ok"
        print(f"{name:<12} rel_err={err:.3e}  tol={limits[name]:.0e}  {status}")
    print(f"elapsed {time.perf_counter() - started:.1f}s")
    logger.info("gradcheck_done", errors=errors, failed=failed)
    return 1 if failed else 0


@register_command(
    name="bench-metagrad",
    category=CommandCategory.DIAGNOSTIC,
    description_short="Benchmark meta-gradient backends"
)
def bench_metagrad_handler(params: Dict[str, Any]) -> int:
    out, config = prepare_run(params, "bench-metagrad")
    instance = default_instance(
        config, n_examples=params.get("examples", 4), steps=params.get("inner_steps", 8),
        block_size=params.get("block", 2),
    )
    unroll = metagrad.meta_grad_unroll(instance.problem)
    adjoint = metagrad.meta_grad_adjoint(instance.problem)
    diff = max(
        float((unroll.g_eta.flatten() - adjoint.g_eta.flatten()).abs().max()),
        float((unroll.sensitivities - adjoint.sensitivities).abs().max()) if unroll.sensitivities.numel() else 0.0,
    )

    rows = [
        {"backend": g.backend, "retained_states": g.retained_states, "replayed_steps": g.replayed_steps,
         "seconds": g.seconds, "outer_loss": g.outer_loss}
        for g in (unroll, adjoint)
    ]
    text = store.write_results_table(
        out / "bench-metagrad",
        ("backend", "retained_states", "replayed_steps", "seconds", "outer_loss"),
        rows,
        {"max_abs_diff": diff, "inner_steps": params.get("inner_steps", 8), "block": params.get("block", 2)},
    )
    print(text, end="")
    print(f"max abs diff between backends: {diff:.3e}")
    return 0


DIAGNOSTIC_SCHEMAS = {
    "gradcheck": GRADCHECK_SCHEMA,
    "bench-metagrad": BENCH_METAGRAD_SCHEMA,
}
