"""
Outer objectives and meta-gradients

Both backends consume a BilevelProblem:
- example_losses(theta) -> (m,) per-example inner losses
- scores(eta) -> (m,) example weights
- outer_loss(theta_K) -> scalar

and return MetaGrads: dL_outer/deta, dL_outer/ds_i and the outer loss value.

unroll:  keeps the graph of all K inner steps alive (create_graph) and runs
         one reverse pass through it.
adjoint: carries lam_k = dL/dtheta_k backward, rematerializing theta_k from
         block snapshots; second-order terms come from forward-over-reverse
         Hessian-vector and mixed products.
"""

import time
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence

import structlog
import torch

from engine import diffcore
from engine.adapt import AdaptTrajectory, InnerConfig, example_losses, make_stepper, weighted_sum
from engine.diffcore import DTYPE, ParamVector
from engine.scorer import ScorerParams, score_all
from engine.seqmodel import LoraDelta, ModelParams, continuation_mask, nll
from engine.taskgen import Attempt, AuxExample, Task, gold_sequence, solve_prompt
from utils.errors import ContractError, NumericFault

logger = structlog.get_logger()

Backend = Literal["adjoint", "unroll"]


@dataclass(frozen=True)
class OuterLossSpec:
    variant: Literal["gold", "verified"] = "verified"
    attempts: int = 6

    def __post_init__(self):
        if self.variant == "verified" and self.attempts < 1:
            raise ContractError("verified outer loss needs at least one attempt")

    @classmethod
    def from_run_config(cls, config) -> "OuterLossSpec":
        return cls(variant=config.outer_variant, attempts=config.n_attempts)


@dataclass
class BilevelProblem:
    example_losses: Callable[[ParamVector], torch.Tensor]
    scores: Callable[[ParamVector], torch.Tensor]
    outer_loss: Callable[[ParamVector], torch.Tensor]
    theta0: ParamVector
    eta: ParamVector
    inner: InnerConfig

    def inner_loss(self, theta: ParamVector, eta: ParamVector) -> torch.Tensor:
        return weighted_sum(self.scores(eta), self.example_losses(theta))


@dataclass
class MetaGrads:
    g_eta: ParamVector
    sensitivities: torch.Tensor
    outer_loss: float
    theta_final: ParamVector
    backend: str
    retained_states: int
    replayed_steps: int = 0
    seconds: float = 0.0


# ============================================================================
# OUTER LOSSES
# ============================================================================

def outer_loss_gold(params: ModelParams, delta_k: LoraDelta, task: Task) -> torch.Tensor:
    """nll of the gold answer under the adapted model"""
    tokens, mask = gold_sequence(task)
    return nll(params, delta_k, tokens, mask)


def outer_loss_verified(
    params: ModelParams, delta_k: LoraDelta, task: Task, attempts: Sequence[Attempt]
) -> Optional[torch.Tensor]:
    """
    Mean nll of the verified attempts under the adapted model

    Returns:
        None when no attempt verified (the task yields no meta-signal)
    """
    verified = [a for a in attempts if a.verified]
    if not verified:
        return None
    prompt = solve_prompt(task)
    losses = [
        nll(params, delta_k, prompt + list(a.tokens), continuation_mask(len(prompt), len(a.tokens)))
        for a in verified
    ]
    return torch.stack(losses).mean()


def build_problem(
    params: ModelParams,
    delta0: LoraDelta,
    examples: Sequence[AuxExample],
    scorer: ScorerParams,
    task: Task,
    outer_fn: Callable[[LoraDelta], torch.Tensor],
    inner: InnerConfig,
) -> BilevelProblem:
    """Wire the pipeline's models into a BilevelProblem over (adapter, scorer) vectors"""
    frozen = params.detached()
    examples = list(examples)
    return BilevelProblem(
        example_losses=lambda theta: example_losses(frozen, delta0.with_factors(theta), examples),
        scores=lambda eta: score_all(scorer.with_vector(eta), task, examples),
        outer_loss=lambda theta: outer_fn(delta0.with_factors(theta)),
        theta0=delta0.factors.detach(),
        eta=scorer.vector.detach(),
        inner=inner,
    )


# ============================================================================
# BACKENDS
# ============================================================================

def _check(grads: MetaGrads) -> MetaGrads:
    grads.g_eta.assert_finite("meta-gradient")
    if not bool(torch.isfinite(grads.sensitivities).all()):
        raise NumericFault("scores", "sensitivity")
    if not torch.isfinite(torch.tensor(grads.outer_loss)):
        raise NumericFault("outer", "loss")
    return grads


def meta_grad_unroll(problem: BilevelProblem) -> MetaGrads:
    """Reverse-over-reverse through the retained graph of all inner steps"""
    started = time.perf_counter()
    inner = problem.inner
    eta = problem.eta.as_leaves()
    scores = problem.scores(eta)
    theta = problem.theta0.as_leaves()
    names = theta.names()
    retained = 1

    for _ in range(inner.steps):
        loss = weighted_sum(scores, problem.example_losses(theta))
        if not loss.requires_grad:
            break
        grads = torch.autograd.grad(loss, [theta[n] for n in names], create_graph=True, allow_unused=True)
        theta = ParamVector({
            n: theta[n] if g is None else theta[n] - inner.lr * g
            for n, g in zip(names, grads)
        })
        retained += 1

    outer = problem.outer_loss(theta)
    targets = [scores] + [eta[n] for n in eta.names()]
    wanted = [t for t in targets if t.requires_grad]
    found = {}
    if outer.requires_grad and wanted:
        for t, g in zip(wanted, torch.autograd.grad(outer, wanted, allow_unused=True)):
            found[id(t)] = g

    def pick(t: torch.Tensor) -> torch.Tensor:
        g = found.get(id(t))
        return torch.zeros_like(t).detach() if g is None else g.detach()

    return _check(MetaGrads(
        g_eta=ParamVector({n: pick(eta[n]) for n in eta.names()}),
        sensitivities=pick(scores),
        outer_loss=float(outer.detach()),
        theta_final=theta.detach(),
        backend="unroll",
        retained_states=retained,
        seconds=time.perf_counter() - started,
    ))


def meta_grad_adjoint(problem: BilevelProblem, trajectory: Optional[AdaptTrajectory] = None) -> MetaGrads:
    """
    Adjoint recursion with rematerialized inner states

    lam_K = grad L_outer(theta_K); for k = K-1 .. 0:
        sens   += -lr * <grad l_i(theta_k), lam_{k+1}>
        g_eta  += -lr * d/deta <grad_theta L_inner(theta_k, eta), lam_{k+1}>
        lam_k   = lam_{k+1} - lr * H(theta_k) lam_{k+1}
    """
    started = time.perf_counter()
    inner = problem.inner
    eta = problem.eta.detach()
    fixed_scores = problem.scores(eta).detach()

    def loss_at(theta: ParamVector) -> torch.Tensor:
        return weighted_sum(fixed_scores, problem.example_losses(theta))

    if trajectory is not None:
        store, stepper = trajectory.store, trajectory.stepper
        theta_k = trajectory.final.factors.detach()
        if store.total_steps != inner.steps:
            raise ContractError(f"trajectory has {store.total_steps} steps, problem expects {inner.steps}")
    else:
        stepper = make_stepper(loss_at, inner.lr)
        theta_k, store = diffcore.run_checkpointed(problem.theta0, stepper, inner.steps, inner.block_size)
    replayed_before = store.replayed_steps

    outer_value, lam = diffcore.value_and_grad(problem.outer_loss, theta_k)
    g_eta = eta.zeros_like()
    sensitivities = torch.zeros_like(fixed_scores)

    for k in reversed(range(inner.steps)):
        if lam.norm() == 0:
            break
        theta = diffcore.checkpoint_replay(store, k, stepper)
        if fixed_scores.numel():
            per_example = diffcore.directional_derivative(problem.example_losses, theta, lam)
            sensitivities = sensitivities - inner.lr * per_example
            g_eta = g_eta.axpy(-inner.lr, diffcore.mixed_partial(problem.inner_loss, theta, eta, lam))
        lam = lam.axpy(-inner.lr, diffcore.hvp(loss_at, theta, lam))

    return _check(MetaGrads(
        g_eta=g_eta,
        sensitivities=sensitivities,
        outer_loss=float(outer_value),
        theta_final=theta_k,
        backend="adjoint",
        retained_states=store.retained,
        replayed_steps=store.replayed_steps - replayed_before,
        seconds=time.perf_counter() - started,
    ))


def compute_meta_grads(
    problem: BilevelProblem, backend: Backend, trajectory: Optional[AdaptTrajectory] = None
) -> MetaGrads:
    if backend == "unroll":
        return meta_grad_unroll(problem)
    if backend == "adjoint":
        return meta_grad_adjoint(problem, trajectory)
    raise ContractError(f"unknown meta-gradient backend '{backend}'")


def sensitivity_closed_form_k1(
    g_outer: ParamVector, inner_grads: Sequence[ParamVector], lr: float
) -> torch.Tensor:
    """K = 1: dL/ds_i = -lr * <grad L_outer(theta_1), grad l_i(theta_0)>"""
    values: List[torch.Tensor] = [-lr * g_outer.dot(g) for g in inner_grads]
    if not values:
        return torch.zeros(0, dtype=DTYPE)
    return torch.stack(values).detach()


# ============================================================================
# RE-EVALUATION (finite-difference oracles)
# ============================================================================

def outer_from_scores(problem: BilevelProblem, scores: torch.Tensor) -> torch.Tensor:
    """Rerun the inner loop with the given fixed scores and return L_outer(theta_K)"""
    fixed = scores.detach()

    def loss_at(theta: ParamVector) -> torch.Tensor:
        return weighted_sum(fixed, problem.example_losses(theta))

    stepper = make_stepper(loss_at, problem.inner.lr)
    theta, _ = diffcore.run_checkpointed(problem.theta0, stepper, problem.inner.steps, problem.inner.block_size)
    with torch.no_grad():
        return problem.outer_loss(theta)


def outer_from_eta(problem: BilevelProblem, eta: ParamVector) -> torch.Tensor:
    with torch.no_grad():
        scores = problem.scores(eta)
    return outer_from_scores(problem, scores)
