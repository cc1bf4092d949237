"""
Inner-loop adaptation

K steps of plain gradient descent on the score-weighted supervised loss
L_inner = sum_i s_i * nll_i, over the adapter factors only. The forward
unroll keeps block snapshots in a CheckpointStore so the adjoint backend can
rematerialize any theta_k later.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import structlog
import torch

from engine import diffcore
from engine.diffcore import DTYPE, CheckpointStore, ParamVector, Stepper
from engine.seqmodel import LoraDelta, ModelParams, nll
from engine.taskgen import AuxExample
from utils.errors import ContractError

logger = structlog.get_logger()


@dataclass(frozen=True)
class InnerConfig:
    steps: int = 2
    lr: float = 0.1
    weighted: bool = True
    block_size: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError(f"inner steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ContractError(f"inner learning rate must be > 0, got {self.lr}")
        if self.block_size < 1:
            raise ContractError(f"checkpoint block must be >= 1, got {self.block_size}")

    @classmethod
    def from_run_config(cls, config, weighted: bool = True) -> "InnerConfig":
        return cls(
            steps=config.inner_steps,
            lr=config.inner_lr,
            weighted=weighted,
            block_size=config.checkpoint_block,
        )


@dataclass
class AdaptTrajectory:
    initial: LoraDelta
    final: LoraDelta
    store: CheckpointStore
    scores: torch.Tensor
    examples: Sequence[AuxExample]
    stepper: Stepper

    def theta(self, k: int) -> ParamVector:
        """theta_k, replayed from the nearest snapshot when needed"""
        return diffcore.checkpoint_replay(self.store, k, self.stepper)


# ============================================================================
# LOSSES
# ============================================================================

def example_losses(params: ModelParams, delta: LoraDelta, examples: Sequence[AuxExample]) -> torch.Tensor:
    """Per-example nll values, shape (m,)"""
    for example in examples:
        if not example.parsed:
            raise ContractError("inner loss needs parsed examples only")
    if not examples:
        return torch.zeros(0, dtype=DTYPE)
    return torch.stack([nll(params, delta, ex.tokens, ex.loss_mask) for ex in examples])


def weighted_sum(scores: torch.Tensor, losses: torch.Tensor) -> torch.Tensor:
    if scores.shape != losses.shape:
        raise ContractError(f"{scores.numel()} scores for {losses.numel()} examples")
    return (scores * losses).sum()


def inner_loss(
    params: ModelParams,
    delta: LoraDelta,
    examples: Sequence[AuxExample],
    scores: torch.Tensor,
) -> torch.Tensor:
    """Score-weighted sum (not mean) of per-example losses"""
    if scores.numel() != len(examples):
        raise ContractError(f"{scores.numel()} scores for {len(examples)} examples")
    return weighted_sum(scores, example_losses(params, delta, examples))


# ============================================================================
# UNROLL
# ============================================================================

def make_stepper(loss_fn: Callable[[ParamVector], torch.Tensor], lr: float) -> Stepper:
    """theta_{k+1} = theta_k - lr * grad loss_fn(theta_k)"""

    def step(k: int, theta: ParamVector) -> ParamVector:
        return theta.axpy(-lr, diffcore.grad(loss_fn, theta))

    return step


def _identity_step(k: int, theta: ParamVector) -> ParamVector:
    return theta


def adapt(
    params: ModelParams,
    delta0: LoraDelta,
    examples: Sequence[AuxExample],
    scores: torch.Tensor,
    config: InnerConfig,
) -> AdaptTrajectory:
    """
    Run the inner loop from delta0 with the scores held constant

    Raises:
        NumericFault: non-finite loss or gradient (the trajectory is dropped)
    """
    examples = list(examples)
    scores = scores.detach().to(DTYPE)
    if not config.weighted:
        scores = torch.ones(len(examples), dtype=DTYPE)
    if scores.numel() != len(examples):
        raise ContractError(f"{scores.numel()} scores for {len(examples)} examples")

    frozen = params.detached()
    if examples:
        def loss_fn(theta: ParamVector) -> torch.Tensor:
            return weighted_sum(scores, example_losses(frozen, delta0.with_factors(theta), examples))

        stepper = make_stepper(loss_fn, config.lr)
    else:
        stepper = _identity_step

    try:
        theta_k, store = diffcore.run_checkpointed(
            delta0.factors.detach(), stepper, config.steps, config.block_size
        )
    except Exception as e:
        logger.warning("inner_loop_failed", error=str(e), examples=len(examples))
        raise

    return AdaptTrajectory(
        initial=delta0,
        final=delta0.with_factors(theta_k),
        store=store,
        scores=scores,
        examples=examples,
        stepper=stepper,
    )


def adapt_unweighted(
    params: ModelParams,
    delta0: LoraDelta,
    examples: Sequence[AuxExample],
    config: InnerConfig,
) -> AdaptTrajectory:
    """Every example weighted 1 (test-time update and TTT baseline)"""
    unit = torch.ones(len(examples), dtype=DTYPE)
    return adapt(params, delta0, examples, unit, InnerConfig(config.steps, config.lr, True, config.block_size))


def replay_final(trajectory: AdaptTrajectory, delta0: Optional[LoraDelta] = None) -> ParamVector:
    """Recompute theta_K from theta_0 alone, for exactness checks"""
    theta = (delta0 or trajectory.initial).factors.detach()
    for k in range(trajectory.store.total_steps):
        theta = trajectory.stepper(k, theta)
    return theta
