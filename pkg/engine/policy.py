"""
Generator objectives

Rewards come from the meta-signal (-dL_outer/ds_i), advantages are
normalized within each task's group of m samples, and the generator is
trained on L_generator = L_aux + gamma * L_solve where both policy terms use
the clipped probability-ratio surrogate.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import structlog
import torch

from engine.diffcore import DTYPE
from engine.seqmodel import LoraDelta, ModelParams, continuation_mask, logprob, nll
from engine.taskgen import Attempt, Task, gold_sequence, solve_prompt
from utils.errors import ContractError

logger = structlog.get_logger()

ADVANTAGE_EPS = 1e-8


@dataclass(frozen=True)
class GeneratorLossSpec:
    clip_epsilon: float = 0.2
    gamma: float = 0.5
    solve_variant: Literal["gold-sft", "verifier-grpo"] = "verifier-grpo"
    attempts: int = 6

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ContractError(f"clip epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def from_run_config(cls, config) -> "GeneratorLossSpec":
        return cls(
            clip_epsilon=config.clip_epsilon,
            gamma=config.gamma,
            solve_variant="gold-sft" if config.outer_variant == "gold" else "verifier-grpo",
            attempts=config.n_attempts,
        )


@dataclass(frozen=True)
class RolloutGroup:
    """m sampled outputs for one prompt, frozen at sampling time"""

    inputs: Tuple[Tuple[int, ...], ...]
    outputs: Tuple[Tuple[int, ...], ...]
    old_logprobs: torch.Tensor
    parsed: Tuple[bool, ...]
    rewards: torch.Tensor
    advantages: torch.Tensor

    def __len__(self) -> int:
        return len(self.outputs)


def rewards_from_sensitivities(
    sensitivities: torch.Tensor, parsed: Sequence[bool], penalty: float = 1.0
) -> torch.Tensor:
    """r_i = -sensitivity_i for parsed samples, -penalty otherwise"""
    if sensitivities.numel() != len(parsed):
        raise ContractError(f"{sensitivities.numel()} sensitivities for {len(parsed)} samples")
    mask = torch.tensor(list(parsed), dtype=torch.bool)
    return torch.where(mask, -sensitivities.detach().to(DTYPE), torch.full_like(sensitivities, -penalty, dtype=DTYPE))


def group_advantages(rewards: torch.Tensor) -> torch.Tensor:
    """(r - mean) / (population std + 1e-8); all zero when the group has no spread"""
    if rewards.numel() == 0:
        raise ContractError("cannot normalize an empty group")
    rewards = rewards.detach().to(DTYPE)
    centered = rewards - rewards.mean()
    std = rewards.std(correction=0)
    if float(std) < ADVANTAGE_EPS:
        return torch.zeros_like(rewards)
    return centered / (std + ADVANTAGE_EPS)


def build_group(
    inputs: Sequence[Sequence[int]],
    outputs: Sequence[Sequence[int]],
    old_logprobs: Sequence[float],
    parsed: Sequence[bool],
    rewards: torch.Tensor,
) -> RolloutGroup:
    if not len(inputs) == len(outputs) == len(old_logprobs) == len(parsed) == rewards.numel():
        raise ContractError("rollout group fields are not aligned")
    return RolloutGroup(
        inputs=tuple(tuple(x) for x in inputs),
        outputs=tuple(tuple(y) for y in outputs),
        old_logprobs=torch.tensor(list(old_logprobs), dtype=DTYPE),
        parsed=tuple(parsed),
        rewards=rewards.detach().to(DTYPE),
        advantages=group_advantages(rewards),
    )


def sequence_logprob(
    params: ModelParams, delta: Optional[LoraDelta], prompt: Sequence[int], output: Sequence[int]
) -> torch.Tensor:
    """log pi(output | prompt); 0 for an empty output"""
    if not output:
        return torch.zeros((), dtype=DTYPE)
    tokens = list(prompt) + list(output)
    return logprob(params, delta, tokens, continuation_mask(len(prompt), len(output)))


def clipped_surrogate(
    new_logprobs: torch.Tensor, old_logprobs: torch.Tensor, advantages: torch.Tensor, clip_epsilon: float
) -> torch.Tensor:
    """-mean_i min(ratio_i * A_i, clip(ratio_i, 1 - eps, 1 + eps) * A_i)"""
    ratio = torch.exp(new_logprobs - old_logprobs)
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return -torch.minimum(ratio * advantages, clipped * advantages).mean()


def aux_surrogate(
    params_new: ModelParams,
    group: RolloutGroup,
    clip_epsilon: float,
    delta: Optional[LoraDelta] = None,
) -> torch.Tensor:
    if len(group) == 0:
        raise ContractError("empty rollout group")
    new = torch.stack([
        sequence_logprob(params_new, delta, x, y) for x, y in zip(group.inputs, group.outputs)
    ])
    return clipped_surrogate(new, group.old_logprobs, group.advantages, clip_epsilon)


def solve_loss_gold(params_new: ModelParams, task: Task) -> torch.Tensor:
    """SFT cross-entropy on the gold answer under the unadapted generator"""
    tokens, mask = gold_sequence(task)
    return nll(params_new, None, tokens, mask)


def verifier_group(task: Task, attempts: Sequence[Attempt]) -> RolloutGroup:
    """Binary verifier rewards; old log-probs are those recorded under the adapted model"""
    if not attempts:
        raise ContractError("verifier loss needs at least one attempt")
    prompt = tuple(solve_prompt(task))
    rewards = torch.tensor([1.0 if a.verified else 0.0 for a in attempts], dtype=DTYPE)
    return build_group(
        inputs=[prompt] * len(attempts),
        outputs=[a.tokens for a in attempts],
        old_logprobs=[a.logprob for a in attempts],
        parsed=[a.answer is not None for a in attempts],
        rewards=rewards,
    )


def solve_loss_verifier(
    params_new: ModelParams,
    task: Task,
    attempts: Sequence[Attempt],
    clip_epsilon: float,
) -> torch.Tensor:
    group = verifier_group(task, attempts)
    if not bool(group.advantages.any()):
        # zero-variance group contributes nothing
        return torch.zeros((), dtype=DTYPE)
    return aux_surrogate(params_new, group, clip_epsilon)


def generator_loss(aux: torch.Tensor, solve: torch.Tensor, gamma: float) -> torch.Tensor:
    return aux + gamma * solve


def mean_or_zero(values: List[torch.Tensor]) -> torch.Tensor:
    if not values:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(values).mean()
