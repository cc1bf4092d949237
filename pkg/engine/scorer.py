"""
Example scorer s_eta(task, p, a) in (0, 1)

A one-block bidirectional encoder over `[task prompt] <sol> p <sol> a`,
mean-pooled, followed by a linear head and a sigmoid. It shares the
vocabulary of the generator but none of its parameters.
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import torch

from engine.diffcore import DTYPE, ParamVector
from engine.seqmodel import SOLUTION, VOCAB, init_block, layer_norm, one_hot, transformer_block
from engine.taskgen import AuxExample, Task, render
from utils.errors import ContractError


@dataclass(frozen=True)
class ScorerConfig:
    vocab_size: int = VOCAB.size
    width: int = 16
    n_heads: int = 2
    context: int = 64

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ContractError(f"scorer width {self.width} not divisible by {self.n_heads} heads")

    @classmethod
    def from_run_config(cls, config) -> "ScorerConfig":
        return cls(
            vocab_size=VOCAB.size,
            width=config.scorer_width,
            n_heads=config.scorer_heads,
            context=config.scorer_context,
        )


@dataclass(frozen=True)
class ScorerParams:
    config: ScorerConfig
    vector: ParamVector

    def with_vector(self, vector: ParamVector) -> "ScorerParams":
        self.vector.check_layout(vector, "scorer parameters")
        return replace(self, vector=vector)

    def detached(self) -> "ScorerParams":
        return replace(self, vector=self.vector.detach())


def init_scorer(config: ScorerConfig, generator: Optional[torch.Generator] = None) -> ScorerParams:
    """Random encoder, zero head: every score starts at exactly 0.5"""
    w = config.width
    segments: Dict[str, torch.Tensor] = {
        "embed.tok": torch.randn(config.vocab_size, w, dtype=DTYPE, generator=generator) * 0.1,
        "embed.pos": torch.randn(config.context, w, dtype=DTYPE, generator=generator) * 0.02,
    }
    segments.update(init_block("encoder", w, generator))
    segments["ln_f.weight"] = torch.ones(w, dtype=DTYPE)
    segments["ln_f.bias"] = torch.zeros(w, dtype=DTYPE)
    segments["head.weight"] = torch.zeros(w, dtype=DTYPE)
    segments["head.bias"] = torch.zeros(1, dtype=DTYPE)
    return ScorerParams(config=config, vector=ParamVector(segments))


def scorer_input(task: Task, example: AuxExample) -> List[int]:
    if not example.parsed:
        raise ContractError("cannot score an unparsed example")
    sep = VOCAB.id(SOLUTION)
    return (
        render(task)
        + [sep]
        + VOCAB.digits(int(example.problem))
        + [sep]
        + VOCAB.digits(int(example.answer))
    )


def score(eta: ScorerParams, task: Task, example: AuxExample) -> torch.Tensor:
    """Differentiable scalar in (0, 1)"""
    tokens = scorer_input(task, example)
    config = eta.config
    if len(tokens) > config.context:
        raise ContractError(f"scorer input of {len(tokens)} tokens exceeds context {config.context}")
    p = eta.vector
    t = torch.tensor(tokens, dtype=torch.long)
    x = one_hot(t, config.vocab_size) @ p["embed.tok"] + p["embed.pos"][: len(tokens)]
    x = transformer_block(x, p, "encoder", config.n_heads, causal=False)
    x = layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
    logit = (x.mean(dim=0) * p["head.weight"]).sum() + p["head.bias"][0]
    return torch.sigmoid(logit)


def score_all(eta: ScorerParams, task: Task, examples: Sequence[AuxExample]) -> torch.Tensor:
    """Scores aligned index-for-index with examples; empty input gives an empty vector"""
    if not examples:
        return torch.zeros(0, dtype=DTYPE)
    return torch.stack([score(eta, task, example) for example in examples])

