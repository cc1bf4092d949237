"""
Functional decoder-only transformer over ParamVector segments

The generator/solver model is a pure function of its parameters: nothing is
stored on modules, so the same code path serves plain evaluation, autograd
with create_graph, and torch.func transforms (forward-over-reverse included).
Only basic differentiable ops are used (one-hot matmul for embedding lookups,
hand-written layer norm and log-softmax) so every op supports second order.

A LoraDelta adds c * B @ A to the attention projections of every block. The
delta is what the inner loop adapts; base parameters stay frozen there.
"""

import math
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import structlog
import torch

from engine.diffcore import DTYPE, ParamVector
from utils.errors import ContractError

logger = structlog.get_logger()

MASK_VALUE = -1e30
LORA_TARGETS = ("wq", "wk", "wv", "wo")


# ============================================================================
# VOCABULARY
# ============================================================================

PAD = "<pad>"
TASK = "<task>"
QUERY = "<query>"
ANSWER = "<ans>"
EXAMPLE = "<ex>"
SOLUTION = "<sol>"
END = "<end>"
ARROW = "->"
SEP = ";"

DEFAULT_SYMBOLS: Tuple[str, ...] = (
    PAD, TASK, QUERY, ANSWER, EXAMPLE, SOLUTION, END,
    *(str(d) for d in range(10)),
    ARROW, SEP, "+", "*", "=", "mod",
)

_TOKEN_RE = re.compile(r"<[a-z]+>|->|mod|\d|[;+*=]")


class Vocab:
    """Fixed symbol table; digits are single tokens, markers are bracketed"""

    def __init__(self, symbols: Sequence[str] = DEFAULT_SYMBOLS):
        if len(set(symbols)) != len(symbols):
            raise ContractError("vocabulary symbols must be unique")
        self.symbols: Tuple[str, ...] = tuple(symbols)
        self._ids: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise ContractError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token: int) -> str:
        if not 0 <= token < self.size:
            raise ContractError(f"token id {token} outside vocabulary of size {self.size}")
        return self.symbols[token]

    def is_digit(self, token: int) -> bool:
        return 0 <= token < self.size and self.symbols[token].isdigit()

    def digits(self, value: int) -> List[int]:
        """Token ids of the decimal digits of a non-negative integer"""
        if value < 0:
            raise ContractError(f"only non-negative numbers are encodable, got {value}")
        return [self._ids[c] for c in str(value)]

    def encode(self, text: str) -> List[int]:
        """
        Tokenize whitespace-separated text; multi-digit numbers split per digit

        Raises:
            ContractError: text contains something outside the vocabulary
        """
        tokens: List[int] = []
        pos = 0
        for match in _TOKEN_RE.finditer(text):
            gap = text[pos:match.start()]
            if gap.strip():
                raise ContractError(f"cannot tokenize {gap.strip()!r}")
            tokens.append(self.id(match.group()))
            pos = match.end()
        if text[pos:].strip():
            raise ContractError(f"cannot tokenize {text[pos:].strip()!r}")
        return tokens

    def decode(self, tokens: Sequence[int]) -> str:
        """Space-separated symbols with digit runs glued into numbers"""
        pieces: List[str] = []
        previous_digit = False
        for token in tokens:
            symbol = self.symbol(int(token))
            digit = symbol.isdigit()
            if digit and previous_digit:
                pieces[-1] += symbol
            else:
                pieces.append(symbol)
            previous_digit = digit
        return " ".join(pieces)


VOCAB = Vocab()


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB.size
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    context: int = 128
    lora_rank: int = 4
    lora_scale: float = 0.5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if min(self.d_model, self.n_heads, self.context, self.vocab_size) < 1:
            raise ContractError("model dimensions must be positive")

    @classmethod
    def from_run_config(cls, config) -> "ModelConfig":
        return cls(
            vocab_size=VOCAB.size,
            d_model=config.d_model,
            n_blocks=config.n_blocks,
            n_heads=config.n_heads,
            context=config.context,
            lora_rank=config.lora_rank,
            lora_scale=config.lora_scale,
        )


@dataclass(frozen=True)
class ModelParams:
    """Architecture plus the flat named parameter segments"""

    config: ModelConfig
    vector: ParamVector

    def with_vector(self, vector: ParamVector) -> "ModelParams":
        self.vector.check_layout(vector, "model parameters")
        return replace(self, vector=vector)

    def detached(self) -> "ModelParams":
        return replace(self, vector=self.vector.detach())

    def digest(self) -> str:
        return self.vector.digest()


@dataclass(frozen=True)
class LoraDelta:
    """Low-rank factors {target}.lora_a (r x in) and {target}.lora_b (out x r)"""

    factors: ParamVector
    scale: float

    @property
    def targets(self) -> Tuple[str, ...]:
        return tuple(n[: -len(".lora_a")] for n in self.factors.names() if n.endswith(".lora_a"))

    def with_factors(self, factors: ParamVector) -> "LoraDelta":
        self.factors.check_layout(factors, "adapter factors")
        return replace(self, factors=factors)


def _normal(shape, std: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return torch.randn(shape, dtype=DTYPE, generator=generator) * std


def init_block(prefix: str, width: int, generator: Optional[torch.Generator]) -> Dict[str, torch.Tensor]:
    """One pre-norm attention + MLP block; shared with the scorer encoder"""
    std = 1.0 / math.sqrt(width)
    hidden = 4 * width
    return {
        f"{prefix}.ln1.weight": torch.ones(width, dtype=DTYPE),
        f"{prefix}.ln1.bias": torch.zeros(width, dtype=DTYPE),
        f"{prefix}.attn.wq": _normal((width, width), std, generator),
        f"{prefix}.attn.wk": _normal((width, width), std, generator),
        f"{prefix}.attn.wv": _normal((width, width), std, generator),
        f"{prefix}.attn.wo": _normal((width, width), std, generator),
        f"{prefix}.ln2.weight": torch.ones(width, dtype=DTYPE),
        f"{prefix}.ln2.bias": torch.zeros(width, dtype=DTYPE),
        f"{prefix}.mlp.w1": _normal((hidden, width), std, generator),
        f"{prefix}.mlp.b1": torch.zeros(hidden, dtype=DTYPE),
        f"{prefix}.mlp.w2": _normal((width, hidden), 1.0 / math.sqrt(hidden), generator),
        f"{prefix}.mlp.b2": torch.zeros(width, dtype=DTYPE),
    }


def init_params(config: ModelConfig, generator: Optional[torch.Generator] = None) -> ModelParams:
    d = config.d_model
    segments: Dict[str, torch.Tensor] = {
        "embed.tok": _normal((config.vocab_size, d), 0.1, generator),
        "embed.pos": _normal((config.context, d), 0.02, generator),
    }
    for i in range(config.n_blocks):
        segments.update(init_block(f"blocks.{i}", d, generator))
    segments["ln_f.weight"] = torch.ones(d, dtype=DTYPE)
    segments["ln_f.bias"] = torch.zeros(d, dtype=DTYPE)
    segments["head.weight"] = _normal((config.vocab_size, d), 1.0 / math.sqrt(d), generator)
    return ModelParams(config=config, vector=ParamVector(segments))


def init_lora(config: ModelConfig, generator: Optional[torch.Generator] = None) -> LoraDelta:
    """A ~ N(0, 1/in), B = 0, so the fresh delta leaves the model unchanged"""
    d, r = config.d_model, config.lora_rank
    factors: Dict[str, torch.Tensor] = {}
    for i in range(config.n_blocks):
        for target in LORA_TARGETS:
            name = f"blocks.{i}.attn.{target}"
            factors[f"{name}.lora_a"] = _normal((r, d), 1.0 / math.sqrt(d), generator)
            factors[f"{name}.lora_b"] = torch.zeros(d, r, dtype=DTYPE)
    return LoraDelta(factors=ParamVector(factors), scale=config.lora_scale)


def apply_lora(vector: ParamVector, delta: LoraDelta) -> ParamVector:
    """W + c * B @ A for every adapted target of vector"""
    updates = {}
    for target in delta.targets:
        if target not in vector:
            raise ContractError(f"adapter target '{target}' not in parameters")
        weight = vector[target]
        a = delta.factors[f"{target}.lora_a"]
        b = delta.factors[f"{target}.lora_b"]
        if a.shape[1] != weight.shape[1] or b.shape[0] != weight.shape[0] or a.shape[0] != b.shape[1]:
            raise ContractError(
                f"adapter shapes {tuple(b.shape)} @ {tuple(a.shape)} do not fit '{target}' {tuple(weight.shape)}"
            )
        updates[target] = weight + delta.scale * (b @ a)
    return vector.replace(updates)


def lora_merge(params: ModelParams, delta: LoraDelta) -> ModelParams:
    return replace(params, vector=apply_lora(params.vector, delta))


# ============================================================================
# LAYERS
# ============================================================================

def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    centered = x - x.mean(dim=-1, keepdim=True)
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered * torch.rsqrt(var + eps) * weight + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def log_softmax(z: torch.Tensor) -> torch.Tensor:
    shift = z.max(dim=-1, keepdim=True).values.detach()
    shifted = z - shift
    return shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))


def softmax(z: torch.Tensor) -> torch.Tensor:
    return torch.exp(log_softmax(z))


def one_hot(tokens: torch.Tensor, size: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(tokens, size).to(DTYPE)


def attention(
    x: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    n_heads: int,
    causal: bool,
) -> torch.Tensor:
    length, width = x.shape
    head_dim = width // n_heads

    def heads(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(length, n_heads, head_dim).transpose(0, 1)

    q, k, v = heads(x @ wq.T), heads(x @ wk.T), heads(x @ wv.T)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)
    if causal:
        mask = torch.triu(torch.full((length, length), MASK_VALUE, dtype=DTYPE), diagonal=1)
        scores = scores + mask
    mixed = softmax(scores) @ v
    return mixed.transpose(0, 1).reshape(length, width) @ wo.T


def transformer_block(
    x: torch.Tensor,
    weights: ParamVector,
    prefix: str,
    n_heads: int,
    causal: bool = True,
    delta: Optional[LoraDelta] = None,
) -> torch.Tensor:
    def w(name: str) -> torch.Tensor:
        full = f"{prefix}.{name}"
        weight = weights[full]
        if delta is not None and f"{full}.lora_a" in delta.factors:
            weight = weight + delta.scale * (delta.factors[f"{full}.lora_b"] @ delta.factors[f"{full}.lora_a"])
        return weight

    h = layer_norm(x, w("ln1.weight"), w("ln1.bias"))
    x = x + attention(h, w("attn.wq"), w("attn.wk"), w("attn.wv"), w("attn.wo"), n_heads, causal)
    h = layer_norm(x, w("ln2.weight"), w("ln2.bias"))
    h = gelu(h @ w("mlp.w1").T + w("mlp.b1"))
    return x + h @ w("mlp.w2").T + w("mlp.b2")


# ============================================================================
# MODEL
# ============================================================================

def _as_tokens(tokens, config: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.dim() != 1 or t.numel() == 0:
        raise ContractError("expected a non-empty 1-d token sequence")
    if t.numel() > config.context:
        raise ContractError(f"sequence of {t.numel()} tokens exceeds context {config.context}")
    if int(t.min()) < 0 or int(t.max()) >= config.vocab_size:
        raise ContractError(f"token ids must lie in [0, {config.vocab_size})")
    return t


def forward(params: ModelParams, delta: Optional[LoraDelta], tokens) -> torch.Tensor:
    """Next-token logits, shape (T, vocab)"""
    config = params.config
    t = _as_tokens(tokens, config)
    p = params.vector
    x = one_hot(t, config.vocab_size) @ p["embed.tok"] + p["embed.pos"][: t.numel()]
    for i in range(config.n_blocks):
        x = transformer_block(x, p, f"blocks.{i}", config.n_heads, causal=True, delta=delta)
    x = layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
    return x @ p["head.weight"].T


def _target_logprobs(params: ModelParams, delta: Optional[LoraDelta], tokens, loss_mask):
    config = params.config
    t = _as_tokens(tokens, config)
    if t.numel() < 2:
        raise ContractError("need at least two tokens to score a continuation")
    mask = torch.as_tensor(loss_mask, dtype=DTYPE)
    if mask.shape != t.shape:
        raise ContractError(f"loss mask shape {tuple(mask.shape)} != tokens {tuple(t.shape)}")
    # position 0 is never a target
    weights = mask[1:]
    if float(weights.sum()) <= 0.0:
        raise ContractError("loss mask selects no target positions")
    logp = log_softmax(forward(params, delta, t[:-1]))
    picked = (logp * one_hot(t[1:], config.vocab_size)).sum(dim=-1)
    return picked, weights


def nll(params: ModelParams, delta: Optional[LoraDelta], tokens, loss_mask) -> torch.Tensor:
    """Mean next-token negative log-likelihood over masked target positions"""
    picked, weights = _target_logprobs(params, delta, tokens, loss_mask)
    return -(picked * weights).sum() / weights.sum()


def logprob(params: ModelParams, delta: Optional[LoraDelta], tokens, loss_mask) -> torch.Tensor:
    """Summed log-probability of the masked target positions"""
    picked, weights = _target_logprobs(params, delta, tokens, loss_mask)
    return (picked * weights).sum()


def continuation_mask(prompt_length: int, continuation_length: int) -> List[float]:
    return [0.0] * prompt_length + [1.0] * continuation_length


# ============================================================================
# SAMPLING
# ============================================================================

@dataclass(frozen=True)
class SamplerConfig:
    temperature: float
    max_new_tokens: int
    seed: int


@dataclass(frozen=True)
class SampleResult:
    tokens: Tuple[int, ...]
    truncated: bool


def sample(
    params: ModelParams,
    delta: Optional[LoraDelta],
    prompt: Sequence[int],
    sampler: SamplerConfig,
) -> SampleResult:
    """
    Autoregressive continuation of prompt; stops after END, at max_new_tokens
    or at the context limit. Temperature 0 is greedy (first maximum on ties).
    """
    if sampler.temperature < 0:
        raise ContractError(f"temperature must be >= 0, got {sampler.temperature}")
    end_id = VOCAB.id(END)
    generator = torch.Generator(device="cpu")
    generator.manual_seed(sampler.seed)

    sequence = list(prompt)
    out: List[int] = []
    with torch.no_grad():
        for _ in range(sampler.max_new_tokens):
            if len(sequence) >= params.config.context:
                break
            logits = forward(params, delta, sequence)[-1]
            if sampler.temperature == 0:
                token = int(torch.argmax(logits))
            else:
                probs = softmax(logits / sampler.temperature)
                token = int(torch.multinomial(probs, 1, generator=generator))
            out.append(token)
            sequence.append(token)
            if token == end_id:
                return SampleResult(tokens=tuple(out), truncated=False)

    return SampleResult(tokens=tuple(out), truncated=sampler.max_new_tokens > 0)
