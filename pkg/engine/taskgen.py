"""
Affine-modular task family

A task hides a rule y = (a*x + b) mod M, shows n_d demonstrations and asks for
the image of a query x*. Also owns everything that turns model text into
values: the prompts, the auxiliary-example grammar `<ex> x -> y <end>`,
answer extraction and verification.
"""

import math
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from engine.seqmodel import ANSWER, ARROW, END, EXAMPLE, PAD, QUERY, SEP, TASK, VOCAB, continuation_mask
from utils.errors import ContractError
from utils.seeding import derive_seed, numpy_stream

logger = structlog.get_logger()

N_FAMILIES = 3


@dataclass(frozen=True)
class DifficultyConfig:
    modulus_min: int = 7
    modulus_max: int = 23
    n_demos: int = 3

    def __post_init__(self):
        if not 2 <= self.modulus_min <= self.modulus_max:
            raise ContractError("modulus range must satisfy 2 <= min <= max")
        if not 1 <= self.n_demos < self.modulus_min:
            raise ContractError("n_demos must lie in [1, modulus_min)")

    @classmethod
    def from_run_config(cls, config) -> "DifficultyConfig":
        return cls(config.modulus_min, config.modulus_max, config.n_demos)

    def family_edges(self) -> List[Tuple[int, int]]:
        """Contiguous modulus ranges, as equal as possible"""
        moduli = list(range(self.modulus_min, self.modulus_max + 1))
        count = min(N_FAMILIES, len(moduli))
        size = math.ceil(len(moduli) / count)
        return [(chunk[0], chunk[-1]) for chunk in (moduli[i:i + size] for i in range(0, len(moduli), size))]

    def family_of(self, modulus: int) -> str:
        for low, high in self.family_edges():
            if low <= modulus <= high:
                return f"mod{low:02d}-{high:02d}"
        raise ContractError(f"modulus {modulus} outside [{self.modulus_min}, {self.modulus_max}]")


class Task(BaseModel):
    """One rule-induction problem; serialized as one JSON line in task sets"""

    model_config = ConfigDict(frozen=True)

    a: int
    b: int
    modulus: int
    demos: Tuple[Tuple[int, int], ...]
    query: int
    gold: int
    family: str
    seed: int

    @model_validator(mode="after")
    def _check_rule(self) -> "Task":
        if self.modulus < 2:
            raise ValueError("modulus must be >= 2")
        for x, y in self.demos:
            if y != self.apply(x):
                raise ValueError(f"demo ({x}, {y}) violates the rule")
        if self.gold != self.apply(self.query):
            raise ValueError("gold answer violates the rule")
        if any(x == self.query for x, _ in self.demos):
            raise ValueError("query appears among the demos")
        return self

    def apply(self, x: int) -> int:
        return (self.a * x + self.b) % self.modulus

    @property
    def rule(self) -> Tuple[int, int, int]:
        return (self.a, self.b, self.modulus)

    @classmethod
    def from_rule(
        cls,
        a: int,
        b: int,
        modulus: int,
        demo_inputs: Sequence[int],
        query: int,
        family: str = "custom",
        seed: int = 0,
    ) -> "Task":
        demos = tuple((x, (a * x + b) % modulus) for x in demo_inputs)
        return cls(
            a=a, b=b, modulus=modulus, demos=demos, query=query,
            gold=(a * query + b) % modulus, family=family, seed=seed,
        )


# ============================================================================
# SAMPLING
# ============================================================================

def _rule_space(difficulty: DifficultyConfig) -> List[Tuple[int, int]]:
    """(modulus, number of (a, b, x*) combinations) per modulus"""
    return [(m, (m - 1) * m * m) for m in range(difficulty.modulus_min, difficulty.modulus_max + 1)]


def _stride(total: int) -> int:
    stride = 2654435761 % total
    while stride < 2 or math.gcd(stride, total) != 1:
        stride += 1
    return stride % total or 1


def sample_task(seed: int, difficulty: DifficultyConfig) -> Task:
    """
    Deterministic task for a seed.

    Seeds map bijectively onto (M, a, b, x*) combinations modulo the size of
    that space, so distinct seeds below the space size never collide.
    """
    if seed < 0:
        raise ContractError(f"task seed must be >= 0, got {seed}")
    space = _rule_space(difficulty)
    total = sum(size for _, size in space)
    index = (seed * _stride(total) + total // 3) % total

    for modulus, size in space:
        if index < size:
            break
        index -= size
    a = 1 + index // (modulus * modulus)
    b = (index // modulus) % modulus
    query = index % modulus

    rng = numpy_stream(seed, "task-demos")
    candidates = [x for x in range(modulus) if x != query]
    demo_inputs = [int(x) for x in rng.choice(candidates, size=difficulty.n_demos, replace=False)]
    return Task.from_rule(a, b, modulus, demo_inputs, query, difficulty.family_of(modulus), seed)


def is_eval_rule(rule: Tuple[int, int, int], fraction: float, master_seed: int = 0) -> bool:
    return derive_seed(master_seed, "rule-split", *rule) % 10_000 < int(round(fraction * 10_000))


def make_task_split(config) -> Tuple[List[Task], List[Task]]:
    """
    Train and eval task lists, disjoint by rule

    Raises:
        ContractError: the rule space is too small for the requested counts
    """
    difficulty = DifficultyConfig.from_run_config(config)
    total = sum(size for _, size in _rule_space(difficulty))
    base = config.master_seed * total
    train: List[Task] = []
    evaluation: List[Task] = []

    for offset in range(total):
        if len(train) >= config.n_train_tasks and len(evaluation) >= config.n_eval_tasks:
            break
        task = sample_task(base + offset, difficulty)
        if is_eval_rule(task.rule, config.eval_rule_fraction, config.master_seed):
            if len(evaluation) < config.n_eval_tasks:
                evaluation.append(task)
        elif len(train) < config.n_train_tasks:
            train.append(task)

    if len(train) < config.n_train_tasks or len(evaluation) < config.n_eval_tasks:
        raise ContractError(
            f"rule space yields {len(train)} train / {len(evaluation)} eval tasks, "
            f"requested {config.n_train_tasks} / {config.n_eval_tasks}"
        )
    logger.info("task_split_created", train=len(train), eval=len(evaluation))
    return train, evaluation


# ============================================================================
# PROMPTS
# ============================================================================

def _context_tokens(task: Task, query: int) -> List[int]:
    tokens = [VOCAB.id(TASK)]
    for x, y in task.demos:
        tokens += VOCAB.digits(x) + [VOCAB.id(ARROW)] + VOCAB.digits(y) + [VOCAB.id(SEP)]
    return tokens + [VOCAB.id(QUERY)] + VOCAB.digits(query)


def render(task: Task) -> List[int]:
    """`<task> x -> y ; ... <query> x* <ans>`"""
    return _context_tokens(task, task.query) + [VOCAB.id(ANSWER)]


def render_with_query(task: Task, query: int) -> List[int]:
    return _context_tokens(task, query) + [VOCAB.id(ANSWER)]


def solve_prompt(task: Task) -> List[int]:
    return render(task)


def aux_prompt(task: Task) -> List[int]:
    """Task context followed by `<ex>`; the generator continues with `x -> y <end>`"""
    return _context_tokens(task, task.query) + [VOCAB.id(EXAMPLE)]


def answer_tokens(value: int) -> List[int]:
    return VOCAB.digits(value) + [VOCAB.id(END)]


def gold_sequence(task: Task) -> Tuple[List[int], List[float]]:
    """Prompt plus gold answer, with the loss mask over the answer and `<end>`"""
    prompt = solve_prompt(task)
    answer = answer_tokens(task.gold)
    return prompt + answer, continuation_mask(len(prompt), len(answer))


# ============================================================================
# AUXILIARY EXAMPLES
# ============================================================================

_EXAMPLE_RE = re.compile(r"<ex> ((?:\d )+)-> ((?:\d )+)<end>")


@dataclass(frozen=True)
class AuxExample:
    raw: Tuple[int, ...]
    parsed: bool
    problem: Optional[str] = None
    answer: Optional[str] = None
    tokens: Tuple[int, ...] = ()
    loss_mask: Tuple[float, ...] = ()


def parse_aux(raw: Sequence[int]) -> Optional[Tuple[str, str]]:
    """(p, a) when raw is exactly one `<ex> digits -> digits <end>`, else None"""
    pad = VOCAB.id(PAD)
    tokens = list(raw)
    while tokens and tokens[-1] == pad:
        tokens.pop()
    if not all(isinstance(t, int) and 0 <= t < VOCAB.size for t in tokens):
        return None
    text = " ".join(VOCAB.symbols[t] for t in tokens)
    matches = list(_EXAMPLE_RE.finditer(text))
    if len(matches) != 1 or matches[0].span() != (0, len(text)):
        return None
    problem, answer = (group.replace(" ", "") for group in matches[0].groups())
    return _normalize(problem), _normalize(answer)


def _normalize(digits: str) -> str:
    return digits.lstrip("0") or "0"


def make_aux_example(task: Task, raw: Sequence[int]) -> AuxExample:
    """Parse raw and, on success, build its supervised training sequence"""
    raw = tuple(int(t) for t in raw)
    parsed = parse_aux(raw)
    if parsed is None:
        return AuxExample(raw=raw, parsed=False)
    problem, answer = parsed
    prompt = render_with_query(task, int(problem))
    target = answer_tokens(int(answer))
    return AuxExample(
        raw=raw,
        parsed=True,
        problem=problem,
        answer=answer,
        tokens=tuple(prompt + target),
        loss_mask=tuple(continuation_mask(len(prompt), len(target))),
    )


def example_from_task(task: Task) -> AuxExample:
    """A solved training task as a supervised example (TTT baseline)"""
    tokens, mask = gold_sequence(task)
    raw = [VOCAB.id(EXAMPLE)] + VOCAB.digits(task.query) + [VOCAB.id(ARROW)] + answer_tokens(task.gold)
    return AuxExample(
        raw=tuple(raw),
        parsed=True,
        problem=str(task.query),
        answer=str(task.gold),
        tokens=tuple(tokens),
        loss_mask=tuple(mask),
    )


# ============================================================================
# ATTEMPTS AND VERIFICATION
# ============================================================================

@dataclass(frozen=True)
class Attempt:
    tokens: Tuple[int, ...]
    answer: Optional[str]
    verified: bool
    logprob: float = 0.0


def extract_answer(tokens: Sequence[int]) -> Optional[str]:
    """Digits before the first `<end>` (padding ignored); None if anything else is there"""
    end, pad = VOCAB.id(END), VOCAB.id(PAD)
    span: List[int] = []
    for token in tokens:
        if token == end:
            break
        if token != pad:
            span.append(token)
    if not span or not all(VOCAB.is_digit(t) for t in span):
        return None
    return _normalize("".join(VOCAB.symbols[t] for t in span))


def verify_tokens(task: Task, tokens: Sequence[int]) -> bool:
    answer = extract_answer(tokens)
    return answer is not None and answer == str(task.gold)


def verify(task: Task, attempt_text: str) -> bool:
    try:
        tokens = VOCAB.encode(attempt_text)
    except ContractError:
        return False
    return verify_tokens(task, tokens)


def make_attempt(task: Task, tokens: Sequence[int], logprob: float = 0.0) -> Attempt:
    tokens = tuple(int(t) for t in tokens)
    return Attempt(
        tokens=tokens,
        answer=extract_answer(tokens),
        verified=verify_tokens(task, tokens),
        logprob=logprob,
    )
