"""
Meta-training loop, test-time adaptation, baselines and evaluation

Per task, one meta-step runs strictly in this order:
    generate -> score -> adapt -> outer
and the step then updates the scorer from the mean g_eta and (after warmup)
the generator from the pooled rollout groups. Tasks of a meta-batch may be
processed on a thread pool; results are reduced in task order so serial and
parallel runs agree bit-for-bit.
"""

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import structlog
import torch
from pydantic import BaseModel

from config import RunConfig
from engine import store
from engine.adapt import InnerConfig, adapt, adapt_unweighted
from engine.diffcore import DTYPE
from engine.metagrad import (
    MetaGrads,
    OuterLossSpec,
    build_problem,
    compute_meta_grads,
    outer_loss_gold,
    outer_loss_verified,
)
from engine.policy import (
    GeneratorLossSpec,
    RolloutGroup,
    aux_surrogate,
    build_group,
    generator_loss,
    mean_or_zero,
    rewards_from_sensitivities,
    sequence_logprob,
    solve_loss_gold,
    solve_loss_verifier,
)
from engine.scorer import ScorerConfig, ScorerParams, init_scorer, score_all
from engine.seqmodel import (
    ARROW,
    END,
    EXAMPLE,
    VOCAB,
    LoraDelta,
    ModelConfig,
    ModelParams,
    SamplerConfig,
    continuation_mask,
    init_lora,
    init_params,
    nll,
    sample,
)
from engine.taskgen import (
    Attempt,
    AuxExample,
    Task,
    aux_prompt,
    example_from_task,
    extract_answer,
    gold_sequence,
    make_attempt,
    make_aux_example,
    solve_prompt,
    verify,
)
from run_context import bind_meta_step
from utils.errors import NumericFault, UsageError
from utils.seeding import derive_seed, numpy_stream, stream

logger = structlog.get_logger()

BASELINES = ("base", "ttt", "tt-ss", "solver-grpo", "mass", "mass-gold")

Item = TypeVar("Item")
Result = TypeVar("Result")


def map_ordered(fn: Callable[[Item], Result], items: Sequence[Item], threads: int = 1) -> List[Result]:
    """map() on a thread pool when threads > 1; output order follows input order"""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ============================================================================
# STATE AND RECORDS
# ============================================================================

class MetricRecord(BaseModel):
    meta_step: int
    outer_losses: List[Optional[float]]
    mean_reward: Optional[float] = None
    mean_score: Optional[float] = None
    max_score: Optional[float] = None
    parse_rate: Optional[float] = None
    verified_rate: Optional[float] = None
    zero_verified_skips: int = 0
    aux_loss: Optional[float] = None
    solve_loss: Optional[float] = None
    generator_loss: Optional[float] = None
    generator_updated: bool = False
    scorer_grad_norm: float = 0.0
    retained_states: int = 0
    replayed_steps: int = 0
    fault: Optional[str] = None
    wall_time: float = 0.0

    def deterministic_view(self) -> Dict:
        return self.model_dump(exclude={"wall_time"})


@dataclass
class TrainState:
    config: RunConfig
    generator: ModelParams
    scorer: ScorerParams
    generator_optimizer: torch.optim.Optimizer
    scorer_optimizer: torch.optim.Optimizer
    meta_step: int = 0

    def generator_leaves(self) -> List[torch.Tensor]:
        return [self.generator.vector[n] for n in self.generator.vector.names()]

    def scorer_leaves(self) -> List[torch.Tensor]:
        return [self.scorer.vector[n] for n in self.scorer.vector.names()]


@dataclass
class TaskOutcome:
    task_index: int
    events: List[str]
    parsed: List[bool]
    group: Optional[RolloutGroup] = None
    grads: Optional[MetaGrads] = None
    attempts: List[Attempt] = field(default_factory=list)
    scores: Optional[torch.Tensor] = None
    skipped: bool = False

    @property
    def has_signal(self) -> bool:
        return self.grads is not None


@dataclass
class StepResult:
    state: TrainState
    record: Optional[MetricRecord]
    events: Dict[int, List[str]]


def init_train_state(
    config: RunConfig, base: ModelParams, scorer: Optional[ScorerParams] = None
) -> TrainState:
    if scorer is None:
        scorer = init_scorer(ScorerConfig.from_run_config(config), stream(config.master_seed, "init-scorer"))
    generator = ModelParams(base.config, base.vector.detach().as_leaves())
    scorer = ScorerParams(scorer.config, scorer.vector.detach().as_leaves())
    state = TrainState(
        config=config,
        generator=generator,
        scorer=scorer,
        generator_optimizer=torch.optim.Adam(
            [generator.vector[n] for n in generator.vector.names()], lr=config.generator_lr
        ),
        scorer_optimizer=torch.optim.SGD(
            [scorer.vector[n] for n in scorer.vector.names()], lr=config.meta_lr
        ),
    )
    return state


def state_to_checkpoint(state: TrainState) -> store.Checkpoint:
    return store.Checkpoint(
        config=state.config,
        generator=state.generator.vector.detach(),
        scorer=state.scorer.vector.detach(),
        meta_step=state.meta_step,
        optimizers={
            "generator": state.generator_optimizer.state_dict(),
            "scorer": state.scorer_optimizer.state_dict(),
        },
    )


def state_from_checkpoint(checkpoint: store.Checkpoint) -> TrainState:
    config = checkpoint.config
    base = ModelParams(ModelConfig.from_run_config(config), checkpoint.generator)
    scorer = ScorerParams(ScorerConfig.from_run_config(config), checkpoint.scorer)
    state = init_train_state(config, base, scorer)
    state.generator_optimizer.load_state_dict(checkpoint.optimizers["generator"])
    state.scorer_optimizer.load_state_dict(checkpoint.optimizers["scorer"])
    state.meta_step = checkpoint.meta_step
    return state


def _snapshot(state: TrainState):
    return (
        state.generator.vector.clone(),
        state.scorer.vector.clone(),
        copy.deepcopy(state.generator_optimizer.state_dict()),
        copy.deepcopy(state.scorer_optimizer.state_dict()),
    )


def _restore(state: TrainState, snapshot) -> None:
    generator, scorer, gen_opt, scorer_opt = snapshot
    with torch.no_grad():
        for name in generator:
            state.generator.vector[name].copy_(generator[name])
        for name in scorer:
            state.scorer.vector[name].copy_(scorer[name])
    state.generator_optimizer.load_state_dict(gen_opt)
    state.scorer_optimizer.load_state_dict(scorer_opt)


# ============================================================================
# GENERATION HELPERS
# ============================================================================

def generate_examples(
    params: ModelParams,
    task: Task,
    count: int,
    temperature: float,
    max_tokens: int,
    seed_path: Tuple,
    master_seed: int,
) -> Tuple[List[AuxExample], List[Tuple[int, ...]], List[float]]:
    """
    Sample count continuations of the example prompt

    Returns:
        (examples, raw continuations, old log-probs of the continuations)
    """
    prompt = aux_prompt(task)
    examples, outputs, old = [], [], []
    with torch.no_grad():
        for i in range(count):
            sampler = SamplerConfig(temperature, max_tokens, derive_seed(master_seed, *seed_path, i))
            result = sample(params, None, prompt, sampler)
            outputs.append(result.tokens)
            old.append(float(sequence_logprob(params, None, prompt, result.tokens)))
            examples.append(make_aux_example(task, (VOCAB.id(EXAMPLE),) + result.tokens))
    return examples, outputs, old


def sample_attempts(
    params: ModelParams,
    delta: Optional[LoraDelta],
    task: Task,
    count: int,
    temperature: float,
    max_tokens: int,
    seed_path: Tuple,
    master_seed: int,
) -> List[Attempt]:
    """Solution attempts with their log-probs under (params, delta), held fixed afterwards"""
    prompt = solve_prompt(task)
    attempts = []
    with torch.no_grad():
        for j in range(count):
            sampler = SamplerConfig(temperature, max_tokens, derive_seed(master_seed, *seed_path, j))
            result = sample(params, delta, prompt, sampler)
            lp = float(sequence_logprob(params, delta, prompt, result.tokens))
            attempts.append(make_attempt(task, result.tokens, lp))
    return attempts


def greedy_answer(params: ModelParams, delta: Optional[LoraDelta], task: Task, max_tokens: int) -> Optional[str]:
    result = sample(params, delta, solve_prompt(task), SamplerConfig(0.0, max_tokens, 0))
    return extract_answer(result.tokens)


# ============================================================================
# META-TRAINING
# ============================================================================

def process_task(state: TrainState, task: Task, task_index: int) -> TaskOutcome:
    """generate -> score -> adapt -> outer for one task"""
    config = state.config
    step = state.meta_step
    generator = state.generator.detached()
    scorer = state.scorer.detached()
    events: List[str] = []

    events.append("generate")
    examples, outputs, old = generate_examples(
        generator, task, config.n_candidates, config.gen_temperature, config.max_aux_tokens,
        ("aux", step, task_index), config.master_seed,
    )
    parsed_flags = [e.parsed for e in examples]
    usable = [e for e in examples if e.parsed]

    events.append("score")
    with torch.no_grad():
        scores = score_all(scorer, task, usable)

    events.append("adapt")
    inner = InnerConfig.from_run_config(config)
    delta0 = init_lora(generator.config, stream(config.master_seed, "lora", step, task_index))
    trajectory = adapt(generator, delta0, usable, scores, inner)

    events.append("outer")
    outer_spec = OuterLossSpec.from_run_config(config)
    attempts: List[Attempt] = []
    if outer_spec.variant == "gold":
        def outer_fn(delta: LoraDelta) -> torch.Tensor:
            return outer_loss_gold(generator, delta, task)
    else:
        attempts = sample_attempts(
            generator, trajectory.final, task, outer_spec.attempts, config.attempt_temperature,
            config.max_answer_tokens, ("attempt", step, task_index), config.master_seed,
        )
        if not any(a.verified for a in attempts):
            logger.info("task_skipped_no_verified", task_index=task_index, attempts=len(attempts))
            return TaskOutcome(task_index, events, parsed_flags, attempts=attempts, scores=scores, skipped=True)

        def outer_fn(delta: LoraDelta) -> torch.Tensor:
            return outer_loss_verified(generator, delta, task, attempts)

    problem = build_problem(generator, delta0, usable, scorer, task, outer_fn, inner)
    grads = compute_meta_grads(problem, config.backend, trajectory)

    sensitivities = torch.zeros(len(examples), dtype=DTYPE)
    positions = [i for i, flag in enumerate(parsed_flags) if flag]
    if positions:
        sensitivities[positions] = grads.sensitivities
    rewards = rewards_from_sensitivities(sensitivities, parsed_flags, config.unparsed_penalty)
    prompt = tuple(aux_prompt(task))
    group = build_group([prompt] * len(outputs), outputs, old, parsed_flags, rewards)

    return TaskOutcome(task_index, events, parsed_flags, group=group, grads=grads, attempts=attempts, scores=scores)


def _update_scorer(state: TrainState, outcomes: Sequence[TaskOutcome]) -> float:
    signal = [o.grads for o in outcomes if o.has_signal]
    if not signal:
        return 0.0
    total = signal[0].g_eta
    for g in signal[1:]:
        total = total + g.g_eta
    mean = total.scale(1.0 / len(signal))
    for name in state.scorer.vector.names():
        state.scorer.vector[name].grad = mean[name].clone()
    state.scorer_optimizer.step()
    state.scorer_optimizer.zero_grad(set_to_none=True)
    return float(mean.norm())


def _update_generator(
    state: TrainState, tasks: Sequence[Task], outcomes: Sequence[TaskOutcome]
) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    spec = GeneratorLossSpec.from_run_config(state.config)
    signal = [o for o in outcomes if o.has_signal]
    if not signal:
        return None, None, None

    aux_terms, solve_terms = [], []
    for outcome in signal:
        task = tasks[outcome.task_index]
        aux_terms.append(aux_surrogate(state.generator, outcome.group, spec.clip_epsilon))
        if spec.solve_variant == "gold-sft":
            solve_terms.append(solve_loss_gold(state.generator, task))
        else:
            solve_terms.append(solve_loss_verifier(state.generator, task, outcome.attempts, spec.clip_epsilon))
    aux = mean_or_zero(aux_terms)
    solve = mean_or_zero(solve_terms)
    loss = generator_loss(aux, solve, spec.gamma)

    state.generator_optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        for name in state.generator.vector.names():
            g = state.generator.vector[name].grad
            if g is not None and not bool(torch.isfinite(g).all()):
                raise NumericFault(name, "generator gradient")
        state.generator_optimizer.step()
    state.generator_optimizer.zero_grad(set_to_none=True)
    return float(aux.detach()), float(solve.detach()), float(loss.detach())


def _summarize(step: int, outcomes: Sequence[TaskOutcome], started: float) -> MetricRecord:
    scores = torch.cat([o.scores for o in outcomes if o.scores is not None and o.scores.numel()] or [torch.zeros(0)])
    rewards = torch.cat([o.group.rewards for o in outcomes if o.group is not None] or [torch.zeros(0)])
    parsed = [flag for o in outcomes for flag in o.parsed]
    attempts = [a for o in outcomes for a in o.attempts]
    grads = [o.grads for o in outcomes if o.grads is not None]
    return MetricRecord(
        meta_step=step,
        outer_losses=[o.grads.outer_loss if o.grads is not None else None for o in outcomes],
        mean_reward=float(rewards.mean()) if rewards.numel() else None,
        mean_score=float(scores.mean()) if scores.numel() else None,
        max_score=float(scores.max()) if scores.numel() else None,
        parse_rate=sum(parsed) / len(parsed) if parsed else None,
        verified_rate=sum(a.verified for a in attempts) / len(attempts) if attempts else None,
        zero_verified_skips=sum(o.skipped for o in outcomes),
        retained_states=max((g.retained_states for g in grads), default=0),
        replayed_steps=sum(g.replayed_steps for g in grads),
        wall_time=time.perf_counter() - started,
    )


def meta_train_step(state: TrainState, tasks: Sequence[Task]) -> StepResult:
    """
    One meta-iteration over a task batch

    The scorer is always updated; the generator only once meta_step >= warmup.
    On a NumericFault the parameters and optimizers are rolled back, the
    fault is recorded and the step counter still advances.
    """
    config = state.config
    step = state.meta_step
    bind_meta_step(step)
    if not tasks:
        logger.warning("empty_task_batch", meta_step=step)
        return StepResult(state=state, record=None, events={})

    started = time.perf_counter()
    snapshot = _snapshot(state)
    try:
        outcomes = map_ordered(
            lambda pair: process_task(state, pair[1], pair[0]), list(enumerate(tasks)), config.threads
        )
        record = _summarize(step, outcomes, started)
        record.scorer_grad_norm = _update_scorer(state, outcomes)
        if step >= config.warmup_steps:
            record.aux_loss, record.solve_loss, record.generator_loss = _update_generator(state, tasks, outcomes)
            record.generator_updated = record.generator_loss is not None
        state.generator.vector.assert_finite("generator")
        state.scorer.vector.assert_finite("scorer")
    except NumericFault as e:
        _restore(state, snapshot)
        logger.error("numeric_fault_rollback", meta_step=step, segment=e.segment, where=e.where)
        record = MetricRecord(meta_step=step, outer_losses=[], fault=str(e),
                              wall_time=time.perf_counter() - started)
        outcomes = []

    record.wall_time = time.perf_counter() - started
    state.meta_step = step + 1
    logger.info(
        "meta_step_done",
        meta_step=step,
        skips=record.zero_verified_skips,
        generator_updated=record.generator_updated,
        mean_reward=record.mean_reward,
        fault=record.fault,
    )
    return StepResult(state=state, record=record, events={o.task_index: o.events for o in outcomes})


def select_batch(tasks: Sequence[Task], config: RunConfig, step: int) -> List[Task]:
    if not tasks:
        return []
    rng = numpy_stream(config.master_seed, "batch", step)
    size = min(config.meta_batch_size, len(tasks))
    return [tasks[int(i)] for i in rng.choice(len(tasks), size=size, replace=False)]


def meta_train(
    config: RunConfig,
    train_tasks: Sequence[Task],
    base: ModelParams,
    out_dir: Optional[Path] = None,
    resume: Optional[store.Checkpoint] = None,
    stop_after: Optional[int] = None,
) -> TrainState:
    """
    Run meta-steps until config.meta_steps (or stop_after), logging metrics
    and checkpointing into out_dir when given
    """
    state = state_from_checkpoint(resume) if resume is not None else init_train_state(config, base)
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = store.MetricsLog(out_dir / store.METRICS_FILE, MetricRecord)
        if resume is not None:
            metrics.truncate_after(state.meta_step)

    last = config.meta_steps if stop_after is None else min(stop_after, config.meta_steps)
    logger.info("meta_train_started", start=state.meta_step, stop=last, backend=config.backend,
                outer_variant=config.outer_variant)
    while state.meta_step < last:
        batch = select_batch(train_tasks, config, state.meta_step)
        result = meta_train_step(state, batch)
        if result.record is None:
            break
        if metrics is not None and result.record is not None:
            store.append_metrics(metrics, result.record)
        if out_dir is not None and config.checkpoint_every and state.meta_step % config.checkpoint_every == 0:
            store.save_checkpoint(out_dir / store.checkpoint_name(state.meta_step), state_to_checkpoint(state))
    return state


# ============================================================================
# BASE MODEL AND SOLVER BASELINE
# ============================================================================

def _aux_training_sequence(task: Task, rng: np.random.Generator, noise: float) -> Tuple[List[int], List[float]]:
    x = int(rng.integers(task.modulus))
    y = task.apply(x) if rng.random() >= noise else int(rng.integers(task.modulus))
    prompt = aux_prompt(task)
    continuation = VOCAB.digits(x) + [VOCAB.id(ARROW)] + VOCAB.digits(y) + [VOCAB.id(END)]
    return prompt + continuation, continuation_mask(len(prompt), len(continuation))


def pretrain_base(config: RunConfig, train_tasks: Sequence[Task]) -> ModelParams:
    """Supervised warm start on solving and example-emission sequences"""
    params = init_params(ModelConfig.from_run_config(config), stream(config.master_seed, "init-generator"))
    model = ModelParams(params.config, params.vector.as_leaves())
    optimizer = torch.optim.Adam([model.vector[n] for n in model.vector.names()], lr=config.pretrain_lr)
    rng = numpy_stream(config.master_seed, "pretrain")

    for step in range(config.pretrain_steps if train_tasks else 0):
        losses = []
        for j in range(config.pretrain_batch):
            task = train_tasks[int(rng.integers(len(train_tasks)))]
            if j % 2 == 0:
                tokens, mask = gold_sequence(task)
            else:
                tokens, mask = _aux_training_sequence(task, rng, config.pretrain_aux_noise)
            losses.append(nll(model, None, tokens, mask))
        loss = torch.stack(losses).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % 50 == 0 or step == config.pretrain_steps - 1:
            logger.info("pretrain_progress", step=step, loss=round(float(loss), 4))

    return model.detached()


def train_solver_grpo(config: RunConfig, train_tasks: Sequence[Task], base: ModelParams) -> ModelParams:
    """Verifier-reward GRPO on the solving prompt, no adaptation"""
    model = ModelParams(base.config, base.vector.detach().as_leaves())
    optimizer = torch.optim.Adam([model.vector[n] for n in model.vector.names()], lr=config.generator_lr)

    for step in range(config.meta_steps):
        batch = select_batch(train_tasks, config, step)
        frozen = model.detached()
        losses = []
        for index, task in enumerate(batch):
            attempts = sample_attempts(
                frozen, None, task, config.n_attempts, config.attempt_temperature,
                config.max_answer_tokens, ("solver-grpo", step, index), config.master_seed,
            )
            losses.append(solve_loss_verifier(model, task, attempts, config.clip_epsilon))
        loss = mean_or_zero(losses)
        optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            optimizer.step()
        logger.debug("solver_grpo_step", step=step, loss=float(loss.detach()))

    return model.detached()


# ============================================================================
# TEST TIME
# ============================================================================

@dataclass(frozen=True)
class TestTimeResult:
    answer: Optional[str]
    generated: int
    parsed: int
    adapted: bool
    fallback: bool


def test_time_adapt(params: ModelParams, task: Task, config: RunConfig) -> TestTimeResult:
    """
    Self-synthesize examples, adapt on them unweighted, answer greedily

    The adapter is local to this call. When every generation fails to parse
    the unadapted model answers and the result is flagged.
    """
    frozen = params.detached()
    count = config.test_time_examples
    examples, _, _ = generate_examples(
        frozen, task, count, config.gen_temperature, config.max_aux_tokens,
        ("test-time", task.seed), config.master_seed,
    )
    usable = [e for e in examples if e.parsed]

    if not usable:
        if count:
            logger.info("test_time_fallback", task_seed=task.seed, generated=count)
        answer = greedy_answer(frozen, None, task, config.max_answer_tokens)
        return TestTimeResult(answer, count, 0, adapted=False, fallback=count > 0)

    delta0 = init_lora(frozen.config, stream(config.master_seed, "test-lora", task.seed))
    trajectory = adapt_unweighted(frozen, delta0, usable, InnerConfig.from_run_config(config, weighted=False))
    answer = greedy_answer(frozen, trajectory.final, task, config.max_answer_tokens)
    return TestTimeResult(answer, count, len(usable), adapted=True, fallback=False)


def ttt_answer(params: ModelParams, task: Task, train_tasks: Sequence[Task], config: RunConfig) -> Optional[str]:
    """Adapt on solved tasks drawn from the training pool, then answer"""
    frozen = params.detached()
    count = min(config.test_time_examples, len(train_tasks))
    if count == 0:
        return greedy_answer(frozen, None, task, config.max_answer_tokens)
    rng = numpy_stream(config.master_seed, "ttt", task.seed)
    drawn = [train_tasks[int(i)] for i in rng.choice(len(train_tasks), size=count, replace=False)]
    examples = [example_from_task(t) for t in drawn]
    delta0 = init_lora(frozen.config, stream(config.master_seed, "test-lora", task.seed))
    trajectory = adapt_unweighted(frozen, delta0, examples, InnerConfig.from_run_config(config, weighted=False))
    return greedy_answer(frozen, trajectory.final, task, config.max_answer_tokens)


# ============================================================================
# EVALUATION
# ============================================================================

class FamilyAccuracy(BaseModel):
    family: str
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


class AccuracyTable(BaseModel):
    method: str
    families: List[FamilyAccuracy]
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def family_accuracy(self) -> Dict[str, float]:
        return {f.family: f.accuracy for f in self.families}

    def rows(self) -> List[Dict]:
        rows = [
            {"method": self.method, "family": f.family, "correct": f.correct, "total": f.total, "accuracy": f.accuracy}
            for f in self.families
        ]
        rows.append({"method": self.method, "family": "all", "correct": self.correct,
                     "total": self.total, "accuracy": self.accuracy})
        return rows


RESULT_COLUMNS = ("method", "family", "correct", "total", "accuracy")


def evaluate(
    answer_fn: Callable[[Task], Optional[str]],
    suite: Sequence[Task],
    method: str = "model",
    threads: int = 1,
) -> AccuracyTable:
    """Per-family and aggregate exact-match accuracy of answer_fn on suite"""
    answers = map_ordered(answer_fn, list(suite), threads)
    counts: Dict[str, List[int]] = {}
    for task, answer in zip(suite, answers):
        entry = counts.setdefault(task.family, [0, 0])
        entry[0] += int(answer is not None and verify(task, answer))
        entry[1] += 1
    families = [FamilyAccuracy(family=f, correct=c, total=t) for f, (c, t) in sorted(counts.items())]
    table = AccuracyTable(
        method=method,
        families=families,
        correct=sum(f.correct for f in families),
        total=sum(f.total for f in families),
    )
    logger.info("evaluation_done", method=method, accuracy=round(table.accuracy, 4), tasks=table.total)
    return table


def evaluate_params(
    params: ModelParams, suite: Sequence[Task], config: RunConfig, adapt_first: bool = True, method: str = "model"
) -> AccuracyTable:
    if adapt_first:
        return evaluate(lambda t: test_time_adapt(params, t, config).answer, suite, method, config.threads)
    return evaluate(lambda t: greedy_answer(params, None, t, config.max_answer_tokens), suite, method, config.threads)


class FamilyGain(BaseModel):
    family: str
    base_accuracy: float
    method_accuracy: float
    gain: float


class FamilyGainReport(BaseModel):
    rows: List[FamilyGain]
    correlation: Optional[float]


def family_gain_report(base: AccuracyTable, method: AccuracyTable) -> FamilyGainReport:
    """Per-family gains and the Pearson correlation of base accuracy with gain"""
    base_acc = base.family_accuracy()
    method_acc = method.family_accuracy()
    rows = [
        FamilyGain(family=f, base_accuracy=base_acc[f], method_accuracy=method_acc[f], gain=method_acc[f] - base_acc[f])
        for f in sorted(set(base_acc) & set(method_acc))
    ]
    correlation = None
    if len(rows) >= 2:
        x = np.array([r.base_accuracy for r in rows])
        y = np.array([r.gain for r in rows])
        if x.std() > 0 and y.std() > 0:
            correlation = float(np.corrcoef(x, y)[0, 1])
    logger.info("family_gain_report", families=len(rows), correlation=correlation)
    return FamilyGainReport(rows=rows, correlation=correlation)


# ============================================================================
# BASELINES
# ============================================================================

def run_baseline(
    name: str,
    config: RunConfig,
    train_tasks: Sequence[Task],
    eval_tasks: Sequence[Task],
    base: ModelParams,
    out_dir: Optional[Path] = None,
) -> AccuracyTable:
    """
    Raises:
        UsageError: unknown baseline name
    """
    if name not in BASELINES:
        raise UsageError(f"unknown baseline '{name}'", hint=f"choose one of {', '.join(BASELINES)}")
    logger.info("baseline_started", baseline=name, eval_tasks=len(eval_tasks))

    if name == "base":
        return evaluate_params(base, eval_tasks, config, adapt_first=False, method=name)
    if name == "ttt":
        return evaluate(lambda t: ttt_answer(base, t, train_tasks, config), eval_tasks, name, config.threads)
    if name == "tt-ss":
        return evaluate_params(base, eval_tasks, config, adapt_first=True, method=name)
    if name == "solver-grpo":
        solver = train_solver_grpo(config, train_tasks, base)
        return evaluate_params(solver, eval_tasks, config, adapt_first=False, method=name)

    variant = "gold" if name == "mass-gold" else "verified"
    run_config = config.with_overrides(outer_variant=variant)
    state = meta_train(run_config, train_tasks, base, out_dir=out_dir)
    return evaluate_params(state.generator.detached(), eval_tasks, run_config, adapt_first=True, method=name)
