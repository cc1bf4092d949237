"""
Tests for the meta-training loop, test-time adaptation and evaluation

This script tests:
1. Per-task event order and warmup freeze
2. Bit-identical records for fixed seeds, serial vs threaded
3. Empty batches and numeric-fault rollback
4. Checkpoint resume equals the uninterrupted run
5. Test-time adaptation edge cases and evaluation determinism
6. Per-family gain report
"""

import sys
import tempfile
from pathlib import Path

import torch

from config import RunConfig
from engine import orchestrator, store
from engine.seqmodel import VOCAB, ModelConfig, init_params
from engine.policy import sequence_logprob
from engine.taskgen import answer_tokens, make_attempt, make_aux_example, make_task_split, solve_prompt
from utils.errors import NumericFault, UsageError
from utils.seeding import stream

TINY = dict(
    d_model=8, n_blocks=1, n_heads=2, context=48, lora_rank=2, lora_scale=1.0,
    scorer_width=8, scorer_heads=2, scorer_context=48,
    n_candidates=3, n_attempts=2, max_aux_tokens=8, max_answer_tokens=3,
    meta_steps=3, warmup_steps=1, meta_batch_size=2, checkpoint_every=2,
    n_train_tasks=12, n_eval_tasks=6, test_time_examples=2, pretrain_steps=4, pretrain_batch=2,
    outer_variant="gold",
)


def tiny_config(**overrides) -> RunConfig:
    return RunConfig(**{**TINY, **overrides})


def tiny_base(config: RunConfig):
    return init_params(ModelConfig.from_run_config(config), stream(config.master_seed, "test-base"))


def tiny_tasks(config: RunConfig):
    return make_task_split(config)


def test_event_order_per_task():
    config = tiny_config()
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    result = orchestrator.meta_train_step(state, train[:2])
    assert result.events == {
        0: ["generate", "score", "adapt", "outer"],
        1: ["generate", "score", "adapt", "outer"],
    }


def test_warmup_freezes_generator():
    config = tiny_config(warmup_steps=2)
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    before = state.generator.digest()
    for _ in range(2):
        record = orchestrator.meta_train_step(state, train[:2]).record
        assert not record.generator_updated
    assert state.generator.digest() == before

    record = orchestrator.meta_train_step(state, train[:2]).record
    assert record.generator_updated
    assert state.generator.digest() != before


def test_fixed_seed_records_identical():
    config = tiny_config()
    train, _ = tiny_tasks(config)
    runs = []
    for _ in range(2):
        state = orchestrator.init_train_state(config, tiny_base(config))
        records = [orchestrator.meta_train_step(state, train[:2]).record.deterministic_view() for _ in range(2)]
        runs.append((records, state.generator.digest(), state.scorer.vector.digest()))
    assert runs[0] == runs[1]


def test_threads_match_serial():
    results = []
    for threads in (1, 3):
        config = tiny_config(threads=threads)
        train, _ = tiny_tasks(config)
        state = orchestrator.init_train_state(config, tiny_base(config))
        records = [orchestrator.meta_train_step(state, train[:3]).record.deterministic_view() for _ in range(2)]
        results.append((records, state.generator.digest(), state.scorer.vector.digest()))
    assert results[0] == results[1]


def test_empty_batch_leaves_state():
    config = tiny_config()
    state = orchestrator.init_train_state(config, tiny_base(config))
    digest = state.generator.digest()
    result = orchestrator.meta_train_step(state, [])
    assert result.record is None
    assert state.meta_step == 0
    assert state.generator.digest() == digest


def test_numeric_fault_rolls_back():
    config = tiny_config(warmup_steps=0)
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    generator_before = state.generator.digest()
    scorer_before = state.scorer.vector.digest()

    original = orchestrator._update_generator

    def failing(*args, **kwargs):
        raise NumericFault("head.weight", "generator gradient")

    orchestrator._update_generator = failing
    try:
        record = orchestrator.meta_train_step(state, train[:2]).record
    finally:
        orchestrator._update_generator = original

    assert record.fault is not None and "head.weight" in record.fault
    assert state.meta_step == 1
    assert state.generator.digest() == generator_before
    assert state.scorer.vector.digest() == scorer_before


def scripted_attempts(verified_for):
    """Stand-in attempt sampler: one gold and one wrong answer for tasks in verified_for, two wrong otherwise"""

    def attempts(params, delta, task, count, *args, **kwargs):
        wrong = answer_tokens((task.gold + 1) % task.modulus)
        outputs = [answer_tokens(task.gold), wrong] if task in verified_for else [wrong, wrong]
        prompt = solve_prompt(task)
        with torch.no_grad():
            return [make_attempt(task, y, float(sequence_logprob(params, delta, prompt, y))) for y in outputs]

    return attempts


def run_scripted_step(state, tasks, verified_for):
    original = orchestrator.sample_attempts
    orchestrator.sample_attempts = scripted_attempts(verified_for)
    try:
        return orchestrator.meta_train_step(state, tasks).record
    finally:
        orchestrator.sample_attempts = original


def test_verified_outer_counts_skips():
    config = tiny_config(outer_variant="verified", warmup_steps=0)
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    before = state.generator.digest()

    record = run_scripted_step(state, train[:2], [train[0]])
    assert record.zero_verified_skips == 1
    assert record.outer_losses[0] is not None and record.outer_losses[1] is None
    assert record.verified_rate == 0.25
    assert record.generator_updated
    assert record.solve_loss is not None
    assert state.generator.digest() != before


def test_verified_outer_all_skipped():
    config = tiny_config(outer_variant="verified", warmup_steps=0)
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    generator_before = state.generator.digest()
    scorer_before = state.scorer.vector.digest()

    record = run_scripted_step(state, train[:2], [])
    assert record.zero_verified_skips == 2
    assert record.outer_losses == [None, None]
    assert not record.generator_updated
    assert record.scorer_grad_norm == 0.0
    assert state.generator.digest() == generator_before
    assert state.scorer.vector.digest() == scorer_before
    assert state.meta_step == 1


def test_resume_matches_uninterrupted_run():
    config = tiny_config()
    train, _ = tiny_tasks(config)
    base = tiny_base(config)
    with tempfile.TemporaryDirectory() as tmp:
        straight_dir, resumed_dir = Path(tmp) / "straight", Path(tmp) / "resumed"
        straight = orchestrator.meta_train(config, train, base, out_dir=straight_dir)

        orchestrator.meta_train(config, train, base, out_dir=resumed_dir, stop_after=2)
        checkpoint = store.load_checkpoint(resumed_dir / store.checkpoint_name(2))
        resumed = orchestrator.meta_train(config, train, base, out_dir=resumed_dir, resume=checkpoint)

        assert resumed.meta_step == straight.meta_step == 3
        assert resumed.generator.digest() == straight.generator.digest()
        assert resumed.scorer.vector.digest() == straight.scorer.vector.digest()

        def views(directory):
            log = store.MetricsLog(directory / store.METRICS_FILE, orchestrator.MetricRecord)
            return [r.deterministic_view() for r in log.read_all()]

        assert views(resumed_dir) == views(straight_dir)
        assert len(views(straight_dir)) == 3


def test_empty_training_pool_stops():
    config = tiny_config()
    state = orchestrator.meta_train(config, [], tiny_base(config))
    assert state.meta_step == 0


def test_zero_examples_answers_like_base():
    config = tiny_config(test_time_examples=0)
    _, evaluation = tiny_tasks(config)
    base = tiny_base(config)
    for task in evaluation[:3]:
        result = orchestrator.test_time_adapt(base, task, config)
        assert not result.adapted and not result.fallback
        assert result.answer == orchestrator.greedy_answer(base, None, task, config.max_answer_tokens)


def test_unparsed_generations_fall_back():
    config = tiny_config(test_time_examples=3)
    _, evaluation = tiny_tasks(config)
    base = tiny_base(config)
    original = orchestrator.generate_examples

    def broken(params, task, count, *args, **kwargs):
        examples = [make_aux_example(task, VOCAB.encode("<ex> 2 ->")) for _ in range(count)]
        return examples, [e.raw for e in examples], [0.0] * count

    orchestrator.generate_examples = broken
    try:
        results = [(task, orchestrator.test_time_adapt(base, task, config)) for task in evaluation[:3]]
    finally:
        orchestrator.generate_examples = original

    for task, result in results:
        assert result.fallback and not result.adapted
        assert result.generated == 3 and result.parsed == 0
        assert result.answer == orchestrator.greedy_answer(base, None, task, config.max_answer_tokens)


def test_ttt_draws_only_training_rules():
    config = tiny_config(test_time_examples=4)
    train, evaluation = tiny_tasks(config)
    base = tiny_base(config)
    drawn = []
    original = orchestrator.example_from_task

    def recording(task):
        drawn.append(task)
        return original(task)

    orchestrator.example_from_task = recording
    try:
        for task in evaluation:
            orchestrator.ttt_answer(base, task, train, config)
    finally:
        orchestrator.example_from_task = original

    assert len(drawn) == 4 * len(evaluation)
    eval_rules = {task.rule for task in evaluation}
    assert all(task in train for task in drawn)
    assert not any(task.rule in eval_rules for task in drawn)


def test_test_time_adapt_leaves_model_untouched():
    config = tiny_config()
    _, evaluation = tiny_tasks(config)
    base = tiny_base(config)
    digest = base.digest()
    first = orchestrator.test_time_adapt(base, evaluation[0], config)
    second = orchestrator.test_time_adapt(base, evaluation[0], config)
    assert first == second
    assert base.digest() == digest


def test_base_evaluation_reproducible():
    config = tiny_config()
    train, evaluation = tiny_tasks(config)
    base = tiny_base(config)
    first = orchestrator.run_baseline("base", config, train, evaluation, base)
    second = orchestrator.run_baseline("base", config, train, evaluation, base)
    assert first == second
    assert first.total == len(evaluation)
    assert sum(f.total for f in first.families) == first.total


def test_unknown_baseline():
    config = tiny_config()
    try:
        orchestrator.run_baseline("oracle", config, [], [], tiny_base(config))
    except UsageError:
        return
    raise AssertionError("unknown baseline accepted")


def test_family_gain_report():
    def table(method, counts):
        families = [orchestrator.FamilyAccuracy(family=f, correct=c, total=4) for f, c in counts]
        return orchestrator.AccuracyTable(
            method=method, families=families,
            correct=sum(f.correct for f in families), total=4 * len(families),
        )

    base = table("base", [("mod07-12", 1), ("mod13-18", 3)])
    method = table("mass", [("mod07-12", 3), ("mod13-18", 3)])
    report = orchestrator.family_gain_report(base, method)
    assert [r.gain for r in report.rows] == [0.5, 0.0]
    assert abs(report.correlation + 1.0) < 1e-12

    flat = orchestrator.family_gain_report(base, base)
    assert flat.correlation is None


def test_map_ordered_keeps_order():
    items = list(range(20))
    assert orchestrator.map_ordered(lambda x: x * x, items, threads=4) == [x * x for x in items]


def test_pretrain_deterministic():
    config = tiny_config()
    train, _ = tiny_tasks(config)
    first = orchestrator.pretrain_base(config, train)
    second = orchestrator.pretrain_base(config, train)
    assert first.digest() == second.digest()
    assert not any(t.requires_grad for t in first.vector.segments.values())


def test_checkpoint_state_round_trip():
    config = tiny_config(warmup_steps=0)
    train, _ = tiny_tasks(config)
    state = orchestrator.init_train_state(config, tiny_base(config))
    orchestrator.meta_train_step(state, train[:2])
    restored = orchestrator.state_from_checkpoint(
        store.decode_checkpoint(store.encode_checkpoint(orchestrator.state_to_checkpoint(state)))
    )
    assert restored.meta_step == 1
    assert restored.generator.digest() == state.generator.digest()
    assert torch.equal(
        restored.generator_optimizer.state_dict()["state"][0]["exp_avg"],
        state.generator_optimizer.state_dict()["state"][0]["exp_avg"],
    )


def main():
    """Run all tests"""
    print("=" * 60)
    print("Orchestrator tests")
    print("=" * 60)

    tests = [value for name, value in globals().items() if name.startswith("test_") and callable(value)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"[PASS] {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"[FAIL] {test.__name__}: {type(e).__name__}: {e}")

    print(f"\nTests passed: {len(tests) - failed}/{len(tests)}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
