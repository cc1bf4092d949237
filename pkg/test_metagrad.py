"""
Tests for outer losses and meta-gradients

This script tests:
1. The scalar quadratic oracle on both backends
2. K=1 closed-form sensitivities
3. Unroll vs adjoint agreement on random instances
4. Finite-difference checks on eta and on each score
5. Retained-state instrumentation
6. Outer-loss variants
"""

import sys

import torch

from commands.diagnostics import gradient_errors, synthetic_instance
from engine import diffcore
from engine.adapt import InnerConfig
from engine.diffcore import DTYPE, ParamVector
from engine.metagrad import (
    BilevelProblem,
    OuterLossSpec,
    compute_meta_grads,
    meta_grad_adjoint,
    meta_grad_unroll,
    outer_from_eta,
    outer_from_scores,
    outer_loss_gold,
    outer_loss_verified,
    sensitivity_closed_form_k1,
)
from engine.scorer import ScorerConfig
from engine.seqmodel import VOCAB, ModelConfig, init_params, nll
from engine.taskgen import Task, gold_sequence, make_attempt, solve_prompt
from utils.errors import ContractError

TINY = ModelConfig(d_model=8, n_blocks=1, n_heads=2, context=48, lora_rank=2, lora_scale=1.0)
TINY_SCORER = ScorerConfig(width=8, n_heads=2, context=48)
TASK = Task.from_rule(3, 2, 11, [0, 1, 4], 5)


def scalar_problem(steps: int = 1, outer=None) -> BilevelProblem:
    """theta0 = 0, l = (theta - 1)^2 / 2, s = sigmoid(eta), eta = 0"""
    return BilevelProblem(
        example_losses=lambda theta: ((theta["theta"] - 1.0) ** 2 / 2).reshape(1),
        scores=lambda eta: torch.sigmoid(eta["eta"]).reshape(1),
        outer_loss=outer or (lambda theta: (theta["theta"] - 1.0) ** 2 / 2),
        theta0=ParamVector({"theta": torch.tensor(0.0, dtype=DTYPE)}),
        eta=ParamVector({"eta": torch.tensor(0.0, dtype=DTYPE)}),
        inner=InnerConfig(steps=steps, lr=0.1),
    )


def random_instance(seed: int, steps: int = 2, block_size: int = 1, n_examples: int = 4):
    return synthetic_instance(TINY, TINY_SCORER, n_examples, InnerConfig(steps=steps, lr=0.1, block_size=block_size), seed)


def test_scalar_oracle_both_backends():
    for backend in ("unroll", "adjoint"):
        grads = compute_meta_grads(scalar_problem(), backend)
        assert abs(float(grads.theta_final["theta"]) - 0.05) < 1e-15
        assert abs(float(grads.sensitivities[0]) + 0.095) < 1e-12, backend
        assert abs(float(grads.g_eta["eta"]) + 0.02375) < 1e-12, backend


def test_scalar_closed_form_k1():
    g_outer = ParamVector({"theta": torch.tensor(-0.95, dtype=DTYPE)})
    inner_grad = ParamVector({"theta": torch.tensor(-1.0, dtype=DTYPE)})
    value = sensitivity_closed_form_k1(g_outer, [inner_grad], 0.1)
    assert abs(float(value[0]) + 0.095) < 1e-15


def test_closed_form_signs():
    g = ParamVector({"x": torch.tensor([1.0, 0.0], dtype=DTYPE)})
    orthogonal = ParamVector({"x": torch.tensor([0.0, 2.0], dtype=DTYPE)})
    antiparallel = ParamVector({"x": torch.tensor([-3.0, 0.0], dtype=DTYPE)})
    values = sensitivity_closed_form_k1(g, [orthogonal, antiparallel], 0.1)
    assert float(values[0]) == 0.0
    assert float(values[1]) > 0.0


def test_flat_outer_loss_gives_zero():
    problem = scalar_problem(outer=lambda theta: 0.0 * theta["theta"] + 2.0)
    for backend in ("unroll", "adjoint"):
        grads = compute_meta_grads(problem, backend)
        assert float(grads.g_eta["eta"]) == 0.0
        assert float(grads.sensitivities.abs().sum()) == 0.0


def test_zero_steps_gives_zero():
    for backend in ("unroll", "adjoint"):
        grads = compute_meta_grads(scalar_problem(steps=0), backend)
        assert float(grads.g_eta["eta"]) == 0.0
        assert abs(grads.outer_loss - 0.5) < 1e-15


def test_closed_form_matches_backends_k1():
    instance = random_instance(seed=1, steps=1)
    problem = instance.problem
    unroll = meta_grad_unroll(problem)
    adjoint = meta_grad_adjoint(problem)

    g_outer = diffcore.grad(problem.outer_loss, unroll.theta_final)
    inner_grads = [
        diffcore.grad(lambda theta, i=i: problem.example_losses(theta)[i], problem.theta0)
        for i in range(len(instance.examples))
    ]
    closed = sensitivity_closed_form_k1(g_outer, inner_grads, problem.inner.lr)
    assert float((closed - unroll.sensitivities).abs().max()) < 1e-10
    assert float((closed - adjoint.sensitivities).abs().max()) < 1e-10


def test_backends_agree_on_random_instances():
    for seed in range(20):
        problem = random_instance(seed, steps=2).problem
        unroll = meta_grad_unroll(problem)
        adjoint = meta_grad_adjoint(problem)
        assert float((unroll.g_eta.flatten() - adjoint.g_eta.flatten()).abs().max()) <= 1e-8, seed
        assert float((unroll.sensitivities - adjoint.sensitivities).abs().max()) <= 1e-8, seed
        assert abs(unroll.outer_loss - adjoint.outer_loss) <= 1e-12


def test_sensitivities_match_finite_differences():
    problem = random_instance(seed=2).problem
    grads = meta_grad_adjoint(problem)
    with torch.no_grad():
        scores = problem.scores(problem.eta)
    eps = 1e-5
    for i in range(scores.numel()):
        bump = torch.zeros_like(scores)
        bump[i] = eps
        fd = (outer_from_scores(problem, scores + bump) - outer_from_scores(problem, scores - bump)) / (2 * eps)
        assert diffcore.relative_error(grads.sensitivities[i].reshape(1), fd.reshape(1)) <= 1e-4, i


def test_meta_gradient_matches_finite_differences():
    problem = random_instance(seed=4).problem
    grads = meta_grad_unroll(problem)
    direction = diffcore.random_like(problem.eta, torch.Generator().manual_seed(0))
    eps = 1e-4
    fd = (outer_from_eta(problem, problem.eta.axpy(eps, direction))
          - outer_from_eta(problem, problem.eta.axpy(-eps, direction))) / (2 * eps)
    assert diffcore.relative_error(grads.g_eta.dot(direction).reshape(1), fd.reshape(1)) <= 1e-4


def test_gradient_errors_within_tolerance():
    errors = gradient_errors(random_instance(seed=5))
    for name in ("grad", "hvp", "hvp_reverse", "mixed"):
        assert errors[name] <= 1e-5, (name, errors[name])
    assert errors["meta"] <= 1e-4


def test_retained_states():
    for steps, block in [(2, 1), (4, 2), (8, 2), (8, 3)]:
        problem = random_instance(seed=0, steps=steps, block_size=block, n_examples=2).problem
        unroll = meta_grad_unroll(problem)
        adjoint = meta_grad_adjoint(problem)
        assert unroll.retained_states == steps + 1
        assert adjoint.retained_states <= -(-steps // block) + 1
        if block > 1:
            assert adjoint.retained_states < unroll.retained_states


def test_retained_states_counts_built_steps():
    problem = BilevelProblem(
        example_losses=lambda theta: torch.ones(2, dtype=DTYPE),
        scores=lambda eta: torch.full((2,), 0.5, dtype=DTYPE),
        outer_loss=lambda theta: (theta["theta"] - 1.0) ** 2 / 2,
        theta0=ParamVector({"theta": torch.tensor(0.0, dtype=DTYPE)}),
        eta=ParamVector({"eta": torch.tensor(0.0, dtype=DTYPE)}),
        inner=InnerConfig(steps=4, lr=0.1),
    )
    grads = meta_grad_unroll(problem)
    assert grads.retained_states == 1
    assert float(grads.theta_final["theta"]) == 0.0
    assert abs(grads.outer_loss - 0.5) < 1e-15


def test_outer_gold_unadapted_equals_base():
    instance = random_instance(seed=0)
    params = instance.params
    tokens, mask = gold_sequence(TASK)
    assert float(outer_loss_gold(params, None, TASK)) == float(nll(params, None, tokens, mask))


def test_outer_verified_variants():
    params = init_params(TINY, torch.Generator().manual_seed(0))
    right = make_attempt(TASK, VOCAB.encode("6 <end>"))
    other = make_attempt(TASK, VOCAB.encode("0 6 <end>"))
    wrong = make_attempt(TASK, VOCAB.encode("3 <end>"))

    assert outer_loss_verified(params, None, TASK, [wrong, wrong]) is None

    prompt = solve_prompt(TASK)

    def attempt_nll(attempt):
        tokens = prompt + list(attempt.tokens)
        return float(nll(params, None, tokens, [0.0] * len(prompt) + [1.0] * len(attempt.tokens)))

    same = outer_loss_verified(params, None, TASK, [right, right, wrong])
    assert abs(float(same) - attempt_nll(right)) < 1e-12
    mixed = outer_loss_verified(params, None, TASK, [right, other, wrong])
    assert abs(float(mixed) - (attempt_nll(right) + attempt_nll(other)) / 2) < 1e-12


def test_outer_spec_needs_attempts():
    assert OuterLossSpec(variant="gold", attempts=0).variant == "gold"
    try:
        OuterLossSpec(variant="verified", attempts=0)
    except ContractError:
        return
    raise AssertionError("verified outer loss without attempts accepted")


def main():
    """Run all tests"""
    print("=" * 60)
    print("Meta-gradient tests")
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
