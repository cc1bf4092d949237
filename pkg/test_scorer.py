"""
Tests for the example scorer
"""

import sys

import torch

from engine import diffcore
from engine.diffcore import DTYPE
from engine.scorer import ScorerConfig, init_scorer, score, score_all, scorer_input
from engine.seqmodel import VOCAB
from engine.taskgen import Task, make_aux_example
from utils.errors import ContractError

CONFIG = ScorerConfig(width=8, n_heads=2, context=48)
TASK = Task.from_rule(3, 2, 11, [0, 1, 4], 5)


def example(text: str):
    return make_aux_example(TASK, VOCAB.encode(text))


def randomized_scorer(seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    eta = init_scorer(CONFIG, gen)
    return eta.with_vector(eta.vector.replace({
        "head.weight": torch.randn(CONFIG.width, dtype=DTYPE, generator=gen),
    }))


def test_zero_head_scores_half():
    eta = init_scorer(CONFIG, torch.Generator().manual_seed(0))
    assert float(score(eta, TASK, example("<ex> 2 -> 8 <end>"))) == 0.5


def test_large_bias_saturates():
    eta = init_scorer(CONFIG, torch.Generator().manual_seed(0))
    eta = eta.with_vector(eta.vector.replace({"head.bias": torch.tensor([10.0], dtype=DTYPE)}))
    value = float(score(eta, TASK, example("<ex> 2 -> 8 <end>")))
    assert abs(value - 1.0 / (1.0 + torch.exp(torch.tensor(-10.0, dtype=DTYPE)).item())) < 1e-12
    assert 0.9999 < value < 1.0


def test_scores_in_unit_interval():
    eta = randomized_scorer()
    values = score_all(eta, TASK, [example(f"<ex> {x} -> {(3 * x + 2) % 11} <end>") for x in range(6)])
    assert values.shape == (6,)
    assert bool(((values > 0) & (values < 1)).all())


def test_empty_batch():
    values = score_all(randomized_scorer(), TASK, [])
    assert values.numel() == 0


def test_identical_examples_identical_scores():
    eta = randomized_scorer()
    values = score_all(eta, TASK, [example("<ex> 2 -> 8 <end>"), example("<ex> 2 -> 8 <end>")])
    assert float(values[0]) == float(values[1])


def test_permutation_equivariance():
    eta = randomized_scorer(3)
    batch = [example("<ex> 2 -> 8 <end>"), example("<ex> 6 -> 9 <end>"), example("<ex> 1 0 -> 1 <end>")]
    forward = score_all(eta, TASK, batch)
    backward = score_all(eta, TASK, list(reversed(batch)))
    assert torch.equal(forward, backward.flip(0))


def test_unparsed_example_rejected():
    try:
        score(randomized_scorer(), TASK, example("<ex> 2 ->"))
    except ContractError:
        return
    raise AssertionError("unparsed example scored")


def test_scorer_input_layout():
    tokens = scorer_input(TASK, example("<ex> 1 2 -> 3 <end>"))
    assert VOCAB.decode(tokens) == "<task> 0 -> 2 ; 1 -> 5 ; 4 -> 3 ; <query> 5 <ans> <sol> 12 <sol> 3"


def test_score_is_differentiable():
    eta = randomized_scorer()
    leaves = eta.vector.as_leaves()
    value = score(eta.with_vector(leaves), TASK, example("<ex> 2 -> 8 <end>"))
    value.backward()
    assert leaves["head.weight"].grad is not None
    assert float(leaves["head.weight"].grad.abs().sum()) > 0


def test_score_gradient_matches_finite_differences():
    eta = randomized_scorer(2)
    ex = example("<ex> 6 -> 9 <end>")

    def value(vector):
        return score(eta.with_vector(vector), TASK, ex)

    direction = diffcore.random_like(eta.vector, torch.Generator().manual_seed(1))
    analytic = diffcore.grad(value, eta.vector).dot(direction)
    numeric = diffcore.directional_difference(value, eta.vector, direction)
    assert diffcore.relative_error(analytic.reshape(1), numeric.reshape(1)) <= 1e-6


def main():
    """Run all tests"""
    print("=" * 60)
    print("Scorer tests")
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
