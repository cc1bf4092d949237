"""
Tests for the differentiation engine

This script tests:
1. Gradients of closed-form functions
2. Hessian-vector products (forward-over-reverse vs reverse-over-reverse)
3. Mixed partials
4. Layout checks and non-finite detection
5. Checkpointed inner states and replay
"""

import sys
from concurrent.futures import ThreadPoolExecutor

import torch

from engine import diffcore
from engine.diffcore import DTYPE, ParamVector
from utils.errors import ContractError, NumericFault


def vec(*values: float) -> ParamVector:
    return ParamVector({"x": torch.tensor(values, dtype=DTYPE)})


def cubic(p: ParamVector) -> torch.Tensor:
    x = p["x"]
    return x[0] ** 2 * x[1]


def test_grad_quadratic():
    g = diffcore.grad(lambda p: 0.5 * (p["x"] ** 2).sum(), vec(1.0, 2.0))
    torch.testing.assert_close(g["x"], torch.tensor([1.0, 2.0], dtype=DTYPE))


def test_grad_cubic():
    g = diffcore.grad(cubic, vec(1.0, 1.0))
    torch.testing.assert_close(g["x"], torch.tensor([2.0, 1.0], dtype=DTYPE))


def test_grad_constant_is_zero():
    g = diffcore.grad(lambda p: torch.tensor(3.0, dtype=DTYPE) + 0.0 * p["x"].sum(), vec(1.0, 2.0))
    assert torch.equal(g["x"], torch.zeros(2, dtype=DTYPE))


def test_grad_rejects_non_scalar():
    try:
        diffcore.grad(lambda p: p["x"] * 2, vec(1.0, 2.0))
    except ContractError:
        return
    raise AssertionError("vector-valued loss accepted")


def test_hvp_identity_hessian():
    v = vec(0.3, -1.7)
    hv = diffcore.hvp(lambda p: 0.5 * (p["x"] ** 2).sum(), vec(4.0, 5.0), v)
    torch.testing.assert_close(hv["x"], v["x"])


def test_hvp_cubic():
    hv = diffcore.hvp(cubic, vec(1.0, 1.0), vec(1.0, 0.0))
    torch.testing.assert_close(hv["x"], torch.tensor([2.0, 2.0], dtype=DTYPE))


def test_hvp_zero_direction():
    hv = diffcore.hvp(cubic, vec(1.0, 1.0), vec(0.0, 0.0))
    assert torch.equal(hv["x"], torch.zeros(2, dtype=DTYPE))


def test_hvp_modes_agree():
    gen = torch.Generator().manual_seed(3)
    x = ParamVector({"a": torch.randn(3, 2, dtype=DTYPE, generator=gen), "b": torch.randn(4, dtype=DTYPE, generator=gen)})
    v = diffcore.random_like(x, gen)

    def f(p: ParamVector) -> torch.Tensor:
        return torch.tanh(p["a"]).sum() * (p["b"] ** 3).sum() + (p["a"] ** 2).sum()

    forward_mode = diffcore.hvp(f, x, v)
    reverse_mode = diffcore.hvp_reverse(f, x, v)
    assert diffcore.relative_error(forward_mode, reverse_mode) < 1e-12


def test_hvp_layout_mismatch():
    try:
        diffcore.hvp(cubic, vec(1.0, 1.0), vec(1.0, 0.0, 0.0))
    except ContractError as e:
        assert "layout" in str(e)
        return
    raise AssertionError("mismatched direction accepted")


def test_mixed_partial_scalar():
    x = ParamVector({"x": torch.tensor(2.0, dtype=DTYPE)})
    y = ParamVector({"y": torch.tensor(0.7, dtype=DTYPE)})
    lam = ParamVector({"x": torch.tensor(3.0, dtype=DTYPE)})
    out = diffcore.mixed_partial(lambda a, b: b["y"] * a["x"] ** 2 / 2, x, y, lam)
    torch.testing.assert_close(out["y"], torch.tensor(6.0, dtype=DTYPE))


def test_mixed_partial_independent_of_y():
    x = ParamVector({"x": torch.tensor(2.0, dtype=DTYPE)})
    y = ParamVector({"y": torch.tensor(0.7, dtype=DTYPE)})
    lam = ParamVector({"x": torch.tensor(3.0, dtype=DTYPE)})
    out = diffcore.mixed_partial(lambda a, b: a["x"] ** 3 + 0.0 * b["y"], x, y, lam)
    assert float(out["y"]) == 0.0


def test_mixed_partial_zero_multiplier():
    x = ParamVector({"x": torch.tensor(2.0, dtype=DTYPE)})
    y = ParamVector({"y": torch.tensor(0.7, dtype=DTYPE)})
    lam = ParamVector({"x": torch.tensor(0.0, dtype=DTYPE)})
    out = diffcore.mixed_partial(lambda a, b: b["y"] * a["x"] ** 2, x, y, lam)
    assert float(out["y"]) == 0.0


def test_non_finite_gradient_names_segment():
    x = ParamVector({"ok": torch.ones(2, dtype=DTYPE), "bad": torch.zeros(2, dtype=DTYPE)})
    try:
        diffcore.grad(lambda p: p["ok"].sum() + torch.sqrt(p["bad"]).sum(), x)
    except NumericFault as e:
        assert e.segment == "bad"
        return
    raise AssertionError("infinite gradient not reported")


def test_finite_difference_grad_matches():
    x = vec(0.4, -1.3)
    fd = diffcore.finite_difference_grad(cubic, x, eps=1e-6)
    assert diffcore.relative_error(diffcore.grad(cubic, x), fd) < 1e-8


def test_flatten_unflatten():
    x = ParamVector({"a": torch.arange(6, dtype=DTYPE).reshape(2, 3), "b": torch.tensor([7.0], dtype=DTYPE)})
    back = ParamVector.unflatten(x.layout, x.flatten())
    assert back.equal(x)


def _quadratic_stepper(k: int, theta: ParamVector) -> ParamVector:
    return theta.axpy(-0.1, theta.map(lambda t: t - 1.0 - 0.01 * k))


def test_checkpoint_replay_matches_full_run():
    theta0 = vec(0.0, 3.0)
    reference = [theta0]
    for k in range(7):
        reference.append(_quadratic_stepper(k, reference[-1]))

    final, store = diffcore.run_checkpointed(theta0, _quadratic_stepper, 7, block_size=3)
    assert final.equal(reference[-1])
    assert sorted(store.snapshots) == [0, 3, 6]
    for k in range(8):
        assert diffcore.checkpoint_replay(store, k, _quadratic_stepper).equal(reference[k])


def test_checkpoint_replay_at_snapshot_costs_nothing():
    _, store = diffcore.run_checkpointed(vec(0.0), _quadratic_stepper, 4, block_size=2)
    assert diffcore.checkpoint_replay(store, 0, _quadratic_stepper).equal(vec(0.0))
    diffcore.checkpoint_replay(store, 2, _quadratic_stepper)
    assert store.replayed_steps == 0
    diffcore.checkpoint_replay(store, 3, _quadratic_stepper)
    assert store.replayed_steps == 1


def test_checkpoint_retained_count():
    for total, block in [(8, 1), (8, 2), (8, 3), (2, 4)]:
        _, store = diffcore.run_checkpointed(vec(0.0), _quadratic_stepper, total, block)
        assert store.retained == total // block + 1
        assert store.retained <= -(-total // block) + 1


def test_transforms_from_threads_match_serial():
    points = [(1.0 + 0.25 * i, 0.5 - 0.1 * i) for i in range(8)]
    y = ParamVector({"y": torch.tensor(0.7, dtype=DTYPE)})

    def job(point):
        x = vec(*point)
        hv = diffcore.hvp(cubic, x, vec(1.0, 0.5))
        mixed = diffcore.mixed_partial(lambda a, b: b["y"] * cubic(a), x, y, vec(1.0, -1.0))
        return hv["x"], mixed["y"]

    serial = [job(p) for p in points]
    for _ in range(5):
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(job, points))
        for (h1, m1), (h2, m2) in zip(serial, threaded):
            assert torch.equal(h1, h2)
            assert torch.equal(m1, m2)


def main():
    """Run all tests"""
    print("=" * 60)
    print("Differentiation engine tests")
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
