"""
Differentiation engine

Centralizes:
- ParamVector: named, shape-tagged float64 segments with layout-checked algebra
- grad: reverse-mode gradient
- hvp: Hessian-vector product as the forward-mode tangent of the gradient
  (forward-over-reverse); hvp_reverse is the reverse-over-reverse twin
- mixed_partial: grad_y <grad_x f(x, y), lam> by forward-over-reverse
- CheckpointStore / checkpoint_replay: block snapshots of inner-loop states
  and deterministic recomputation of the states in between

Every operation checks its outputs for non-finite values and raises
NumericFault naming the offending segment. Inputs are never mutated.
"""

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Mapping, Optional, Tuple, Union

import structlog
import torch
from torch.func import grad as func_grad
from torch.func import grad_and_value, jvp

from utils.errors import ContractError, NumericFault

logger = structlog.get_logger()

DTYPE = torch.float64

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]

# A scalar-valued function of one or two ParamVectors returning a 0-dim tensor
DifferentiableScalar = Callable[..., torch.Tensor]

# (k, theta_k) -> theta_{k+1}
Stepper = Callable[[int, "ParamVector"], "ParamVector"]

# Forward-AD levels are process-global; transforms from different threads must not interleave
_TRANSFORM_LOCK = threading.RLock()


# ============================================================================
# PARAM VECTOR
# ============================================================================

class ParamVector:
    """Ordered named tensor segments treated as one flat vector"""

    __slots__ = ("_segments",)

    def __init__(self, segments: Mapping[str, torch.Tensor]):
        self._segments: Dict[str, torch.Tensor] = dict(segments)

    @property
    def segments(self) -> Dict[str, torch.Tensor]:
        return dict(self._segments)

    @property
    def layout(self) -> Layout:
        return tuple((name, tuple(t.shape)) for name, t in self._segments.items())

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self._segments.values())

    def names(self) -> Tuple[str, ...]:
        return tuple(self._segments)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._segments[name]

    def __contains__(self, name: object) -> bool:
        return name in self._segments

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} segments, {self.numel} values)"

    # ------------------------------------------------------------------
    # Layout
    # ------------------------------------------------------------------

    def check_layout(self, other: "ParamVector", what: str = "operand") -> None:
        if self.layout != other.layout:
            mine = {n: s for n, s in self.layout}
            theirs = {n: s for n, s in other.layout}
            diff = sorted(set(mine.items()) ^ set(theirs.items()))
            raise ContractError(f"layout mismatch for {what}: {diff[:4]}")

    def flatten(self) -> torch.Tensor:
        if not self._segments:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([t.reshape(-1) for t in self._segments.values()])

    @classmethod
    def unflatten(cls, layout: Layout, flat: torch.Tensor) -> "ParamVector":
        total = sum(_prod(shape) for _, shape in layout)
        if flat.dim() != 1 or flat.numel() != total:
            raise ContractError(f"flat vector has {flat.numel()} values, layout needs {total}")
        segments = {}
        offset = 0
        for name, shape in layout:
            size = _prod(shape)
            segments[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return cls(segments)

    # ------------------------------------------------------------------
    # Algebra (identical layouts only)
    # ------------------------------------------------------------------

    def add(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return ParamVector({n: t + other[n] for n, t in self._segments.items()})

    def sub(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return ParamVector({n: t - other[n] for n, t in self._segments.items()})

    def scale(self, factor: Union[float, torch.Tensor]) -> "ParamVector":
        return ParamVector({n: t * factor for n, t in self._segments.items()})

    def axpy(self, factor: Union[float, torch.Tensor], other: "ParamVector") -> "ParamVector":
        """self + factor * other"""
        self.check_layout(other)
        return ParamVector({n: t + factor * other[n] for n, t in self._segments.items()})

    def dot(self, other: "ParamVector") -> torch.Tensor:
        self.check_layout(other)
        total = torch.zeros((), dtype=DTYPE)
        for name, t in self._segments.items():
            total = total + (t * other[name]).sum()
        return total

    def norm(self) -> torch.Tensor:
        return torch.sqrt(self.dot(self))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.add(other)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.sub(other)

    def __neg__(self) -> "ParamVector":
        return self.scale(-1.0)

    def __mul__(self, factor: Union[float, torch.Tensor]) -> "ParamVector":
        return self.scale(factor)

    __rmul__ = __mul__

    # ------------------------------------------------------------------
    # Tensor bookkeeping
    # ------------------------------------------------------------------

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamVector":
        return ParamVector({n: fn(t) for n, t in self._segments.items()})

    def detach(self) -> "ParamVector":
        return self.map(lambda t: t.detach())

    def clone(self) -> "ParamVector":
        return self.map(lambda t: t.detach().clone())

    def zeros_like(self) -> "ParamVector":
        return self.map(torch.zeros_like)

    def as_leaves(self) -> "ParamVector":
        """Detached copies that require grad (fresh autograd leaves)"""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def select(self, names) -> "ParamVector":
        return ParamVector({n: self._segments[n] for n in names})

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "ParamVector":
        unknown = [n for n in updates if n not in self._segments]
        if unknown:
            raise ContractError(f"unknown segments: {unknown}")
        merged = dict(self._segments)
        merged.update(updates)
        return ParamVector(merged)

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes; equal digests mean bit-equal vectors"""
        h = hashlib.sha256()
        for name, t in self._segments.items():
            h.update(name.encode("utf-8"))
            h.update(str(tuple(t.shape)).encode("utf-8"))
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamVector") -> bool:
        """Bit-for-bit equality"""
        return self.layout == other.layout and all(
            torch.equal(t, other[n]) for n, t in self._segments.items()
        )

    def assert_finite(self, where: str = "value") -> "ParamVector":
        for name, t in self._segments.items():
            if not bool(torch.isfinite(t).all()):
                raise NumericFault(name, where)
        return self


def _prod(shape: Tuple[int, ...]) -> int:
    size = 1
    for dim in shape:
        size *= dim
    return size


def _check_scalar(value: torch.Tensor, name: str = "loss") -> torch.Tensor:
    if value.dim() != 0:
        raise ContractError(f"expected a scalar, got shape {tuple(value.shape)}")
    if not bool(torch.isfinite(value)):
        raise NumericFault(name, "value")
    return value


# ============================================================================
# DERIVATIVES
# ============================================================================

def value_and_grad(f: DifferentiableScalar, x: ParamVector) -> Tuple[torch.Tensor, ParamVector]:
    """f(x) and its gradient, both checked for finiteness"""
    def scalar(segs):
        value = f(ParamVector(segs))
        if value.dim() != 0:
            raise ContractError(f"expected a scalar, got shape {tuple(value.shape)}")
        return value

    with _TRANSFORM_LOCK:
        g, value = grad_and_value(scalar)(x.segments)
    _check_scalar(value)
    return value.detach(), ParamVector(g).detach().assert_finite("gradient")


def grad(f: DifferentiableScalar, x: ParamVector) -> ParamVector:
    """Reverse-mode gradient of f at x, with x's layout"""
    return value_and_grad(f, x)[1]


def hvp(f: DifferentiableScalar, x: ParamVector, v: ParamVector) -> ParamVector:
    """
    Hessian-vector product H(x) v as the directional derivative of grad f along v

    H is never materialized: one reverse pass nested in one forward pass.
    """
    x.check_layout(v, "hvp direction")
    gradient = func_grad(lambda segs: f(ParamVector(segs)))
    with _TRANSFORM_LOCK:
        _, tangent = jvp(gradient, (x.segments,), (v.segments,))
    return ParamVector(tangent).detach().assert_finite("hvp")


def hvp_reverse(f: DifferentiableScalar, x: ParamVector, v: ParamVector) -> ParamVector:
    """Reverse-over-reverse reference: grad_x <grad_x f(x), v>"""
    x.check_layout(v, "hvp direction")
    leaves = x.as_leaves()
    value = f(leaves)
    tensors = [leaves[n] for n in leaves]
    first = torch.autograd.grad(value, tensors, create_graph=True, allow_unused=True)
    inner = torch.zeros((), dtype=DTYPE)
    for g, name in zip(first, leaves):
        if g is not None:
            inner = inner + (g * v[name]).sum()
    if not inner.requires_grad:
        return x.zeros_like()
    second = torch.autograd.grad(inner, tensors, allow_unused=True)
    out = {
        name: (torch.zeros_like(leaves[name]) if s is None else s).detach()
        for name, s in zip(leaves, second)
    }
    return ParamVector(out).assert_finite("hvp")


def directional_derivative(
    fn: Callable[[ParamVector], torch.Tensor], x: ParamVector, v: ParamVector
) -> torch.Tensor:
    """Forward-mode derivative of a tensor-valued fn at x along v (same shape as fn(x))"""
    x.check_layout(v, "tangent direction")
    with _TRANSFORM_LOCK:
        _, tangent = jvp(lambda segs: fn(ParamVector(segs)), (x.segments,), (v.segments,))
    tangent = tangent.detach()
    if not bool(torch.isfinite(tangent).all()):
        raise NumericFault("outputs", "directional derivative")
    return tangent


def mixed_partial(
    f: DifferentiableScalar,
    x: ParamVector,
    y: ParamVector,
    lam: ParamVector,
) -> ParamVector:
    """
    grad_y <grad_x f(x, y), lam>, with lam held constant

    Computed as the tangent of grad_y f along the x-direction lam, which
    equals d2f/dydx contracted with lam. Result has y's layout.
    """
    x.check_layout(lam, "mixed partial multiplier")
    y_segments = y.segments

    def grad_y(x_segments):
        return func_grad(lambda ys: f(ParamVector(x_segments), ParamVector(ys)))(y_segments)

    with _TRANSFORM_LOCK:
        _, tangent = jvp(grad_y, (x.segments,), (lam.segments,))
    return ParamVector(tangent).detach().assert_finite("mixed partial")


# ============================================================================
# FINITE DIFFERENCES (test oracles)
# ============================================================================

def relative_error(a: Union[ParamVector, torch.Tensor], b: Union[ParamVector, torch.Tensor]) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish"""
    fa = a.flatten() if isinstance(a, ParamVector) else a.reshape(-1)
    fb = b.flatten() if isinstance(b, ParamVector) else b.reshape(-1)
    scale = max(float(fa.norm()), float(fb.norm()))
    if scale == 0.0:
        return 0.0
    return float((fa - fb).norm()) / scale


def directional_difference(
    f: DifferentiableScalar, x: ParamVector, direction: ParamVector, eps: float = 1e-5
) -> torch.Tensor:
    """Central difference (f(x + eps d) - f(x - eps d)) / 2 eps"""
    x.check_layout(direction, "difference direction")
    with torch.no_grad():
        plus = f(x.axpy(eps, direction))
        minus = f(x.axpy(-eps, direction))
    return (plus - minus) / (2.0 * eps)


def finite_difference_grad(f: DifferentiableScalar, x: ParamVector, eps: float = 1e-5) -> ParamVector:
    """Coordinate-wise central differences; only for small vectors"""
    layout = x.layout
    flat = x.flatten().detach().clone()
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            plus = f(ParamVector.unflatten(layout, flat.clone()))
            flat[i] = original - eps
            minus = f(ParamVector.unflatten(layout, flat.clone()))
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * eps)
    return ParamVector.unflatten(layout, out)


def random_like(x: ParamVector, generator: Optional[torch.Generator] = None) -> ParamVector:
    return x.map(lambda t: torch.randn(t.shape, dtype=t.dtype, generator=generator))


# ============================================================================
# CHECKPOINTED INNER-LOOP STATES
# ============================================================================

@dataclass
class CheckpointStore:
    """
    Snapshots of theta_k at every multiple of block_size up to total_steps.

    Holds floor(K/B) + 1 <= ceil(K/B) + 1 snapshots. replayed_steps counts
    stepper calls spent on rematerialization.
    """

    block_size: int
    total_steps: int
    snapshots: Dict[int, ParamVector] = field(default_factory=dict)
    replayed_steps: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise ContractError(f"block size must be >= 1, got {self.block_size}")
        if self.total_steps < 0:
            raise ContractError(f"step count must be >= 0, got {self.total_steps}")

    def record(self, k: int, theta: ParamVector) -> None:
        if k % self.block_size == 0:
            self.snapshots[k] = theta.clone()

    @property
    def retained(self) -> int:
        return len(self.snapshots)


def run_checkpointed(
    theta0: ParamVector, stepper: Stepper, total_steps: int, block_size: int = 1
) -> Tuple[ParamVector, CheckpointStore]:
    """Forward unroll keeping only block snapshots; returns (theta_K, store)"""
    store = CheckpointStore(block_size=block_size, total_steps=total_steps)
    theta = theta0.detach()
    store.record(0, theta)
    for k in range(total_steps):
        theta = stepper(k, theta)
        store.record(k + 1, theta)
    return theta, store


def checkpoint_replay(store: CheckpointStore, k: int, stepper: Stepper) -> ParamVector:
    """
    theta_k, recomputed from the nearest earlier snapshot when not stored

    Bit-identical to the forward unroll because the stepper is deterministic
    and snapshots are exact copies.
    """
    if not 0 <= k <= store.total_steps:
        raise ContractError(f"step {k} outside [0, {store.total_steps}]")
    if k in store.snapshots:
        return store.snapshots[k]

    base = max(j for j in store.snapshots if j <= k)
    theta = store.snapshots[base]
    for j in range(base, k):
        theta = stepper(j, theta)
        store.replayed_steps += 1

    logger.debug("checkpoint_replayed", step=k, from_snapshot=base, replayed=k - base)
    return theta
