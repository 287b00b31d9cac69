"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation output remembers its parent tensors and an adjoint closure,
and carries a monotonically increasing node id.  Creation order is therefore
a valid topological order of the graph, so the backward pass simply replays
adjoints in reverse creation order -- each node's chain-rule contribution is
applied exactly once.

All arrays are float64.  Log arguments are clamped at ``LOG_EPS`` so the
saturating losses stay bounded.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError, ValidationError

LOG_EPS = 1e-7

_node_ids = itertools.count()


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_nid")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self._nid = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.values.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values) -> Tensor:
    """A trainable leaf: owns its array and accumulates gradients."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    tracked = any(p.requires_grad or p._parents for p in parents)
    return Tensor(values, requires_grad=tracked,
                  _parents=parents if tracked else (),
                  _backward=backward if tracked else None)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values + b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(out_values, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values - b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make(out_values, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.values, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values * b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(out_values, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects 2-D operands, got "
                         f"{a.values.shape} and {b.values.shape}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.values.shape} x {b.values.shape}")
    out_values = a.values @ b.values

    def backward(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _make(out_values, (a, b), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0

    def backward(g):
        _accumulate(a, g * mask)

    # maximum (not where) so a nan input stays nan instead of washing to 0
    return _make(np.maximum(a.values, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    out_values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                          np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(a, g * out_values * (1.0 - out_values))

    return _make(out_values, (a,), backward)


def log(a) -> Tensor:
    """Natural log with the argument clamped below at LOG_EPS.

    In the clamped region the output is constant, so the adjoint is zero
    there; this is what bounds the BCE-style losses.
    """
    a = _as_tensor(a)
    clamped = np.maximum(a.values, LOG_EPS)
    inside = a.values > LOG_EPS

    def backward(g):
        _accumulate(a, np.where(inside, g / clamped, 0.0))

    return _make(np.log(clamped), (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.values > lo) & (a.values < hi)

    def backward(g):
        _accumulate(a, np.where(inside, g, 0.0))

    return _make(np.clip(a.values, lo, hi), (a,), backward)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.values.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(expanded, a.values.shape).copy())

    return _make(out_values, (a,), backward)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.values.size if axis is None else a.values.shape[axis]
    out_values = a.values.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        scale = 1.0 / count
        if axis is None:
            _accumulate(a, np.broadcast_to(g * scale, a.values.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(expanded * scale, a.values.shape).copy())

    return _make(out_values, (a,), backward)


def _extreme(a, axis: int, argfn, redfn) -> Tensor:
    a = _as_tensor(a)
    out_values = redfn(a.values, axis=axis)
    # First occurrence wins on ties, keeping the backward pass deterministic.
    winners = argfn(a.values, axis=axis)

    def backward(g):
        scatter = np.zeros_like(a.values)
        np.put_along_axis(scatter, np.expand_dims(winners, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accumulate(a, scatter)

    return _make(out_values, (a,), backward)


def reduce_max(a, axis: int) -> Tensor:
    return _extreme(a, axis, np.argmax, np.max)


def reduce_min(a, axis: int) -> Tensor:
    return _extreme(a, axis, np.argmin, np.min)


def gather_rows(a, idx) -> Tensor:
    """Select rows by integer index; the adjoint scatter-adds them back."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        scatter = np.zeros_like(a.values)
        np.add.at(scatter, idx, g)
        _accumulate(a, scatter)

    return _make(a.values[idx], (a,), backward)


def reverse_gradient(a, coefficient: float = 1.0) -> Tensor:
    """Identity forward; the adjoint into the parent is scaled by -coefficient.

    Turns a shared descent step into a min-max game: everything downstream
    of this node sees ordinary gradients, everything upstream sees them
    negated.
    """
    a = _as_tensor(a)
    if coefficient < 0:
        raise ValidationError(f"reversal coefficient must be >= 0, got {coefficient}")

    def backward(g):
        _accumulate(a, -coefficient * g)

    return _make(a.values, (a,), backward)


def softmax(a) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1 to ~1e-16."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"softmax expects an n x K matrix, got shape {a.values.shape}")
    if a.values.shape[1] < 2:
        raise ValidationError("softmax needs at least 2 classes")
    out_values = np_softmax(a.values)

    def backward(g):
        inner = (g * out_values).sum(axis=1, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return _make(out_values, (a,), backward)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"log_softmax expects an n x K matrix, got shape {a.values.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out_values = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out_values)

    def backward(g):
        _accumulate(a, g - probs * g.sum(axis=1, keepdims=True))

    return _make(out_values, (a,), backward)


# ---------------------------------------------------------------------------
# compound losses


def binary_cross_entropy(pred, target) -> Tensor:
    """Mean of -[t*log(p) + (1-t)*log(1-p)] with p clipped to [eps, 1-eps]."""
    pred = _as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    p = clip(pred, LOG_EPS, 1.0 - LOG_EPS)
    per_sample = neg(add(mul(t, log(p)), mul(1.0 - t, log(sub(1.0, p)))))
    return tmean(per_sample)


def cross_entropy(logits, target_probs) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits))."""
    target = np.asarray(target_probs, dtype=np.float64)
    if target.shape != _as_tensor(logits).values.shape:
        raise ShapeError("cross_entropy target shape "
                         f"{target.shape} != logits shape {_as_tensor(logits).values.shape}")
    return neg(tmean(tsum(mul(target, log_softmax(logits)), axis=1)))


# ---------------------------------------------------------------------------
# plain numpy helpers (no gradient)


def np_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum(p log p) of one probability vector, in nats."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError(f"entropy expects a vector, got shape {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
        raise ValidationError("entropy input is not a probability vector")
    nonzero = p > 0
    return float(-(p[nonzero] * np.log(p[nonzero])).sum())


def row_entropy(p: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy with 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


# ---------------------------------------------------------------------------
# backward pass and verification


def backward(out: Tensor) -> None:
    """Propagate d(out)/d(node) through the recorded graph from a scalar."""
    if out.values.size != 1:
        raise ShapeError(f"backward starts from a scalar, got shape {out.values.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._nid, reverse=True)
    out.grad = np.ones_like(out.values)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call.  Error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    zero_grads(params)
    out = f()
    if not np.isfinite(out.values).all():
        raise NumericsError("grad_check objective is not finite")
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
                for p in params]

    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.values.reshape(-1)
        ref_flat = ref.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = f().item()
            flat[i] = original - eps
            f_minus = f().item()
            flat[i] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError("grad_check hit a non-finite evaluation")
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ref_flat[i] - fd) / max(1.0, abs(ref_flat[i]))
            worst = max(worst, err)
    return worst
