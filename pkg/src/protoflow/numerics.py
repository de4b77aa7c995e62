"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records a dynamic computation graph: every operation returns a
new Tensor holding the result values, references to its parent tensors, and
a closure that routes adjoints back to those parents.  Calling
``backward()`` on a scalar output runs a topological sweep over the
recorded graph and accumulates adjoints on every tracked tensor.

Also provides the network building blocks used elsewhere in the package:
affine layers, ELU, stable softmax, and multi-head self-attention.

All arithmetic is float64.  Any operation whose result contains NaN or Inf
raises ``NonFiniteError`` instead of propagating the garbage.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EmptySetError, NonFiniteError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor values must be finite")
    return arr


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array participating in a reverse-mode differentiation graph.

    ``values`` holds the data, ``adjoint`` accumulates gradients during a
    backward pass (lazily allocated, same shape as ``values``), and
    ``requires_grad`` marks whether this tensor is tracked.
    """

    __slots__ = ("values", "requires_grad", "adjoint", "_parents", "_backprop")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.adjoint: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], None] | None = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(values: np.ndarray, parents: tuple["Tensor", ...],
                 backprop: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.adjoint = None
        if not np.isfinite(values).all():
            raise NonFiniteError("operation produced a non-finite result")
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backprop = backprop
        else:
            out.requires_grad = False
            out._parents = ()
            out._backprop = None
        return out

    # -- basic introspection -----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- backward pass -------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        # grad may be a view or a buffer shared with another consumer, so
        # the first accumulation must copy before later in-place adds
        if self.adjoint is None:
            self.adjoint = np.array(grad)
        else:
            self.adjoint += grad

    def _accumulate_owned(self, grad: np.ndarray) -> None:
        # fast path: caller hands over a freshly allocated array
        if self.adjoint is None:
            self.adjoint = grad
        else:
            self.adjoint += grad

    def zero_adjoint(self) -> None:
        self.adjoint = None

    def backward(self) -> None:
        """Accumulate adjoints of this scalar output on every tracked tensor."""
        if self.values.size != 1:
            raise DimensionError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that is not tracked")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.values))
        for node in reversed(order):
            if node._backprop is not None and node.adjoint is not None:
                if not np.isfinite(node.adjoint).all():
                    raise NonFiniteError("non-finite adjoint during backward")
                node._backprop(node.adjoint)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        return multiply(self, _lift(other))

    def __rmul__(self, other):
        return multiply(_lift(other), self)

    def __truediv__(self, other):
        return divide(self, _lift(other))

    def __rtruediv__(self, other):
        return divide(_lift(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for a in axes:
                count *= self.shape[a]
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def transposed(self):
        return transposed(self)

    def clip_min(self, lo: float):
        return clip_min(self, lo)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(values) -> Tensor:
    """Untracked tensor wrapping the given values."""
    return Tensor(values, requires_grad=False)


def parameter(values, rng: np.random.Generator | None = None) -> Tensor:
    """Tracked tensor intended as a trainable leaf."""
    return Tensor(values, requires_grad=True)


# -- elementwise arithmetic ----------------------------------------------------


def _binary(a: Tensor, b: Tensor, forward, grad_a, grad_b,
            own_a: bool, own_b: bool) -> Tensor:
    # own_* marks gradient functions that allocate a fresh array, letting the
    # parent adopt the buffer instead of copying it on first accumulation
    try:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            values = forward(a.values, b.values)
    except ValueError as exc:
        raise DimensionError(f"operands not broadcastable: {a.shape} vs {b.shape}") from exc

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = grad_a(g)
            gs = _sum_to_shape(ga, a.shape)
            if own_a or gs is not ga:
                a._accumulate_owned(gs)
            else:
                a._accumulate(gs)
        if b.requires_grad:
            gb = grad_b(g)
            gs = _sum_to_shape(gb, b.shape)
            if own_b or gs is not gb:
                b._accumulate_owned(gs)
            else:
                b._accumulate(gs)

    return Tensor._from_op(values, (a, b), backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g, False, False)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, False, True)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g: g * b.values, lambda g: g * a.values, True, True)


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = _binary(a, b, np.divide,
                  lambda g: g / b.values,
                  lambda g: -g * a.values / (b.values * b.values), True, True)
    return out


def negate(a: Tensor) -> Tensor:
    def backprop(g):
        a._accumulate_owned(-g)

    return Tensor._from_op(-a.values, (a,), backprop)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)
    with np.errstate(over="ignore"):
        values = a.values * factor

    def backprop(g):
        a._accumulate_owned(g * factor)

    return Tensor._from_op(values, (a,), backprop)


def square(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = a.values * a.values

    def backprop(g):
        a._accumulate_owned(2.0 * a.values * g)

    return Tensor._from_op(values, (a,), backprop)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = np.exp(a.values)

    def backprop(g):
        a._accumulate_owned(g * values)

    return Tensor._from_op(values, (a,), backprop)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(a.values)

    def backprop(g):
        a._accumulate_owned(g / a.values)

    return Tensor._from_op(values, (a,), backprop)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        values = np.sqrt(a.values)

    def backprop(g):
        a._accumulate_owned(g * 0.5 / values)

    return Tensor._from_op(values, (a,), backprop)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient passes only where a was not clamped."""
    mask = a.values >= lo

    def backprop(g):
        a._accumulate_owned(g * mask)

    return Tensor._from_op(np.maximum(a.values, lo), (a,), backprop)


def elu(a: Tensor) -> Tensor:
    """x for x >= 0, exp(x) - 1 otherwise."""
    neg = a.values < 0
    values = np.where(neg, np.expm1(a.values), a.values)

    def backprop(g):
        a._accumulate_owned(g * np.where(neg, np.exp(a.values), 1.0))

    return Tensor._from_op(values, (a,), backprop)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        values = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backprop(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(values, (a,), backprop)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        values = np.broadcast_to(a.values, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc

    def backprop(g):
        gs = _sum_to_shape(g, a.shape)
        if gs is not g:
            a._accumulate_owned(gs)
        else:
            a._accumulate(gs)

    return Tensor._from_op(values, (a,), backprop)


def transposed(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swap_axes(a, -1, -2)


def swap_axes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    """Exchange two axes; the adjoint swaps them back."""
    if a.ndim < 2:
        raise DimensionError("swap_axes() needs at least 2 dimensions")
    for ax in (axis1, axis2):
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} out of range for {a.shape}")
    values = np.swapaxes(a.values, axis1, axis2)

    def backprop(g):
        a._accumulate(np.swapaxes(g, axis1, axis2))

    return Tensor._from_op(values, (a,), backprop)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an axis; adjoints split back to the parts."""
    parts = tuple(parts)
    if not parts:
        raise EmptySetError("concat() of zero tensors")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes inconsistent: {[p.shape for p in parts]}") from exc
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backprop(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part._accumulate(g[tuple(idx)])

    return Tensor._from_op(values, parts, backprop)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._from_op(values, (a,), backprop)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} @ {b.shape}") from exc

    def backprop(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            a._accumulate_owned(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            b._accumulate_owned(_sum_to_shape(gb, b.shape))

    return Tensor._from_op(values, (a, b), backprop)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis, computed with max-subtraction for stability."""
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        inner = (g * values).sum(axis=axis, keepdims=True)
        a._accumulate_owned(values * (g - inner))

    return Tensor._from_op(values, (a,), backprop)


# -- network building blocks ---------------------------------------------------


@dataclass
class AffineParams:
    """Weights of one affine layer: y = x W^T + b."""

    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor    # (out_dim,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("affine weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError("affine weight and bias disagree on out_dim")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def affine(params: AffineParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise DimensionError(
            f"affine expected inner dimension {params.in_dim}, got {x.shape[-1]}")
    return matmul(x, params.weight.transposed()) + params.bias


@dataclass
class AttentionParams:
    """Per-head q/k/v projections plus the shared output projection.

    Each of ``query``/``key``/``value`` holds one (head_dim, model_dim)
    matrix per head; ``out`` maps the concatenated head outputs
    (heads * head_dim) back to model_dim.
    """

    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    out: Tensor

    def __post_init__(self):
        if not (len(self.query) == len(self.key) == len(self.value)) or not self.query:
            raise DimensionError("attention needs matching, non-empty head lists")
        hd, md = self.query[0].shape
        for mat in (*self.query, *self.key, *self.value):
            if mat.shape != (hd, md):
                raise DimensionError("attention head projections disagree on shape")
        if self.out.shape != (md, len(self.query) * hd):
            raise DimensionError(
                f"attention output projection must be {(md, len(self.query) * hd)}, "
                f"got {self.out.shape}")

    @property
    def heads(self) -> int:
        return len(self.query)

    @property
    def head_dim(self) -> int:
        return self.query[0].shape[0]

    @property
    def model_dim(self) -> int:
        return self.query[0].shape[1]


def multi_head_attention(params: AttentionParams, x: Tensor) -> Tensor:
    """Self-attention over the rows of x: (..., n, model_dim) -> same shape.

    Permutation-equivariant in the row axis.  No residual connection and no
    normalization layer: the output is just the projected mix of values.
    """
    if x.shape[-1] != params.model_dim:
        raise DimensionError(
            f"attention expected model_dim {params.model_dim}, got {x.shape[-1]}")
    if x.shape[-2] == 0:
        raise EmptySetError("attention over an empty set of rows")
    heads = params.heads
    hd = params.head_dim
    inv_scale = 1.0 / math.sqrt(hd)
    n = x.shape[-2]
    lead = x.shape[:-2]
    split = lead + (n, heads, hd)

    # all heads at once: stack the per-head projections into one matrix,
    # then give each head its own axis so the score matmuls batch over it
    def project(mats: list[Tensor]) -> Tensor:
        joined = matmul(x, concat(mats, axis=0).transposed())
        return swap_axes(joined.reshape(split), -2, -3)

    q = project(params.query)
    k = project(params.key)
    v = project(params.value)
    scores = scale(matmul(q, k.transposed()), inv_scale)
    weights = softmax(scores, axis=-1)
    contexts = matmul(weights, v)
    mixed = swap_axes(contexts, -2, -3).reshape(lead + (n, heads * hd))
    return matmul(mixed, params.out.transposed())


# -- parameter initialization ---------------------------------------------------


def glorot_affine(rng: np.random.Generator, out_dim: int, in_dim: int) -> AffineParams:
    """Affine layer with uniform +-sqrt(6/(fan_in+fan_out)) weights, zero bias."""
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
    bias = Tensor(np.zeros(out_dim), requires_grad=True)
    return AffineParams(weight, bias)


def glorot_attention(rng: np.random.Generator, heads: int, head_dim: int,
                     model_dim: int) -> AttentionParams:
    def proj():
        bound = math.sqrt(6.0 / (model_dim + head_dim))
        return Tensor(rng.uniform(-bound, bound, size=(head_dim, model_dim)),
                      requires_grad=True)

    query = [proj() for _ in range(heads)]
    key = [proj() for _ in range(heads)]
    value = [proj() for _ in range(heads)]
    bound = math.sqrt(6.0 / (heads * head_dim + model_dim))
    out = Tensor(rng.uniform(-bound, bound, size=(model_dim, heads * head_dim)),
                 requires_grad=True)
    return AttentionParams(query, key, value, out)
