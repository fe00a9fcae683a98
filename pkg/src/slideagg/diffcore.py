"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written with the same differentiable operations used
in the forward pass, so ``grad(..., create_graph=True)`` returns tensors that
are themselves part of the graph and can be differentiated again. That is
what the gradient-regularized VAE needs (a loss built from a gradient).

Shapes are strict: elementwise ops require equal shapes, and the only
implicit broadcast is :func:`add_bias` (a vector added to every row).
Explicit broadcasting goes through :func:`broadcast_to`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from numbers import Real
from typing import Callable, Sequence

import numpy as np

from slideagg.errors import ShapeError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def recording(flag: bool):
    """Enable or disable graph construction in the current thread."""
    previous = is_recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = previous


def no_grad():
    return recording(False)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Tensor:
    return Tensor(value)


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, value, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value)
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.vjp = vjp
        out.requires_grad = True
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _node("add", a.value + b.value, (a, b), lambda g, o: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _node("sub", a.value - b.value, (a, b), lambda g, o: (g, neg(g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _node("mul", a.value * b.value, (a, b), lambda g, o: (mul(g, b), mul(g, a)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    return _node("div", a.value / b.value, (a, b), lambda g, o: (div(g, b), neg(div(mul(g, o), b))))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.value, (a,), lambda g, o: (neg(g),))


def scale(a, c: Real) -> Tensor:
    a, c = as_tensor(a), float(c)
    return _node("scale", a.value * c, (a,), lambda g, o: (scale(g, c),))


def shift(a, c: Real) -> Tensor:
    a, c = as_tensor(a), float(c)
    return _node("shift", a.value + c, (a,), lambda g, o: (g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = const((a.value > 0).astype(np.float64))
    return _node("relu", a.value * mask.value, (a,), lambda g, o: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _node("tanh", np.tanh(a.value), (a,), lambda g, o: (mul(g, shift(neg(mul(o, o)), 1.0)),))


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _node("sigmoid", _sigmoid_value(a.value), (a,),
                 lambda g, o: (mul(g, mul(o, shift(neg(o), 1.0))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _node("exp", np.exp(a.value), (a,), lambda g, o: (mul(g, o),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node("log", np.log(a.value), (a,), lambda g, o: (div(g, a),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node("softplus", np.logaddexp(0.0, a.value), (a,), lambda g, o: (mul(g, sigmoid(a)),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node("square", a.value * a.value, (a,), lambda g, o: (mul(g, scale(a, 2.0)),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = const(np.sign(a.value))
    return _node("abs", np.abs(a.value), (a,), lambda g, o: (mul(g, sign),))


def stop_gradient(a) -> Tensor:
    return const(as_tensor(a).value)


# -- linear algebra and shape ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _node("matmul", a.value @ b.value, (a, b),
                 lambda g, o: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _node("transpose", a.value.T.copy(), (a,), lambda g, o: (transpose(g),))


def add_bias(m, b) -> Tensor:
    """Add vector ``b`` (k,) to every row of ``m`` (n, k)."""
    m, b = as_tensor(m), as_tensor(b)
    if m.value.ndim != 2 or b.value.ndim != 1 or m.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {m.shape} vs {b.shape}")
    return _node("add_bias", m.value + b.value, (m, b), lambda g, o: (g, sum(g, axis=0)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _node("reshape", value, (a,), lambda g, o: (reshape(g, old),))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    total = a.shape[1]
    return _node("slice_cols", a.value[:, start:stop].copy(), (a,), lambda g, o: (pad_cols(g, start, total),))


def pad_cols(a, start: int, total: int) -> Tensor:
    """Place ``a`` at column ``start`` of a zero matrix with ``total`` columns."""
    a = as_tensor(a)
    width = a.shape[1]
    value = np.zeros((a.shape[0], total))
    value[:, start:start + width] = a.value
    return _node("pad_cols", value, (a,), lambda g, o: (slice_cols(g, start, start + width),))


def broadcast_to(a, shape, axis: int | None = None) -> Tensor:
    """Repeat ``a`` along ``axis`` to fill ``shape`` (all axes if ``axis`` is None).

    ``a`` must have ``shape`` with ``axis`` removed, or be a scalar when
    ``axis`` is None.
    """
    a = as_tensor(a)
    shape = tuple(shape)
    if axis is None:
        if a.size != 1:
            raise ShapeError(f"broadcast_to: expected scalar, got {a.shape}")
        value = np.full(shape, a.value.reshape(()))
    else:
        expected = shape[:axis] + shape[axis + 1:]
        if a.shape != expected:
            raise ShapeError(f"broadcast_to: {a.shape} cannot fill {shape} along axis {axis}")
        value = np.repeat(np.expand_dims(a.value, axis), shape[axis], axis=axis)
    in_shape = a.shape

    def vjp(g, o):
        s = sum(g, axis=axis)
        return (reshape(s, in_shape) if axis is None else s,)

    return _node("broadcast", value, (a,), vjp)


# -- reductions --------------------------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    return _node("sum", np.sum(a.value, axis=axis), (a,), lambda g, o: (broadcast_to(g, shape, axis),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def max(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient flows to the first maximizer."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        idx = np.argmax(a.value)
        mask = np.zeros(a.size)
        mask[idx] = 1.0
        mask = mask.reshape(shape)
        value = a.value.reshape(-1)[idx]
    else:
        idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
        mask = np.zeros(shape)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        value = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)
    mask_t = const(mask)
    return _node("max", value, (a,), lambda g, o: (mul(broadcast_to(g, shape, axis), mask_t),))


# -- composites ----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.value.ndim
    shifted = sub(a, const(np.broadcast_to(np.max(a.value, axis=axis, keepdims=True), a.shape)))
    e = exp(shifted)
    return div(e, broadcast_to(sum(e, axis=axis), a.shape, axis))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` (n, C) against integer targets."""
    logits = as_tensor(logits)
    if logits.value.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {targets.shape} targets")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ShapeError(f"softmax_cross_entropy: targets out of range for {c} classes")
    row_max = np.max(logits.value, axis=1)
    shifted = sub(logits, const(np.broadcast_to(row_max[:, None], logits.shape)))
    lse = add(log(sum(exp(shifted), axis=1)), const(row_max))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    picked = sum(mul(logits, const(onehot)), axis=1)
    return mean(sub(lse, picked))


def l2_squared(a) -> Tensor:
    return sum(square(a))


def l1_norm(a) -> Tensor:
    return sum(abs(a))


# -- differentiation -------------------------------------------------------------


class Graph:
    """The differentiable nodes reachable from ``output``, inputs before consumers."""

    def __init__(self, output: Tensor):
        self.output = output
        self.order = _toposort(output)
        self._ids = {id(n) for n in self.order}

    @property
    def nodes(self) -> list[Tensor]:
        return list(self.order)

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._ids

    def __len__(self) -> int:
        return len(self.order)


def _toposort(output: Tensor) -> list[Tensor]:
    if not output.requires_grad:
        return []
    order: list[Tensor] = []
    visited = {id(output)}
    stack = [(output, iter(output.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], *, create_graph: bool = False,
         allow_unused: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    ``wrt`` may contain leaves or intermediate nodes. With
    ``create_graph=True`` the returned gradients are graph nodes and can be
    passed to another ``grad`` call.
    """
    if output.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    graph = Graph(output)
    wanted = {id(w): i for i, w in enumerate(wrt)}
    for w in wrt:
        if w not in graph and not allow_unused:
            raise ValueError(f"grad: {w!r} is not in the graph of the output")
    results: list[Tensor | None] = [None] * len(wrt)
    remaining = {id(w) for w in wrt if w in graph}

    with recording(create_graph):
        adjoint = {id(output): const(np.ones_like(output.value))}
        for node in reversed(graph.order):
            if not remaining:
                break
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if id(node) in remaining:
                results[wanted[id(node)]] = g
                remaining.discard(id(node))
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g, node)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoint[key] = add(adjoint[key], pg) if key in adjoint else pg

    out = []
    for w, r in zip(wrt, results):
        if r is None:
            r = const(np.zeros_like(w.value))
        elif not create_graph:
            r = const(r.value)
        out.append(r)
    return out


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on fresh leaf tensors and return its value and gradients."""
    leaves = {k: param(v) for k, v in params.items()}
    loss = fn(leaves)
    names = list(leaves)
    grads = grad(loss, [leaves[k] for k in names], allow_unused=True)
    return loss.item(), {k: g.value for k, g in zip(names, grads)}


def fd_check(f: Callable[[list[Tensor]], Tensor], theta: Sequence[np.ndarray], h: float = 1e-4) -> float:
    """Largest relative disagreement between ``grad`` and central differences.

    For every coordinate, ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    ``f`` receives a list of tensors (one per array in ``theta``) and returns a
    scalar tensor; it may call :func:`grad` internally with
    ``create_graph=True`` to check second-order paths.
    """
    theta = [np.array(t, dtype=np.float64) for t in theta]
    leaves = [param(t) for t in theta]
    analytic = [g.value for g in grad(f(leaves), leaves, allow_unused=True)]

    def evaluate(values):
        return f([param(v) for v in values]).item()

    worst = 0.0
    for i, base in enumerate(theta):
        for j in np.ndindex(base.shape):
            plus = [t.copy() for t in theta]
            minus = [t.copy() for t in theta]
            plus[i][j] += h
            minus[i][j] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
            a = analytic[i][j]
            err = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12)
            worst = err if err > worst else worst
    return float(worst)
