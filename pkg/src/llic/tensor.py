"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`;
:func:`backward` replays the nodes in exact reverse order.  The tape is
rebuilt on every forward pass, which is what data-dependent kernels need.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-9


class TapeError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """N-D array of 64-bit floats with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; broadcasting is used internally by the layer ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None) -> "Tensor":
        return reduce("sum", self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce("mean", self, axes)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Param(Tensor):
    """A learned weight: a tensor that always requires grad and carries a dotted name."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()


_state = {"tape": Tape(), "enabled": True}


def current_tape() -> Tape:
    return _state["tape"]


def is_grad_enabled() -> bool:
    return _state["enabled"]


@contextlib.contextmanager
def no_grad():
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


@contextlib.contextmanager
def tape_scope(tape: Tape | None = None):
    """Record into a private tape for the duration of the block."""
    tape = Tape() if tape is None else tape
    prev = _state["tape"]
    _state["tape"] = tape
    try:
        yield tape
    finally:
        _state["tape"] = prev


def reset_tape() -> None:
    _state["tape"].reset()


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and register ``backward`` if any input needs a gradient.

    ``backward(grad_out)`` must return one array (or None) per input.
    """
    needs = _state["enabled"] and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _state["tape"].nodes.append(_Node(out, tuple(inputs), backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state["tape"]
    if not loss.requires_grad or not tape.nodes:
        raise TapeError("backward called without a recorded forward pass")
    nodes = tape.nodes
    produced = {id(n.out) for n in nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = np.asarray(grads.pop(key), dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.reset()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    out = fwd(a.data, b.data)

    def backward_fn(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b, clamp: bool = False) -> Tensor:
    """a / b; ``clamp`` floors a positive-domain denominator at 1e-9."""
    b = as_tensor(b)
    if clamp:
        b = clamp_min(b, LOG_FLOOR)
    elif np.any(b.data == 0):
        raise DomainError("division by zero")
    return _binary(a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(a, fwd, bwd) -> Tensor:
    a = as_tensor(a)
    out = fwd(a.data)
    return record(out, (a,), lambda g: (bwd(g, a.data, out),))


def neg(a) -> Tensor:
    return _unary(a, np.negative, lambda g, x, y: -g)


def scale(a, s: float) -> Tensor:
    s = float(s)
    return _unary(a, lambda x: x * s, lambda g, x, y: g * s)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a, clamp: bool = False) -> Tensor:
    a = as_tensor(a)
    if clamp:
        a = clamp_min(a, LOG_FLOOR)
    elif np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, y: g / x)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sqrt(a, clamp: bool = False) -> Tensor:
    a = as_tensor(a)
    if clamp:
        a = clamp_min(a, LOG_FLOOR)
    elif np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def square(a) -> Tensor:
    return _unary(a, np.square, lambda g, x, y: 2.0 * g * x)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Plain clamp; the gradient is zero wherever the bound is active."""
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(a.data, lo_, hi_)
    mask = (a.data >= lo_) & (a.data <= hi_)
    return record(out, (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    if not np.any(a.data < lo):
        return a
    return clamp(a, lo, None)


def lower_bound(a, bound: float) -> Tensor:
    """max(a, bound) whose gradient still flows when it would raise ``a``."""
    a = as_tensor(a)
    out = np.maximum(a.data, bound)

    def backward_fn(g):
        return (g * ((a.data >= bound) | (g < 0)),)

    return record(out, (a,), backward_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}
_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sqrt": sqrt,
    "abs": abs,
}


def elementwise(op_kind: str, a, b=None, clamp: bool = False) -> Tensor:
    """Strict entry point: operands must share a shape or ``b`` must be a scalar."""
    a = as_tensor(a)
    if op_kind in ("log", "sqrt"):
        return _UNARY[op_kind](a, clamp=clamp)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "scale":
        return scale(a, float(b))
    if op_kind == "clamp":
        lo, hi = b if isinstance(b, tuple) else (b, None)
        return clamp(a, lo, hi)
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.size != 1:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    elif np.ndim(b) != 0:
        bt = np.asarray(b)
        if bt.shape != a.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {bt.shape}")
    if op_kind == "div":
        return div(a, b, clamp=clamp)
    return _ELEMENTWISE[op_kind](a, b)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None or axes == "all":
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a, axes=None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    if op_kind == "sum":
        out = a.data.sum(axis=ax)
        factor = 1.0
    elif op_kind == "mean":
        count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
        out = a.data.sum(axis=ax) / count
        factor = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    kept = tuple(1 if i in ax else s for i, s in enumerate(a.shape))

    def backward_fn(g):
        return (np.broadcast_to(np.reshape(g, kept) * factor, a.shape).copy(),)

    return record(np.asarray(out), (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(parts)

    return record(out, tensors, backward_fn)


def take(a, index, axis: int = 1) -> Tensor:
    """Contiguous slice ``start:stop`` (``index`` is a slice) along ``axis``."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return record(out, (a,), backward_fn)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    forward_fn: Callable[[Tensor], Tensor],
    input: Tensor,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient and central differences.

    Non-scalar outputs are contracted with a fixed random projection.  The
    input tensor is perturbed in place, so ``forward_fn`` may ignore its
    argument and close over parameters instead.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    saved_flag = input.requires_grad
    saved_grad = input.grad

    with no_grad():
        ref = forward_fn(input).data.copy()
        again = forward_fn(input).data
    if not np.array_equal(ref, again):
        raise RuntimeError("forward_fn is not deterministic")
    proj = np.random.default_rng(seed).standard_normal(ref.shape)

    input.requires_grad = True
    input.grad = None
    with tape_scope():
        out = forward_fn(input)
        loss = reduce("sum", mul(out, proj))
        backward(loss)
    analytic = np.zeros(input.shape) if input.grad is None else input.grad.copy()
    input.requires_grad = saved_flag
    input.grad = saved_grad

    numeric = np.zeros(input.shape)
    flat = input.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(np.sum(forward_fn(input).data * proj))
            flat[i] = orig - epsilon
            fm = float(np.sum(forward_fn(input).data * proj))
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
