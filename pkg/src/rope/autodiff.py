"""Dense float64 tensors with a define-by-run reverse-mode tape.

Gradients are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)

Outside a tape every op is a plain numpy evaluation, which is what the
inference paths (sampling, log-density tables) rely on for speed.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "AdamState",
    "DomainError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_finite",
    "forward_op",
]


class ShapeError(ValueError):
    pass


class DomainError(ArithmeticError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node = -1

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
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; every path goes through the op table
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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            raise TapeError("tapes must be exited in LIFO order")

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule) -> None:
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, rule))

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._node = -1
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        # creation order is a topological order; replay it backwards once
        for node in reversed(self.nodes[: loss._node + 1]):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._tape is self:
                    pending[key] = pending[key] + ig if key in pending else ig
                elif key in leaf_grads:
                    leaf_grads[key] = (inp, leaf_grads[key][1] + ig)
                else:
                    leaf_grads[key] = (inp, ig)
        for leaf, g in leaf_grads.values():
            leaf.grad = np.array(g, dtype=np.float64).reshape(leaf.shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not on any active tape")
    loss._tape.backward(loss)


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


# --------------------------------------------------------------------------
# op machinery


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, rule)
    return out


def _check_binary(op: str, a: tuple, b: tuple) -> None:
    # equal shapes, scalars, or one shape a trailing suffix of the other
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape),
                            _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # relu'(0) = 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if np.isinf(y).any() and np.isfinite(a.data).all():
        raise DomainError(f"exp: overflow for inputs up to {a.data.max():.4g}")
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if (x <= 0.0).any():
        raise DomainError(f"log: non-positive input (min {x.min():.4g})")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if (x < 0.0).any():
        raise DomainError(f"sqrt: negative input (min {x.min():.4g})")
    y = np.sqrt(x)

    def rule(g):
        safe = np.where(y > 0.0, y, 1.0)
        return (np.where(y > 0.0, 0.5 * g / safe, 0.0),)

    return _emit(y, (a,), rule)


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * x * g,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)  # abs'(0) = 0
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,))


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))
    return _emit(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / n,))


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = m + np.log(s)
    soft = e / s
    value = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
    return _emit(value, (a,),
                 lambda g: (_expand(g, x.shape, axis, keepdims) * soft,))


def broadcast(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _emit(np.array(y), (a,), lambda g: (_unbroadcast(g, src),))


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    try:
        y = a.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {shape}") from None
    return _emit(np.array(y), (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(y, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _emit(y, (a,), lambda g: (g.reshape(src),))


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast,
    "slice": slice_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "square": square,
    "abs": abs_,
    "logsumexp": logsumexp,
}

OP_KINDS = tuple(_OPS)


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update. ``None`` grads count as zero."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} state slots")
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
