"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one input participates in differentiation. ``backward`` then
walks the tape once, newest node first, which is a valid reverse topological
order because a node can only reference tensors recorded before it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericDomainError",
    "ContractError",
    "tensor",
    "parameter",
    "no_grad",
    "precision",
    "get_tape",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "relu",
    "tanh",
    "square",
    "sqrt",
    "elementwise",
    "reduce",
    "tsum",
    "mean",
    "concat",
    "log_softmax",
]

LOG_FLOOR = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of a non-positive)."""


class ContractError(RuntimeError):
    """A caller violated an API precondition."""


_state = {"dtype": np.float32, "grad_enabled": True}


def _dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the float type of newly created tensors.

    The library computes in float32; gradient checks switch to float64 so that
    central differences are not swamped by rounding.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tape:
    """Append-only log of recorded operations.

    Each node is ``(parents, vjp)`` where ``vjp`` maps the gradient of the
    node's output to a tuple of gradients, one per parent.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[tuple[Tensor, ...], Callable]] = []
        self.generation = 0

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        out._node = len(self.nodes)
        out._gen = self.generation
        self.nodes.append((parents, vjp))

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


class Tensor:
    """Row-major n-dimensional float array, optionally tracked on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_gen")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None
        self._gen = -1

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def on_tape(self) -> bool:
        return self._node is not None and self._gen == _tape.generation

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.on_tape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.tracked for p in parents):
        _tape.record(out, parents, vjp)
    return out


# -- broadcasting --------------------------------------------------------------


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], opname: str) -> tuple[int, ...]:
    """Allowed: equal shapes, scalars, a row vector against a matrix, or a
    trailing-1 column against a matrix."""
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    if len(a) == 2 and len(b) in (1, 2):
        if b in ((a[1],), (1, a[1]), (a[0], 1)):
            return a
    if len(b) == 2 and len(a) in (1, 2):
        if a in ((b[1],), (1, b[1]), (b[0], 1)):
            return b
    raise ShapeError(f"{opname}: cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- binary ops ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- unary ops -----------------------------------------------------------------


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def _check_positive(x: np.ndarray, opname: str) -> None:
    if not np.all(x > 0):
        bad = x[~(x > 0)].flat[0]
        raise NumericDomainError(f"{opname} requires strictly positive input, got {bad}")


def log(a) -> Tensor:
    a = _as_tensor(a)
    _check_positive(a.data, "log")
    x = np.maximum(a.data, LOG_FLOOR)
    live = a.data >= LOG_FLOOR
    return _make(np.log(x), (a,), lambda g: (np.where(live, g / x, 0).astype(g.dtype),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    _check_positive(a.data, "sqrt")
    live = a.data >= LOG_FLOOR
    out = np.sqrt(np.maximum(a.data, LOG_FLOOR))
    return _make(out, (a,), lambda g: (np.where(live, g * 0.5 / out, 0).astype(g.dtype),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.data.dtype)
    return _make(out, (a,), lambda g: (g * expit(a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


_UNARY = {
    "exp": exp,
    "log": log,
    "neg": neg,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
    "square": square,
    "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch a pointwise op by name."""
    if op in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{op} takes one input, got {len(inputs)}")
        return _UNARY[op](inputs[0])
    if op in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs, got {len(inputs)}")
        return _BINARY[op](*inputs)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- reductions and reshaping ----------------------------------------------------


def _check_axis(axis, ndim):
    if axis is not None and not (-ndim <= axis < ndim):
        raise ShapeError(f"axis {axis} out of range for tensor of rank {ndim}")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis, a.ndim)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce(op: str, t, axis=None) -> Tensor:
    if op == "sum":
        return tsum(t, axis=axis)
    if op == "mean":
        return mean(t, axis=axis)
    raise ContractError(f"unknown reduction {op!r}")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- differentiation -------------------------------------------------------------


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.on_tape:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) + (0 if loss.grad is None else loss.grad)
            return
        raise ContractError("loss is not on the tape; nothing to differentiate")
    nodes = _tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss._node + 1)
    grads[loss._node] = np.ones_like(loss.data)
    gen = _tape.generation
    for i in range(loss._node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        parents, vjp = nodes[i]
        for p, pg in zip(parents, vjp(g)):
            if p._node is not None and p._gen == gen:
                j = p._node
                grads[j] = pg if grads[j] is None else grads[j] + pg
            elif p.requires_grad:
                pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
    if not retain_graph:
        _tape.reset()


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-3,
) -> float:
    """Largest relative gap between taped and central-difference gradients.

    ``f`` must rebuild the scalar loss from the current parameter values and be
    deterministic. Runs in float64.
    """
    params = list(params)
    with precision(np.float64):
        saved = [p.data for p in params]
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        try:
            _tape.reset()
            loss = f()
            if loss.tracked:
                backward(loss)
            analytic = [
                np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
            ]
            worst = 0.0
            with no_grad():
                for p, an in zip(params, analytic):
                    flat = p.data.reshape(-1)
                    for k in range(flat.size):
                        orig = flat[k]
                        flat[k] = orig + h
                        fp = f().item()
                        flat[k] = orig - h
                        fm = f().item()
                        flat[k] = orig
                        num = (fp - fm) / (2 * h)
                        err = abs(an.reshape(-1)[k] - num) / (abs(num) + 1e-8)
                        if math.isnan(err):
                            return float("nan")
                        worst = max(worst, err)
            return worst
        finally:
            for p, d in zip(params, saved):
                p.data = d
                p.grad = None
            _tape.reset()
