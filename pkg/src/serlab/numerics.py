"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is fixed and closed: matmul, broadcast add/sub/mul/div,
transpose, the elementwise functions tanh/exp/log/sigmoid/softplus/mish/
relu/square/sqrt/powf, softmax, concat, row stacking, and axis sum/mean.
Everything else in the package composes exactly these ops, which keeps
every gradient path finite-difference checkable.

Graphs are built eagerly (each op computes its value on construction) and
differentiated once by ``backward``.  Ops never mutate their inputs, so
threads may build and differentiate disjoint graphs concurrently.
"""

from __future__ import annotations

from typing import Iterator, Mapping, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Tensor",
    "ParamStore",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "tanh",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "mish",
    "relu",
    "square",
    "sqrt",
    "powf",
    "softmax",
    "concat",
    "stack_rows",
]


class Tensor:
    """A graph node holding a C-contiguous float64 array."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = "leaf"):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.op = op
        self._parents = parents
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def tensor(values) -> Tensor:
    """Build a constant leaf, rejecting non-finite entries."""
    t = Tensor(values)
    _check_finite(t.data, "tensor")
    return t


def _check_finite(arr: Array, op: str) -> None:
    finite = np.isfinite(arr)
    if not finite.all():
        idx = int(np.argmin(finite.ravel()))
        raise ValueError(f"{op}: non-finite input at flat index {idx}")


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple, op: str, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, parents=parents, op=op)
    if requires:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# binary ops

def _broadcast_data(a: Tensor, b: Tensor, fn, op: str) -> Array:
    try:
        return fn(a.data, b.data)
    except ValueError as err:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from err


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_data(a, b, np.add, "add")

    def backward_fn(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), "add", backward_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_data(a, b, np.subtract, "sub")

    def backward_fn(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), "sub", backward_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_data(a, b, np.multiply, "mul")

    def backward_fn(g: Array) -> None:
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), "mul", backward_fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if np.any(b.data == 0.0):
        raise ValueError("div: division by zero")
    data = _broadcast_data(a, b, np.divide, "div")

    def backward_fn(g: Array) -> None:
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), "div", backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    an, bn = a.data.ndim, b.data.ndim
    if an == 0 or bn == 0 or an > 2 or bn > 2:
        raise ValueError(f"matmul: operands must be 1-D or 2-D, got ranks {an} and {bn}")
    try:
        data = a.data @ b.data
    except ValueError as err:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from err

    def backward_fn(g: Array) -> None:
        if an == 1 and bn == 1:
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        elif an == 1:
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))
        elif bn == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return _node(data, (a, b), "matmul", backward_fn)


def transpose(x) -> Tensor:
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got shape {x.shape}")

    def backward_fn(g: Array) -> None:
        _accum(x, g.T)

    return _node(x.data.T, (x,), "transpose", backward_fn)


# ---------------------------------------------------------------------------
# elementwise ops

def _unary(x, data: Array, local: Array, op: str) -> Tensor:
    def backward_fn(g: Array) -> None:
        _accum(x, g * local)

    return _node(data, (x,), op, backward_fn)


def tanh(x) -> Tensor:
    x = _coerce(x)
    y = np.tanh(x.data)
    return _unary(x, y, 1.0 - y * y, "tanh")


def exp(x) -> Tensor:
    x = _coerce(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    _check_finite(y, "exp")
    return _unary(x, y, y, "exp")


def log(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        idx = int(np.argmax((x.data <= 0.0).ravel()))
        raise ValueError(f"log: domain error at flat index {idx}")
    return _unary(x, np.log(x.data), 1.0 / x.data, "log")


def _sigmoid_data(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    y = _sigmoid_data(x.data)
    return _unary(x, y, y * (1.0 - y), "sigmoid")


def _softplus_data(x: Array) -> Array:
    # overflow-safe form: max(x, 0) + log(1 + e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x) -> Tensor:
    x = _coerce(x)
    return _unary(x, _softplus_data(x.data), _sigmoid_data(x.data), "softplus")


def mish(x) -> Tensor:
    """Elementwise x * tanh(softplus(x))."""
    x = _coerce(x)
    _check_finite(x.data, "mish")
    t = np.tanh(_softplus_data(x.data))
    local = t + x.data * (1.0 - t * t) * _sigmoid_data(x.data)
    return _unary(x, x.data * t, local, "mish")


def relu(x) -> Tensor:
    x = _coerce(x)
    return _unary(x, np.maximum(x.data, 0.0), (x.data > 0.0).astype(np.float64), "relu")


def square(x) -> Tensor:
    x = _coerce(x)
    return _unary(x, x.data * x.data, 2.0 * x.data, "square")


def sqrt(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data < 0.0):
        idx = int(np.argmax((x.data < 0.0).ravel()))
        raise ValueError(f"sqrt: domain error at flat index {idx}")
    y = np.sqrt(x.data)
    with np.errstate(divide="ignore"):
        local = 0.5 / y
    return _unary(x, y, local, "sqrt")


def powf(x, p: float) -> Tensor:
    """Elementwise x**p for x >= 0 and fixed float exponent."""
    x = _coerce(x)
    p = float(p)
    if np.any(x.data < 0.0):
        idx = int(np.argmax((x.data < 0.0).ravel()))
        raise ValueError(f"powf: negative base at flat index {idx}")
    y = np.power(x.data, p)
    if p == 0.0:
        local = np.zeros_like(x.data)
    else:
        with np.errstate(divide="ignore"):
            local = p * np.power(x.data, p - 1.0)
    return _unary(x, y, local, "powf")


# ---------------------------------------------------------------------------
# structural ops

def softmax(x, axis: int) -> Tensor:
    x = _coerce(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: Array) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _node(y, (x,), "softmax", backward_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(p) for p in parts]
    if not ts:
        raise ValueError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from err
    sizes = [t.data.shape[axis] for t in ts]

    def backward_fn(g: Array) -> None:
        offset = 0
        for t, n in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(sl)])
            offset += n

    return _node(data, tuple(ts), "concat", backward_fn)


def stack_rows(rows: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D (len(rows), D) tensor."""
    ts = [_coerce(r) for r in rows]
    if not ts:
        raise ValueError("stack_rows: no inputs")
    for t in ts:
        if t.data.ndim != 1:
            raise ValueError(f"stack_rows: expected 1-D rows, got shape {t.shape}")
    try:
        data = np.stack([t.data for t in ts], axis=0)
    except ValueError as err:
        raise ValueError("stack_rows: rows have mismatched lengths") from err

    def backward_fn(g: Array) -> None:
        for i, t in enumerate(ts):
            _accum(t, g[i])

    return _node(data, tuple(ts), "stack_rows", backward_fn)


def _reduce(x: Tensor, axis: int | None, mean: bool) -> Tensor:
    op = "mean" if mean else "sum"
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"{op}: axis {axis} invalid for shape {x.shape}")
    if axis is None:
        n = x.data.size
        data = x.data.sum()
    else:
        n = x.data.shape[axis]
        data = x.data.sum(axis=axis)
    if mean:
        data = data / n

    def backward_fn(g: Array) -> None:
        if axis is None:
            full = np.broadcast_to(g, x.data.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis), x.data.shape)
        _accum(x, full / n if mean else full.copy())

    return _node(data, (x,), op, backward_fn)


# ---------------------------------------------------------------------------
# parameters and differentiation

class ParamStore:
    """Ordered name -> parameter map with a parallel gradient map."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._grads: dict[str, Array] = {}

    def add(self, name: str, values, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=trainable, op="param")
        _check_finite(t.data, f"param {name!r}")
        self._params[name] = t
        self._trainable[name] = trainable
        self._grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def trainable_names(self) -> tuple[str, ...]:
        return tuple(n for n, t in self._trainable.items() if t)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def value(self, name: str) -> Array:
        return self._params[name].data

    def set_value(self, name: str, values) -> None:
        t = self._params[name]
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if arr.shape != t.data.shape:
            raise ValueError(
                f"set_value: shape {arr.shape} does not match parameter "
                f"{name!r} of shape {t.data.shape}"
            )
        t.data = arr

    def grad(self, name: str) -> Array:
        return self._grads[name]

    @property
    def grads(self) -> dict[str, Array]:
        return dict(self._grads)

    def clear_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def capture_grads(self) -> None:
        for name, t in self._params.items():
            self._grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)

    def view(self, prefix: str) -> dict[str, Tensor]:
        """Sub-map of parameters under ``prefix``, keys shortened."""
        out = {n[len(prefix):]: t for n, t in self._params.items() if n.startswith(prefix)}
        if not out:
            raise KeyError(f"no parameters under prefix {prefix!r}")
        return out

    def state_dict(self) -> dict[str, Array]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: Mapping[str, Array]) -> None:
        for name in self._params:
            if name not in state:
                raise ValueError(f"missing tensor {name!r} in state")
            self.set_value(name, state[name])


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = {id(root)}
    onpath: set[int] = {id(root)}
    stack: list[tuple[Tensor, Iterator[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        pushed = False
        for p in parents:
            pid = id(p)
            if pid in onpath:
                raise ValueError(f"cycle detected in graph at op {p.op!r}")
            if pid not in visited:
                visited.add(pid)
                onpath.add(pid)
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            onpath.discard(id(node))
            stack.pop()
    return order


def backward(loss: Tensor, params: ParamStore | None = None) -> ParamStore | None:
    """Reverse-mode pass from a scalar loss; fills ``params`` gradients.

    Parameters not reachable from ``loss`` receive zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if params is not None:
        params.clear_grads()
    order = _toposort(loss)
    for node in order:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
    if params is not None:
        params.capture_grads()
    return params
