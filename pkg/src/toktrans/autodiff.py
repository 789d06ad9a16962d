"""Dense tensors with tape-based reverse-mode differentiation.

Every operation builds a ``Node`` holding its parents and a backward rule.
``Tape.record(output)`` linearises the graph into topological order and
``backward`` walks it once in reverse. Custom operators (sparsemax, Dykstra)
plug in through ``register_custom_op``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward value."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_check_finite(flag: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def _check(arr: np.ndarray, where: str) -> np.ndarray:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {where}")
    return arr


class Node:
    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents: tuple, backward: Callable, name: str):
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """An immutable dense array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = _check(arr, name or "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tape:
    """Topologically ordered record of the operations reachable from an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in reversed(t._node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {}
        if grad is None:
            if output.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(output.data)
        grads[id(output)] = np.asarray(grad, dtype=output.data.dtype)
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ValueError(
                        f"backward of {t._node.name} returned gradient of shape {pg.shape} "
                        f"for input of shape {p.shape}"
                    )
                _check(pg, f"backward of {t._node.name}")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def backward(output: Tensor, grad: np.ndarray | None = None) -> Tape:
    """Accumulate d(output)/d(leaf) into every leaf's ``.grad``."""
    tape = Tape.record(output)
    tape.backward(output, grad)
    return tape


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional gradient: clears and returns the ``.grad`` of ``inputs``."""
    for x in inputs:
        x.grad = None
    backward(output)
    return [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]


def register_custom_op(
    forward: Callable[..., tuple[np.ndarray, object]],
    backward: Callable[[object, np.ndarray], Sequence[np.ndarray | None]],
    name: str = "custom",
) -> Callable[..., Tensor]:
    """Wrap a numpy forward/backward pair as a differentiable operator.

    ``forward(*arrays, **kw)`` returns ``(output, ctx)``; ``backward(ctx, g)``
    returns one gradient per tensor input (or None).
    """

    def op(*inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        out, ctx = forward(*[t.data for t in tensors], **kwargs)

        def _bw(g):
            gs = backward(ctx, g)
            if len(gs) != len(tensors):
                raise ValueError(f"{name} backward returned {len(gs)} gradients for {len(tensors)} inputs")
            return gs

        return _make(np.asarray(out), tensors, _bw, name)

    op.__name__ = name
    return op


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def hadamard_broadcast_last(a, v) -> Tensor:
    """``out[..., j] = a[..., j] * v[j]``."""
    a, v = as_tensor(a), as_tensor(v)
    if v.ndim != 1 or v.shape[0] != a.shape[-1]:
        raise ValueError(f"vector of length {v.shape} does not match last dimension {a.shape[-1]}")
    axes = tuple(range(a.ndim - 1))
    return _make(a.data * v.data, (a, v),
                 lambda g: (g * v.data, (g * a.data).sum(axis=axes)), "hadamard_broadcast_last")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), _bw, "gelu")


# ---------------------------------------------------------------- shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), _bw, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def _bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), _bw, "take_rows")


# ---------------------------------------------------------------- nn pieces

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    axes = tuple(range(x.ndim - 1))

    def _bw(g):
        gx_hat = g * gain.data
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gain, bias), _bw, "layer_norm")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over positions of ``-log softmax(logits)[target]`` in nats."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of size {v}")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.shape[0])
    loss = np.mean(lse - z[rows, t])

    def _bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / t.shape[0]) * p).reshape(logits.shape),

    return _make(np.asarray(loss), (logits,), _bw, "softmax_cross_entropy")
