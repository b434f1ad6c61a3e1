"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape: every op executed while gradients are enabled records its
parents and a backward closure on the produced tensor. ``backward(loss)``
replays the recorded nodes in reverse execution order (monotone creation
ids double as a topological order). Detached tensors have no parents, so
gradients can never flow past them.

Everything is float64; speed is irrelevant at desk scale and the
finite-difference checks need the precision.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "as_tensor", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "bmm", "reshape",
    "transpose", "concat", "stack", "take", "tsum", "tmean", "relu",
    "tabs", "texp", "tlog", "tsqrt", "ttanh", "tcos", "tsin",
    "softmax", "log_softmax", "layer_norm",
    "Module", "Linear",
]

_ids = itertools.count()
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class no_grad:
    """Context manager that disables tape recording inside its scope.

    The flag is thread-local, so read-only evaluation may run in parallel
    worker threads without disturbing recording elsewhere.
    """

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph surgery -----------------------------------------------------
    def detach(self) -> "Tensor":
        """A view of the same values with no history; gradients stop here."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._id = next(_ids)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar --------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    rg = False
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                rg = True
                break
    if rg:
        t.requires_grad = True
        t._parents = tuple(p for p in parents if p.requires_grad)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    t._id = next(_ids)
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (size-1) tensor. Nodes are visited exactly once,
    in reverse execution order; tensors not on a path from the loss keep
    ``grad is None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    if loss.grad is not None:
        loss.grad += np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------

def _broadcast_forward(op: str, a: Tensor, b: Tensor, fn):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_forward("add", a, b, np.add)
    if a.data.shape == out.shape == b.data.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    else:
        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_forward("sub", a, b, np.subtract)
    if a.data.shape == out.shape == b.data.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, -g)
    else:
        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_forward("mul", a, b, np.multiply)
    if a.data.shape == out.shape == b.data.shape:
        def bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
    else:
        def bw(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_forward("div", a, b, np.divide)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, (a,), bw)


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw)


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bw)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        _accum(a, g / (2.0 * out))

    return _make(out, (a,), bw)


def ttanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def tcos(a: Tensor) -> Tensor:
    out = np.cos(a.data)

    def bw(g):
        _accum(a, -g * np.sin(a.data))

    return _make(out, (a,), bw)


def tsin(a: Tensor) -> Tensor:
    out = np.sin(a.data)

    def bw(g):
        _accum(a, g * np.cos(a.data))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# contraction / structural primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands with numpy promotion semantics."""
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    if A.shape[-1] != (B.shape[0] if B.ndim >= 1 else None):
        raise ShapeError("matmul", a.shape, b.shape)
    out = A @ B

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            _accum(a, g @ B.T)
            _accum(b, A.T @ g)
        elif A.ndim == 1 and B.ndim == 2:
            _accum(a, g @ B.T)
            _accum(b, np.outer(A, g))
        elif A.ndim == 2 and B.ndim == 1:
            _accum(a, np.outer(g, B))
            _accum(b, A.T @ g)
        else:  # 1-D @ 1-D -> scalar
            _accum(a, g * B)
            _accum(b, g * A)

    return _make(out, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (n, i, j) @ (n, j, k) -> (n, i, k)."""
    A, B = a.data, b.data
    if A.ndim != 3 or B.ndim != 3 or A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    out = A @ B

    def bw(g):
        _accum(a, g @ B.transpose(0, 2, 1))
        _accum(b, A.transpose(0, 2, 1) @ g)

    return _make(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(ts), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None

    def bw(g):
        parts = np.split(g, len(ts), axis=axis)
        for t, p in zip(ts, parts):
            _accum(t, p.reshape(t.data.shape))

    return _make(out, tuple(ts), bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(np.array(out, copy=True), (a,), bw)


def _scatter_rows(n_rows: int, indices: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum rows of g into an (n_rows, ...) array at the given indices."""
    cols = int(np.prod(g.shape[1:])) if g.ndim > 1 else 1
    flat = np.bincount(
        (indices[:, None] * cols + np.arange(cols)).ravel() if g.ndim > 1 else indices,
        weights=g.ravel(), minlength=n_rows * cols)
    return flat.reshape((n_rows,) + g.shape[1:])


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis with a constant integer index array.

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        if axis == 0:
            _accum(a, _scatter_rows(a.data.shape[0], indices,
                                    np.ascontiguousarray(g)))
        else:
            moved = _scatter_rows(a.data.shape[axis], indices,
                                  np.ascontiguousarray(np.moveaxis(g, axis, 0)))
            _accum(a, np.moveaxis(moved, 0, axis))

    return _make(out, (a,), bw)


def _expand_reduced(g: np.ndarray, src_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    gg = np.asarray(g)
    if axis is None:
        gg = gg.reshape((1,) * len(src_shape))
    elif not keepdims:
        gg = np.expand_dims(gg, axis)
    return np.broadcast_to(gg, src_shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _make(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]

    def bw(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims) / n)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalization primitives
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        soft = np.exp(out)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance (population variance) along axis."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - out * gy))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container with automatic attribute registration.

    Assigning a requires_grad Tensor registers a parameter; assigning a
    Module (or a list of Modules) registers children. ``named_parameters``
    walks the tree in construction order, which fixes checkpoint layout.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._modules[name] = list(value)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._modules.items():
            if isinstance(child, list):
                for i, sub in enumerate(child):
                    yield from sub.named_parameters(f"{prefix}{name}.{i}.")
            else:
                yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"load_state[{name}]", p.data.shape, arr.shape)
            p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map y = x @ W.T + b for 1-D or 2-D inputs."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((n_out, n_in))
        else:
            w = xavier_uniform(rng, n_in, n_out, (n_out, n_in))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, transpose(self.weight))
        if self.bias is not None:
            out = add(out, self.bias)
        return out
