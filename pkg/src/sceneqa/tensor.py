"""Dense tensors with reverse-mode differentiation.

Every value is a numpy array; every differentiable operation records its
inputs and a backward rule on the output tensor.  ``Tensor.backward`` walks
the recorded graph in reverse topological order, visiting each node once.

Precision is a process-wide setting (``set_precision`` / ``precision``):
float64 for gradient checks, float32 for training.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericalError",
    "ShapeError",
    "get_dtype",
    "set_precision",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "slice_rows",
    "transpose",
    "swapaxes",
    "reshape",
    "take",
    "softmax_rows",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "layer_norm",
    "gelu",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "absolute",
    "embedding",
    "max_reduce",
]


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


# "extended" (x87 80-bit where available) only serves as a finite-difference oracle
_DTYPES = {"float64": np.float64, "float32": np.float32, "extended": np.longdouble}
_state = {"dtype": np.float64, "grad": True}


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    prev = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{op} produced {bad} non-finite value(s) in output of shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------ graph plumbing
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], op: str,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        _check_finite(op, data)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _topo_order(self) -> list[Tensor]:
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(_as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), "add",
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), "mul",
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * a.data.dtype.type(c), (a,), "scale", lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    return Tensor._make(ad ** p, (a,), "pow", lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return Tensor._make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(ad)
    return Tensor._make(out, (a,), "log", lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return Tensor._make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    return Tensor._make(out, (a,), "softplus", lambda g: (g * _stable_sigmoid(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.maximum(x, 0), (a,), "relu", lambda g: (g * (x > 0),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.abs(x), (a,), "abs", lambda g: (g * np.sign(x),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), "gelu", backward)


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), "sum", backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient flows to the first maximal entry."""
    x = a.data
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, axis=ax)

    def backward(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return Tensor._make(np.squeeze(out, axis=ax), (a,), "max", backward)


# ------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), "matmul", backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes",
                        lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        return swapaxes(a, -1, -2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), "transpose",
                        lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def take(a: Tensor, index) -> Tensor:
    """numpy-style indexing (slices, integer arrays); gradient scatters back."""
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    src_shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), "index", backward)


def slice_rows(a: Tensor, n: int) -> Tensor:
    """Leading ``n`` rows along the second-to-last axis."""
    if not 0 <= n <= a.shape[-2]:
        raise ShapeError(f"slice_rows: {n} rows requested from shape {a.shape}")
    return take(a, (Ellipsis, slice(0, n), slice(None)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                             f"{[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


# ------------------------------------------------------------ normalisations
def _masked_fill(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.  ``mask`` (broadcastable bool) drops entries."""
    x = _masked_fill(a.data, mask)
    m = np.max(x, axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericalError("softmax: a row has every entry masked")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), "softmax", backward)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), "log_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation over the last axis with learnable gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bd.shape)

    return Tensor._make(xhat * gd + bd, (x, gain, bias), "layer_norm", backward)


# ----------------------------------------------------------- lookups & losses
def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")
    wshape, dtype = weight.shape, weight.data.dtype

    def backward(g):
        full = np.zeros(wshape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (full,)

    return Tensor._make(weight.data[ids], (weight,), "embedding", backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Weighted mean over positions of -log softmax(logits)[t, target_t].

    ``logits`` is (..., T, V); ``targets`` and ``mask`` have the leading shape.
    A boolean ``mask`` selects contributing positions; a float mask weights them.
    """
    x = logits.data
    vocab = x.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != x.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {x.shape}")
    weights = np.ones(targets.shape, dtype=x.dtype) if mask is None else np.asarray(mask).astype(x.dtype)
    if weights.shape != targets.shape:
        raise ShapeError(f"cross_entropy: mask {weights.shape} vs targets {targets.shape}")
    live = targets[weights != 0]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        raise IndexError(f"cross_entropy: target index outside [0, {vocab})")
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy: mask selects no positions")
    safe = np.where(weights != 0, targets, 0)
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    logp = x - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / total

    def backward(g):
        probs = np.exp(logp)
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (probs - onehot) * (weights / total)[..., None],)

    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), "cross_entropy", backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
