"""Dense tensors with tape-based reverse-mode differentiation.

Every op executed while a :class:`Tape` is active is appended to it together
with a closure computing the vector-Jacobian product.  ``backward`` walks the
tape in exact reverse order.  Outside a tape ops are plain numpy calls, which
is what inference (beam search, validation) uses.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Parameter", "ShapeError", "TapeError",
    "add", "sub", "mul", "matmul", "tanh", "sigmoid", "exp", "log",
    "concat", "stack", "reshape", "transpose", "sum", "mean",
    "softmax", "log_softmax", "embedding", "gather_time", "dropout",
    "nll", "backward", "init", "get_precision", "set_precision", "precision",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("S2S_PRECISION", "f32")
if _precision not in _DTYPES:
    raise ValueError(f"S2S_PRECISION must be one of {sorted(_DTYPES)}, got {_precision!r}")

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of the computation record (no tape, non-scalar loss...)."""


def get_precision() -> str:
    return _precision


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision = name


@contextlib.contextmanager
def precision(name: str):
    old = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def default_dtype():
    return _DTYPES[_precision]


class Tensor:
    """An n-dimensional array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.size == 0:
            raise ShapeError("tensors must have every dimension >= 1")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self.shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _scalar_error(shape):
    raise TapeError(f"item() needs a single-element tensor, got shape {shape}")


class Tape:
    """Ordered computation record.

    Entries are ``(parents, vjp)``; the entry index is the node id of the
    op's output.  A leaf entry has ``vjp is None`` and ``parents`` holds the
    leaf tensor itself.
    """

    def __init__(self):
        self.entries: list = []
        self.outputs: list[Tensor] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        for t in self.outputs:
            t.node = None
            t.tape = None
        self.entries = []
        self.outputs = []

    def _track(self, t: Tensor | None) -> Tensor | None:
        if t is None:
            return None
        if t.tape is self:
            return t
        if not t.requires_grad:
            return None
        t.node = len(self.entries)
        t.tape = self
        self.entries.append((t, None))
        self.outputs.append(t)
        return t

    def record(self, out: np.ndarray, parents: Sequence, vjp: Callable) -> Tensor:
        tracked = tuple(self._track(p) if isinstance(p, Tensor) else None for p in parents)
        result = Tensor._wrap(out)
        if any(p is not None for p in tracked):
            result.node = len(self.entries)
            result.tape = self
            self.entries.append((tracked, vjp))
            self.outputs.append(result)
        return result

    def backward(self, loss: Tensor, params: Iterable["Parameter"] | None = None) -> dict:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = list(params) if params is not None else None
        if loss.tape is not self:
            if params is None:
                raise TapeError("loss is not recorded on this tape")
            self.clear()
            return {p.name: np.zeros_like(p.value.data) for p in params}

        grads: list = [None] * len(self.entries)
        grads[loss.node] = np.ones_like(loss.data)
        leaf_grads = {}
        for i in range(loss.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            grads[i] = None
            parents, vjp = self.entries[i]
            if vjp is None:
                leaf_grads[id(parents)] = (parents, g)
                continue
            for p, gp in zip(parents, vjp(g)):
                if p is None or gp is None:
                    continue
                j = p.node
                grads[j] = gp if grads[j] is None else grads[j] + gp
        self.clear()

        out = {}
        for leaf, g in leaf_grads.values():
            if leaf.name is None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g
            elif params is None:
                out[leaf.name] = g
        if params is None:
            return out
        for p in params:
            entry = leaf_grads.get(id(p.value))
            g = np.zeros_like(p.value.data) if entry is None else entry[1]
            p.grad = g if p.grad is None else p.grad + g
            out[p.name] = g
        return out


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class Parameter:
    """A named trainable tensor plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = Tensor(data, requires_grad=True, name=name)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr: np.ndarray) -> None:
        self.value.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# op plumbing


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=default_dtype())


def _op(out: np.ndarray, parents: Sequence, vjp: Callable) -> Tensor:
    tape = getattr(_local, "tape", None)
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(out, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible "
                         "(trailing dimensions must match or be 1)") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        _broadcast_shape(x.shape, y.shape)
    sx, sy = x.shape, y.shape
    return _op(x + y, (a, b), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)))


def sub(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        _broadcast_shape(x.shape, y.shape)
    sx, sy = x.shape, y.shape
    return _op(x - y, (a, b), lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy)))


def mul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        _broadcast_shape(x.shape, y.shape)
    return _op(x * y, (a, b),
               lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def tanh(a) -> Tensor:
    y = np.tanh(_data(a))
    return _op(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    x = _data(a)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _op(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    y = np.exp(_data(a))
    return _op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    x = _data(a)
    return _op(np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading dims like ``np.matmul``."""
    x, y = _data(a), _data(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
    out = x @ y

    def vjp(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _op(out, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    arrs = [_data(t) for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[a.shape for a in arrs]}: {e}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrs])[:-1]
    return _op(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    arrs = [_data(t) for t in tensors]
    try:
        out = np.stack(arrs, axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot stack shapes {[a.shape for a in arrs]}: {e}") from None
    n = len(arrs)
    return _op(out, tuple(tensors),
               lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def _getitem(a: Tensor, index) -> Tensor:
    x = a.data
    out = x[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    items = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)

    def vjp(g):
        full = np.zeros_like(x)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _op(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    x = _data(a)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _op(out, (a,), lambda g: (g.reshape(x.shape),))


def transpose(a, axes=None) -> Tensor:
    x = _data(a)
    out = np.transpose(x, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _op(out, (a,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# reductions and normalizers


def sum(a, axis=None) -> Tensor:  # noqa: A001
    x = _data(a)
    out = np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _op(out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    x = _data(a)
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / n)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked-out positions (mask == 0) get weight 0."""
    x = _data(a)
    if mask is not None:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not valid.any(axis=axis).all():
            raise ValueError("softmax: every position along the axis is masked")
        x = np.where(valid, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _op(y, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _data(a)
    s = x - x.max(axis=axis, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _op(out, (a,), vjp)


def nll(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is [N, V]; ``weights`` (e.g. a padding mask) scales each row.
    """
    x = _data(logits)
    targets = np.asarray(targets)
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ShapeError(f"nll expects logits [N, V] and targets [N], got {x.shape}, {targets.shape}")
    w = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    s = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=1))
    rows = np.arange(x.shape[0])
    out = np.asarray((w * (lse - s[rows, targets])).sum(), dtype=x.dtype)

    def vjp(g):
        p = np.exp(s - lse[:, None])
        p[rows, targets] -= 1.0
        return ((g * w)[:, None] * p,)

    return _op(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# indexing helpers used by the sequence model


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back with accumulation."""
    w = _data(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {w.shape[0]}")

    def vjp(g):
        full = np.zeros_like(w)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (full,)

    return _op(w[ids], (table,), vjp)


def gather_time(a, index: np.ndarray) -> Tensor:
    """For time-major ``a`` [T, B, ...], return ``a[index[t, b], b]``."""
    x = _data(a)
    index = np.asarray(index)
    cols = np.broadcast_to(np.arange(x.shape[1]), index.shape)

    def vjp(g):
        full = np.zeros_like(x)
        np.add.at(full, (index, cols), g)
        return (full,)

    return _op(x[index, cols], (a,), vjp)


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a if isinstance(a, Tensor) else Tensor(a)
    x = _data(a)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return mul(a, keep)


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict:
    """Back-propagate from a scalar ``loss`` through its tape.

    Returns ``{name: gradient}``; when ``params`` is given every listed
    parameter appears, with zeros for those the loss does not reach.  The
    tape is cleared afterwards.
    """
    tape = loss.tape if isinstance(loss, Tensor) else None
    if tape is None:
        tape = active_tape()
        if tape is None:
            raise TapeError("backward called without an active computation record")
    return tape.backward(loss, params)


def init(shape, scheme: str, rng: np.random.Generator | None = None,
         scale: float = 0.04, value: float = 0.0, dtype=None) -> np.ndarray:
    """Deterministic parameter initializer: ``uniform``, ``zeros`` or ``constant``."""
    dtype = dtype or default_dtype()
    shape = tuple(shape)
    if scheme == "uniform":
        if scale <= 0:
            raise ValueError("uniform init needs scale > 0")
        return rng.uniform(-scale, scale, size=shape).astype(dtype)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "constant":
        return np.full(shape, value, dtype=dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


def numerical_gradient(fn: Callable[[], Tensor], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (edited in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` must build its graph from ``tensors`` (which need
    ``requires_grad``) and return a scalar.  Returns the worst relative error.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
        named = tape.backward(loss)
    analytic = []
    for t in tensors:
        g = named.get(t.name) if t.name is not None else t.grad
        analytic.append(np.zeros_like(t.data) if g is None else g.copy())
    worst = 0.0
    for t, a in zip(tensors, analytic):
        t.grad = None
        num = numerical_gradient(fn, t.data, eps)
        worst = max(worst, relative_error(a, num))
    return worst
