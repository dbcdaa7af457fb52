"""Tape-based reverse-mode automatic differentiation over numpy arrays.

The graph is built eagerly: each op returns a Tensor that remembers its
parent Tensors and a closure routing the output gradient into them.
``backward()`` walks the tape in reverse topological order.  Training and
inference share a single forward code path; recording is suspended inside
``no_grad()`` blocks, and the float32/float64 distinction is purely the
dtype of the arrays flowing through (64-bit mode is used for gradient
checking, not as a separate implementation).
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch, GraphNotRecorded, NonFiniteValue

_GRAD_ENABLED = True
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every op.

    Costs a full pass over every result, so it is off by default; the
    trainer still guards the loss value and all gradients each step.
    """
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that suspends graph recording."""

    __slots__ = ("_prev",)

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc) -> bool:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values produced by {op}")
    return data


class Tensor:
    """N-d array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._bwd is None and not self._parents:
            raise GraphNotRecorded(
                "no forward tape recorded for this value "
                "(built under no_grad or from constants only)"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent._bwd is not None or parent._parents:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


class Parameter:
    """Named, optionally trainable Tensor."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(value, requires_grad=trainable)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, arr: np.ndarray) -> None:
        if arr.shape != self.tensor.data.shape:
            raise DimensionMismatch(
                f"parameter {self.name}: expected shape {self.tensor.data.shape}, "
                f"got {arr.shape}"
            )
        self.tensor.data = np.asarray(arr, dtype=self.tensor.data.dtype)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    out = Tensor(_checked(data, op))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    data = np.where(keep, x.data, 0)

    def bwd(g):
        _accum(x, g * keep)

    return _make(data, (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument never overflows; both branches share it
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    s = s.astype(x.data.dtype, copy=False)

    def bwd(g):
        _accum(x, g * (s * (1.0 - s)))

    return _make(s, (x,), bwd, "sigmoid")


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(data, (x,), bwd, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _accum(x, g * inside)

    return _make(data, (x,), bwd, "clamp")


def matmul_last(x: Tensor, w: Tensor) -> Tensor:
    """y[..., o] = sum_i x[..., i] * w[i, o]."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise DimensionMismatch(
            f"matmul_last: x{x.data.shape} incompatible with w{w.data.shape}"
        )
    data = x.data @ w.data
    din, dout = w.data.shape

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.reshape(-1, din).T @ g.reshape(-1, dout))

    return _make(data, (x, w), bwd, "matmul_last")


def sum_last(x: Tensor) -> Tensor:
    data = x.data.sum(axis=-1)

    def bwd(g):
        _accum(x, np.broadcast_to(g[..., None], x.data.shape))

    return _make(data, (x,), bwd, "sum_last")


def mean_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.data.size

    def bwd(g):
        _accum(x, np.full(x.data.shape, float(g) / n, dtype=x.data.dtype))

    return _make(data, (x,), bwd, "mean_all")


def concat_last(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionMismatch("concat_last: no inputs")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., off : off + w])
            off += w

    return _make(data, tuple(parts), bwd, "concat_last")


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[b, k] = x[b, idx[b, k], k] for x of shape [B, T, K]."""
    if x.data.ndim != 3 or idx.shape != (x.data.shape[0], x.data.shape[2]):
        raise DimensionMismatch(
            f"gather_time: x{x.data.shape} incompatible with idx{idx.shape}"
        )
    b, t, k = x.data.shape
    bi = np.arange(b)[:, None]
    ki = np.arange(k)[None, :]
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise DimensionMismatch("gather_time: frame index out of range")
    data = x.data[bi, idx, ki]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (bi, idx, ki), g)
            _accum(x, gx)

    return _make(data, (x,), bwd, "gather_time")


def weighted_time_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """out[b, k] = sum_t x[b, t, k] * weights[b, t, k]; weights are constant."""
    if weights.shape != x.data.shape:
        raise DimensionMismatch(
            f"weighted_time_sum: weights{weights.shape} != x{x.data.shape}"
        )
    w = np.asarray(weights, dtype=x.data.dtype)
    data = (x.data * w).sum(axis=1)

    def bwd(g):
        _accum(x, g[:, None, :] * w)

    return _make(data, (x,), bwd, "weighted_time_sum")
