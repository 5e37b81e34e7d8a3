# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
A small dense tensor type backed by NumPy with reverse-mode differentiation.

Operations only build a graph while a :class:`GradTape` is active on the
current thread::

    with GradTape() as tape:
        loss = (w * x).sum()
    (grad_w,) = tape.gradient(loss, [w])

Outside a tape every operation is a plain NumPy computation, which keeps
inference paths cheap and makes concurrent read-only use safe.
"""
from __future__ import annotations

import logging
import math
import threading
import typing as t

import numpy as np

from skimread.errors import InvalidInputError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_local = threading.local()

Backward = t.Callable[[np.ndarray], t.Sequence["np.ndarray | None"]]
ArrayLike = t.Union["Tensor", np.ndarray, float, int, t.Sequence[t.Any]]


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def tape_active() -> bool:
    """Whether operations on this thread are currently being recorded."""
    return _current_tape() is not None


class Tensor:
    """A float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data: t.Any, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __len__(self) -> int:
        return self.shape[0]

    def __float__(self) -> float:
        return float(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return div(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> Tensor:
        return matmul(as_tensor(other), self)

    def __getitem__(self, index: t.Any) -> Tensor:
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: t.Any) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


class GradTape:
    """Ordered record of the primitive operations applied to tracked tensors."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: t.Any) -> None:
        _tape_stack().remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def gradient(self, target: Tensor, sources: t.Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``target`` with respect to each source.

        Sources that the target does not depend on get a zero gradient.
        """
        if target.size != 1:
            raise InvalidInputError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None or node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        return [grads.get(id(src), np.zeros_like(src.data)) for src in sources]


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if b.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: t.Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: t.Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index: t.Any) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), backward)


def take(table: Tensor, ids: t.Sequence[int]) -> Tensor:
    """Row lookup, ``table[ids]``; the backward pass scatters into the table."""
    index = np.asarray(ids, dtype=np.intp)
    return getitem(table, index)


def concat(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(x) for x in tensors]
    sizes = [x.shape[axis] for x in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _result(np.concatenate([x.data for x in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(x) for x in tensors]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _result(np.stack([x.data for x in tensors], axis=axis), tuple(tensors), backward)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) / float(count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise select; ``condition`` is a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _result(np.where(cond, a.data, b.data), (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _result(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    width = x.shape[-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_gain = _unbroadcast(g * xhat, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = (
            inv_std
            / width
            * (
                width * gx_hat
                - gx_hat.sum(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        return gx, g_gain, g_bias

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def softmax(logits: ArrayLike, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax, stabilised by subtracting the running maximum."""
    if not temperature > 0:
        raise InvalidInputError("invalid temperature")
    logits = as_tensor(logits)
    if logits.size == 0:
        raise InvalidInputError("empty sequence")
    scaled = logits.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return _result(out, (logits,), backward)


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), backward)


def mean_pool(rows: Tensor) -> Tensor:
    """Average an ``[L x d]`` block of rows into a single ``[d]`` vector."""
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InvalidInputError("empty sequence")
    return mean(rows, axis=0)


def norm(v: Tensor) -> Tensor:
    return sqrt((v * v).sum())


def cosine(u: Tensor, v: Tensor) -> Tensor:
    if not np.any(u.data) or not np.any(v.data):
        raise InvalidInputError("degenerate vector")
    return (u * v).sum() / (norm(u) * norm(v))


def cosine_rows(rows: Tensor, v: Tensor, fallback: float = -1.0) -> Tensor:
    """Cosine of every row of ``rows`` against ``v``.

    Zero rows score ``fallback`` instead of failing; ``v`` must be nonzero.
    """
    if not np.any(v.data):
        raise InvalidInputError("degenerate vector")
    squared = (rows * rows).sum(axis=1)
    live = squared.data > 0
    safe = where(live, squared, 1.0)
    cos = (rows @ v) / (sqrt(safe) * norm(v))
    return where(live, cos, fallback)


def grad_check(
    loss_fn: t.Callable[[], Tensor],
    params: t.Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int = 256,
    seed: int = 0,
    floor: float = 1e-8,
    rows: t.Sequence[t.Sequence[int] | None] | None = None,
) -> float:
    """Compare tape gradients of ``loss_fn`` with central finite differences.

    At most ``max_coords`` coordinates per parameter are probed, chosen by a
    seeded generator. ``rows`` optionally limits a 2-D parameter to the
    given row indices, one entry per parameter (``None`` probes all of it).
    Each probed coordinate scores ``|g - g_fd| / max(|g|, |g_fd|, floor)``
    and the largest score over all parameters is returned.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise InvalidInputError("eps must lie in [1e-6, 1e-3]")
    with GradTape() as tape:
        loss = loss_fn()
    analytic = tape.gradient(loss, params)

    if rows is not None and len(rows) != len(params):
        raise InvalidInputError("rows must give one entry per parameter")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j, (param, grad) in enumerate(zip(params, analytic)):
        flat = param.data.reshape(-1)
        coords = np.arange(flat.size)
        if rows is not None and rows[j] is not None:
            if param.ndim != 2:
                raise InvalidInputError("row selection needs a 2-D parameter")
            width = param.shape[1]
            picked = np.unique(np.asarray(rows[j], dtype=np.intp))
            coords = (picked[:, None] * width + np.arange(width)).reshape(-1)
        if coords.size > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        grad_flat = grad.reshape(-1)
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + eps
            plus = float(loss_fn().data)
            flat[i] = original - eps
            minus = float(loss_fn().data)
            flat[i] = original
            numeric[n] = (plus - minus) / (2 * eps)
        exact = grad_flat[coords]
        scale = np.maximum(np.maximum(np.abs(exact), np.abs(numeric)), floor)
        if len(coords):
            worst = max(worst, float(np.max(np.abs(exact - numeric) / scale)))
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
