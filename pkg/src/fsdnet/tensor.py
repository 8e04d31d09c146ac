"""Dense float64 arrays with reverse-mode automatic differentiation.

The graph is a flat tape: every differentiable op appends one node in
execution order, so parents always precede consumers and the backward
sweep is a single reversed pass over the node list.  Tapes nest per
thread; ops record onto the innermost active tape, and with no active
tape they are plain numpy computations.  Tensors are treated as
immutable once created (updates build fresh tensors).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

Array = np.ndarray

_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array; set requires_grad to receive gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def clamp_min(self, lo: float) -> "Tensor":
        return clamp_min(self, lo)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of operations; confined to one thread.

    Used as a context manager::

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss)
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._on_tape: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted: tapes must nest")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._on_tape

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append(_Node(out, parents, vjp))
        self._on_tape.add(id(out))
        for p in parents:
            if p.requires_grad and id(p) not in self._on_tape:
                self._leaves[id(p)] = p

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        """Gradients of a scalar loss for every requires_grad leaf seen on tape."""
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not self.tracks(p):
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        result: dict[Tensor, Array] = {}
        for tid, leaf in self._leaves.items():
            g = grads.get(tid)
            result[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g)
        return result


def record_op(out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Attach a custom differentiable op to the active tape.

    ``vjp(grad_out)`` must return one array (or None) per parent, shaped
    like that parent's data.  No-op when no tape is active or no parent
    is tracked.
    """
    tape = _active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(out, tuple(parents), vjp)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return record_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return record_op(out, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda g: (g.reshape(a.data.shape),))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = Tensor(np.sum(a.data, axis=axes or None, keepdims=keepdims))
    in_shape = a.data.shape

    def vjp(g):
        gk = g if keepdims or not in_shape else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, in_shape).copy(),)

    return record_op(out, (a,), vjp)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = Tensor(np.mean(a.data, axis=axes or None, keepdims=keepdims))
    in_shape = a.data.shape

    def vjp(g):
        gk = g if keepdims or not in_shape else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, in_shape).copy(),)

    return record_op(out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return record_op(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return record_op(out, (a,), lambda g: (g / a.data,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, lo))
    mask = a.data >= lo

    def vjp(g):
        return (g * mask,)

    return record_op(out, (a,), vjp)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp along one axis; gradient is the softmax of the input."""
    a = as_tensor(a)
    nd = a.ndim
    if not -nd <= axis < nd:
        raise DimensionError(
            f"logsumexp: axis {axis} out of range for shape {a.shape}"
        )
    ax = axis % nd
    if a.data.shape[ax] == 0:
        raise DimensionError(f"logsumexp: empty axis {axis} in shape {a.shape}")
    m = np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=ax, keepdims=True)
    full = m + np.log(s)
    out = Tensor(full if keepdims else np.squeeze(full, axis=ax))
    soft = e / s

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * soft,)

    return record_op(out, (a,), vjp)


def conv2d(x, f, stride: int = 1, pad: str = "valid", pad_value: float = 0.0) -> Tensor:
    """Cross-correlate filters ``f[V,R,S,C]`` over ``x[H,W,C]``.

    A leading batch axis on ``x`` is accepted and preserved.  "same"
    padding adds floor((R-1)/2) rows and floor((S-1)/2) columns on each
    side, filled with ``pad_value``.
    """
    x, f = as_tensor(x), as_tensor(f)
    if x.ndim == 3:
        batched = False
        xd = x.data[None]
    elif x.ndim == 4:
        batched = True
        xd = x.data
    else:
        raise DimensionError(f"conv2d: input must be HWC or NHWC, got shape {x.shape}")
    if f.ndim != 4:
        raise DimensionError(f"conv2d: filters must be VRSC, got shape {f.shape}")
    v_count, kr, ks, kc = f.shape
    n, h, w, c = xd.shape
    if kc != c:
        raise DimensionError(
            f"conv2d: channel mismatch between input {x.shape} and filters {f.shape}"
        )
    if not isinstance(stride, int) or stride < 1:
        raise ContractError(f"conv2d: stride must be a positive int, got {stride!r}")
    if pad == "same":
        pt, pl = (kr - 1) // 2, (ks - 1) // 2
    elif pad == "valid":
        pt = pl = 0
    else:
        raise ContractError(f"conv2d: pad must be 'same' or 'valid', got {pad!r}")
    if pt or pl:
        xp = np.pad(
            xd, ((0, 0), (pt, pt), (pl, pl), (0, 0)),
            constant_values=float(pad_value),
        )
    else:
        xp = xd
    hp, wp = xp.shape[1:3]
    if kr > hp or ks > wp:
        raise DimensionError(
            f"conv2d: kernel {kr}x{ks} larger than padded input {hp}x{wp}"
        )
    oh = (hp - kr) // stride + 1
    ow = (wp - ks) // stride + 1
    win = sliding_window_view(xp, (kr, ks), axis=(1, 2))[:, ::stride, ::stride]
    out_d = np.einsum("nhwcrs,vrsc->nhwv", win, f.data, optimize=True)
    out = Tensor(out_d if batched else out_d[0])

    def vjp(g):
        gb = g if batched else g[None]
        df = np.einsum("nhwcrs,nhwv->vrsc", win, gb, optimize=True)
        dxp = np.zeros_like(xp)
        for r in range(kr):
            hs = slice(r, r + stride * oh, stride)
            for s in range(ks):
                ws = slice(s, s + stride * ow, stride)
                dxp[:, hs, ws, :] += np.einsum(
                    "nhwv,vc->nhwc", gb, f.data[:, r, s, :], optimize=True
                )
        dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return (dx if batched else dx[0]), df

    return record_op(out, (x, f), vjp)


def extract_windows(x, window: tuple[int, int], stride: int = 1) -> Tensor:
    """Gather pooling windows: ``(H,W,C) -> (H',W',r*s,C)``, valid placement only.

    A leading batch axis is accepted and preserved.
    """
    x = as_tensor(x)
    r, s = window
    if x.ndim == 3:
        batched = False
        xd = x.data[None]
    elif x.ndim == 4:
        batched = True
        xd = x.data
    else:
        raise DimensionError(
            f"extract_windows: input must be HWC or NHWC, got shape {x.shape}"
        )
    n, h, w, c = xd.shape
    if r < 1 or s < 1 or not isinstance(stride, int) or stride < 1:
        raise ContractError(
            f"extract_windows: window and stride must be positive, got {window}, {stride}"
        )
    if r > h or s > w:
        raise DimensionError(
            f"extract_windows: window {r}x{s} exceeds input {h}x{w}"
        )
    oh = (h - r) // stride + 1
    ow = (w - s) // stride + 1
    win = sliding_window_view(xd, (r, s), axis=(1, 2))[:, ::stride, ::stride]
    out_d = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n, oh, ow, r * s, c
    )
    out = Tensor(out_d if batched else out_d[0])

    def vjp(g):
        gb = (g if batched else g[None]).reshape(n, oh, ow, r, s, c)
        dx = np.zeros((n, h, w, c))
        for i in range(r):
            hs = slice(i, i + stride * oh, stride)
            for j in range(s):
                ws = slice(j, j + stride * ow, stride)
                dx[:, hs, ws, :] += gb[:, :, :, i, j, :]
        return (dx if batched else dx[0],)

    return record_op(out, (x,), vjp)
