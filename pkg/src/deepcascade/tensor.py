"""Dense real tensors with a small reverse-mode differentiation engine.

Only the operations the reconstruction network needs are provided: same-padded
3D cross-correlation, ReLU, addition, channel slicing and concatenation,
reductions and the mean-squared loss. Layers with bespoke adjoints (k-space data
consistency, data sharing) register themselves through :func:`apply_op`.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        y = conv(x, w, b)
        loss = mse_loss(y, target)
    grads = tape.backward(loss)
    grads[w.id]
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "apply_op",
    "conv",
    "relu",
    "add",
    "tsum",
    "take_channels",
    "concat",
    "mse_loss",
]

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    """Immutable n-d array of real scalars.

    Parameters
    ----------
    data : array_like
        Values. Copied unless already a read-only float array.
    requires_grad : bool
        Whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: int
    vjp: Callable


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: Callable) -> None:
        self.nodes.append(_Node(op, tuple(t.id for t in inputs), output.id, vjp))

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(.) through the recorded nodes in reverse order.

        Returns the gradient map ``tensor id -> ndarray``. Leaves that are not
        reachable from ``loss`` have no entry.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for tid, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                if tid in grads:
                    grads[tid] = grads[tid] + gi
                else:
                    grads[tid] = gi
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        return self.gradients.get(t.id)


def _active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record ``vjp`` if any input needs gradients.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, result, vjp)
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, ksize: tuple) -> np.ndarray:
    """Columns of the zero-padded input, shape (b, kx*ky*kt*ci, X*Y*T)."""
    b, ci, X, Y, T = x.shape
    kx, ky, kt = ksize
    xp = np.pad(x, [(0, 0), (0, 0), (kx // 2,) * 2, (ky // 2,) * 2, (kt // 2,) * 2])
    cols = np.empty((b, kx, ky, kt, ci, X, Y, T), dtype=x.dtype)
    for i in range(kx):
        for j in range(ky):
            for k in range(kt):
                cols[:, i, j, k] = xp[:, :, i : i + X, j : j + Y, k : k + T]
    return cols.reshape(b, kx * ky * kt * ci, X * Y * T)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # column order must match _im2col: (kx, ky, kt, ci)
    return w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)


def _xcorr(x: np.ndarray, w: np.ndarray, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Same-padded cross-correlation, x: (b, ci, X, Y, T), w: (co, ci, kx, ky, kt)."""
    if cols is None:
        cols = _im2col(x, w.shape[2:])
    out = np.matmul(_kernel_matrix(w), cols)
    return out.reshape((x.shape[0], w.shape[0]) + x.shape[2:])


def conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """3D cross-correlation with zero "same" padding plus per-channel bias.

    Shapes: ``x`` (batch, c_in, X, Y, T), ``w`` (c_out, c_in, kx, ky, kt) with odd
    kernel sizes, ``b`` (c_out,). A 2D convolution is the case ``kt == 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv expects 5-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv: input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ShapeError(f"conv: kernel spatial dims must be odd, got {w.shape[2:]}")
    inputs = [x, w]
    cols = _im2col(x.data, w.shape[2:])
    out = _xcorr(x.data, w.data, cols)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv: bias shape {b.shape} does not match {w.shape[0]} output channels")
        out += b.data.reshape(1, -1, 1, 1, 1)
        inputs.append(b)
    if not w.requires_grad:
        cols = None
    wd = w.data

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _xcorr(g, wf)
        if w.requires_grad:
            gm = g.reshape(g.shape[0], g.shape[1], -1)
            gw = np.einsum("bon,bkn->ok", gm, cols) if gm.shape[0] > 1 else gm[0] @ cols[0].T
            co, ci, kx, ky, kt = wd.shape
            gw = gw.reshape(co, kx, ky, kt, ci).transpose(0, 4, 1, 2, 3)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb)[: len(inputs)]

    return apply_op("conv", inputs, out, vjp)


# -- elementwise and structural ops --------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return apply_op("relu", [x], np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return apply_op("add", [a, b], a.data + b.data, lambda g: (g, g))


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return apply_op("sum", [x], np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=dtype),))


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]`` along the channel axis."""
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"take_channels: [{start}, {stop}) out of range for {x.shape[1]} channels")
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return apply_op("take_channels", [x], x.data[:, start:stop].copy(), vjp)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    return apply_op("concat", xs, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def mse_loss(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Squared error between ``pred`` and ``target``.

    ``reduction="mean"`` divides by the element count; ``"sum"`` gives the plain
    squared norm.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same(pred, target, "mse_loss")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = pred.data - target.data
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    value = np.asarray(np.sum(diff * diff) * scale)

    def vjp(g):
        gd = (2.0 * scale * g) * diff
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return apply_op("mse_loss", [pred, target], value, vjp)
