"""Network layers: CNN de-aliasing block, data consistency and data sharing.

The data-consistency (DC) and data-sharing (DS) layers act on real two-channel
image tensors ``(batch, 2, X, Y, T)`` but do their work in k-space. Both are
differentiable through :mod:`deepcascade.tensor` with hand-written adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .kspace import SamplingMask, dft2, from_channels, idft2, to_channels
from .tensor import ShapeError, Tensor, add, apply_op, conv, relu, take_channels

__all__ = [
    "DS_WINDOWS",
    "CnnBlock",
    "DcLayer",
    "cnn_forward",
    "dc_forward",
    "dc_backward",
    "dc_lambda_grad",
    "dc_apply",
    "share_weights",
    "data_share",
    "ds_layer",
    "ds_apply",
]

#: n_adj values whose data-shared images feed the first convolution.
DS_WINDOWS = (0, 1, 2, 3, 4, 5)


# -- CNN block ------------------------------------------------------------------


@dataclass(frozen=True)
class CnnBlock:
    """Architecture of one de-aliasing subnetwork.

    ``n_d - 1`` convolutions with ``n_f`` filters followed by ReLU, then a
    projection back to 2 channels, plus a residual connection from the first two
    input channels.
    """

    n_d: int = 5
    n_f: int = 64
    kernel: tuple = (3, 3, 3)
    in_channels: int = 2

    def __post_init__(self):
        if self.n_d < 2:
            raise ValueError(f"n_d must be at least 2, got {self.n_d}")
        if self.in_channels < 2:
            raise ValueError("a CNN block needs at least the 2 image channels as input")

    def layer_shapes(self) -> list:
        """Kernel shapes ``(c_out, c_in, kx, ky, kt)`` in forward order."""
        chans = [self.in_channels] + [self.n_f] * (self.n_d - 1) + [2]
        return [(co, ci) + tuple(self.kernel) for ci, co in zip(chans[:-1], chans[1:])]


def cnn_forward(block: CnnBlock, x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor]) -> Tensor:
    """Residual CNN: ``x[:, :2] + C_rec(ReLU(C_{n_d-1}(... ReLU(C_1(x)))))``."""
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"CNN block expects {block.in_channels} input channels, got {x.shape[1]}")
    if len(weights) != block.n_d or len(biases) != block.n_d:
        raise ShapeError(f"CNN block of depth {block.n_d} got {len(weights)} kernels")
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = conv(h, w, b)
        if i < block.n_d - 1:
            h = relu(h)
    skip = x if block.in_channels == 2 else take_channels(x, 0, 2)
    return add(skip, h)


# -- data consistency -----------------------------------------------------------


@dataclass(frozen=True)
class DcLayer:
    """Data-consistency settings.

    ``mode="hard"`` replaces acquired coefficients by the measurements (the
    noiseless limit); ``mode="soft"`` blends them with weight ``lam``.
    """

    mode: str = "hard"
    lam: float = 0.025
    trainable: bool = False

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"DC mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.trainable and self.mode == "hard":
            raise ValueError("lambda can only be trained in soft mode")


def _check_lambda(lam) -> Optional[float]:
    if lam is None or lam == np.inf:
        return None
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return lam


def _diag(omega: np.ndarray, lam: Optional[float]) -> np.ndarray:
    """Diagonal of the k-space weighting: 1 off the acquired set, 1/(1+lam) on it."""
    on = 0.0 if lam is None else 1.0 / (1.0 + lam)
    return np.where(omega, on, 1.0)


def dc_forward(x: np.ndarray, s0: np.ndarray, mask: SamplingMask, lam=None) -> np.ndarray:
    """Data-consistency step on a complex image sequence.

    In k-space, coefficients outside the acquired set keep the network's value
    and acquired ones become ``(s_cnn + lam * s0) / (1 + lam)``. ``lam=None`` (or
    ``inf``) selects the hard replacement ``s_rec = s0`` on the acquired set.
    """
    lam = _check_lambda(lam)
    om = mask.omega(x.shape[-3])
    s = dft2(x)
    if lam is None:
        s_rec = np.where(om, s0, s)
    else:
        s_rec = _diag(om, lam) * s + np.where(om, (lam / (1.0 + lam)) * s0, 0)
    return idft2(s_rec)


def dc_backward(g: np.ndarray, mask: SamplingMask, lam=None) -> np.ndarray:
    """Vector-Jacobian product of :func:`dc_forward` w.r.t. its image input.

    The Jacobian ``F^H diag(w) F`` is self-adjoint because the weights are real
    and the transform unitary, so this is the same map applied to ``g``.
    """
    lam = _check_lambda(lam)
    om = mask.omega(g.shape[-3])
    return idft2(_diag(om, lam) * dft2(g))


def dc_lambda_grad(s_cnn: np.ndarray, s0: np.ndarray, mask: SamplingMask, lam, upstream: np.ndarray) -> float:
    """d(loss)/d(lambda) for a soft DC layer.

    ``upstream`` is d(loss)/d(output) in the image domain. The output derivative
    in k-space is ``(s0 - s_cnn) / (1 + lam)^2`` on the acquired set and zero
    elsewhere; it is contracted with the upstream error mapped to k-space.
    """
    lam = _check_lambda(lam)
    if lam is None:
        raise ValueError("lambda gradient is undefined for hard data consistency")
    om = mask.omega(s_cnn.shape[-3])
    ds = np.where(om, (s0 - s_cnn) / (1.0 + lam) ** 2, 0)
    return float(np.real(np.vdot(dft2(upstream), ds)))


def dc_apply(x: Tensor, s0: np.ndarray, mask: SamplingMask, lam: Optional[Tensor] = None) -> Tensor:
    """Tape-aware DC layer on a ``(batch, 2, X, Y, T)`` tensor.

    ``lam`` is a scalar tensor for soft mode (trainable when it requires grad)
    or ``None`` for hard mode.
    """
    if x.ndim != 5 or x.shape[1] != 2:
        raise ShapeError(f"DC layer expects (batch, 2, X, Y, T), got {x.shape}")
    xc = from_channels(x.data.astype(np.float64))
    s_cnn = dft2(xc)
    om = mask.omega(x.shape[2])
    if om.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"mask {mask.lines.shape} does not match image {x.shape}")
    lam_v = None if lam is None else float(lam.data.reshape(()))
    if lam_v is None:
        s_rec = np.where(om, s0, s_cnn)
    else:
        if lam_v < 0:
            raise ValueError(f"lambda must be nonnegative, got {lam_v}")
        s_rec = _diag(om, lam_v) * s_cnn + np.where(om, (lam_v / (1.0 + lam_v)) * s0, 0)
    out = to_channels(idft2(s_rec), x.dtype)
    dtype = x.dtype

    def vjp(g):
        gc = from_channels(g.astype(np.float64))
        gx = to_channels(idft2(_diag(om, lam_v) * dft2(gc)), dtype) if x.requires_grad else None
        if lam is None:
            return (gx,)
        glam = None
        if lam.requires_grad:
            ds = np.where(om, (s0 - s_cnn) / (1.0 + lam_v) ** 2, 0)
            glam = np.asarray(np.real(np.vdot(dft2(gc), ds)), dtype=lam.dtype).reshape(lam.shape)
        return (gx, glam)

    inputs = [x] if lam is None else [x, lam]
    return apply_op("dc", inputs, out, vjp)


# -- data sharing ---------------------------------------------------------------


def _window(t: int, n_adj: int, n_t: int, boundary: str) -> np.ndarray:
    idx = np.arange(t - n_adj, t + n_adj + 1)
    if boundary == "clamp":
        return idx[(idx >= 0) & (idx < n_t)]
    if boundary == "reflect":
        if n_t == 1:
            return np.zeros_like(idx)
        period = 2 * (n_t - 1)
        idx = np.mod(idx, period)
        return np.where(idx >= n_t, period - idx, idx)
    raise ValueError(f"unknown boundary mode {boundary!r}")


def share_weights(lines: np.ndarray, n_adj: int, stage: str = "first", boundary: str = "clamp") -> np.ndarray:
    """Per-line temporal averaging weights ``W[..., k_y, t_out, t_in]``.

    Acquired lines map to themselves. A missing line of frame ``t`` becomes the
    plain average over the frames ``t - n_adj .. t + n_adj``: in the ``"first"``
    stage only over frames where that line was acquired (unchanged if there are
    none), in the ``"later"`` stage over every frame of the window.
    """
    if stage not in ("first", "later"):
        raise ValueError(f"stage must be 'first' or 'later', got {stage!r}")
    if not 0 <= n_adj:
        raise ValueError(f"n_adj must be nonnegative, got {n_adj}")
    lines = np.asarray(lines, dtype=bool)
    n_t = lines.shape[-1]
    W = np.zeros(lines.shape + (n_t,))
    for t in range(n_t):
        win = _window(t, n_adj, n_t, boundary)
        onehot = np.zeros(n_t)
        np.add.at(onehot, win, 1.0)
        if stage == "later":
            row = np.broadcast_to(onehot / onehot.sum(), lines.shape[:-1] + (n_t,))
        else:
            counts = onehot * lines  # (..., n_y, n_t_in)
            total = counts.sum(axis=-1, keepdims=True)
            eye = np.zeros(n_t)
            eye[t] = 1.0
            row = np.where(total > 0, counts / np.maximum(total, 1), eye)
        W[..., t, :] = np.where(lines[..., t : t + 1], np.eye(n_t)[t], row)
    return W


@lru_cache(maxsize=128)
def _cached_weights(key: bytes, shape: tuple, n_adj: int, stage: str, boundary: str) -> np.ndarray:
    lines = np.frombuffer(key, dtype=bool).reshape(shape)
    W = share_weights(lines, n_adj, stage, boundary)
    W.flags.writeable = False
    return W


def _apply_weights(W: np.ndarray, s: np.ndarray, transpose: bool = False) -> np.ndarray:
    spec = "...ytu,...xyu->...xyt" if not transpose else "...yut,...xyu->...xyt"
    return np.einsum(spec, W, s)


def data_share(s: np.ndarray, mask: SamplingMask, n_adj: int, stage: str = "first", boundary: str = "clamp") -> np.ndarray:
    """Fill missing k-space lines of each frame from its temporal neighbours."""
    W = share_weights(mask.lines, n_adj, stage, boundary)
    return _apply_weights(W, s)


def ds_layer(x: np.ndarray, mask: SamplingMask, stage: str = "first", windows=DS_WINDOWS, boundary: str = "clamp") -> np.ndarray:
    """Data-shared images for every ``n_adj`` in ``windows``, as real channels.

    ``x`` is a complex image sequence ``(..., X, Y, T)``; the result has shape
    ``(..., 2 * len(windows), X, Y, T)`` with channels ``[0, 1]`` equal to ``x``
    when ``windows[0] == 0``.
    """
    s = dft2(x)
    imgs = [to_channels(idft2(data_share(s, mask, n, stage, boundary))) for n in windows]
    return np.concatenate(imgs, axis=-4)


def ds_apply(x: Tensor, mask: SamplingMask, stage: str = "first", windows=DS_WINDOWS, boundary: str = "clamp") -> Tensor:
    """Tape-aware data-sharing layer: ``(batch, 2, ...)`` -> ``(batch, 2*len(windows), ...)``.

    The layer is linear in ``x`` for a fixed mask; its adjoint applies the
    transposed averaging weights.
    """
    if x.ndim != 5 or x.shape[1] != 2:
        raise ShapeError(f"DS layer expects (batch, 2, X, Y, T), got {x.shape}")
    lines = mask.lines
    if lines.ndim == 2:
        lines = np.broadcast_to(lines, (x.shape[0],) + lines.shape)
    if lines.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"mask {mask.lines.shape} does not match image {x.shape}")
    Ws = [_cached_weights(lines.tobytes(), lines.shape, n, stage, boundary) for n in windows]
    s = dft2(from_channels(x.data.astype(np.float64)))
    out = np.concatenate([to_channels(idft2(_apply_weights(W, s)), x.dtype) for W in Ws], axis=1)
    dtype = x.dtype

    def vjp(g):
        acc = 0
        for i, W in enumerate(Ws):
            gk = dft2(from_channels(g[:, 2 * i : 2 * i + 2].astype(np.float64)))
            acc = acc + _apply_weights(W, gk, transpose=True)
        return (to_channels(idft2(acc), dtype),)

    return apply_op("ds", [x], out, vjp)
