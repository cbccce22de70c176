"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .kspace import SamplingMask

__all__ = ["check_sequence", "check_sequences", "check_mask"]


def check_sequence(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a finite complex array of shape (n_x, n_y, n_t).

    2D images are promoted to a single frame.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (n_x, n_y, n_t), got {x.shape}")
    if not np.iscomplexobj(x):
        x = x.astype(np.complex128)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_sequences(X, name: str = "X") -> list:
    """A list of sequences sharing one shape."""
    if isinstance(X, np.ndarray) and X.dtype != object:
        if X.ndim == 3:
            X = [X]
        elif X.ndim == 4:
            X = list(X)
    seqs = [check_sequence(x, f"{name}[{i}]") for i, x in enumerate(X)]
    if not seqs:
        raise ValueError(f"{name} is empty")
    shapes = {s.shape for s in seqs}
    if len(shapes) != 1:
        raise ValueError(f"{name} mixes shapes {sorted(shapes)}")
    return seqs


def check_mask(mask, shape) -> SamplingMask:
    """Coerce ``mask`` to a :class:`SamplingMask` matching k-space ``shape``.

    Accepts line masks (n_y, n_t), full (n_x, n_y, n_t) masks whose rows agree
    along k_x, or an existing :class:`SamplingMask`.
    """
    if isinstance(mask, SamplingMask):
        lines = mask.lines
    else:
        m = np.asarray(mask)
        if m.ndim == len(shape) and m.shape == tuple(shape):
            m = m.astype(bool)
            if not np.all(m == m[..., :1, :, :]):
                raise ValueError("mask is not Cartesian: acquired lines must span all of k_x")
            m = m[..., 0, :, :]
        lines = m
    mask = SamplingMask(lines)
    if mask.lines.shape[-2:] != tuple(shape[-2:]):
        raise ValueError(f"mask lines {mask.lines.shape} do not match k-space {tuple(shape)}")
    return mask
