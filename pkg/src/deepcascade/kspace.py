"""Fourier encoding, Cartesian sampling masks and the acquisition model.

Complex sequences are numpy complex arrays shaped ``(n_x, n_y, n_t)``, optionally
with a leading batch axis. k-space uses the centered, unitary 2D DFT applied to
each frame: zero frequency sits at index ``(n_x // 2, n_y // 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "SamplingMask",
    "NoiseSpec",
    "REFERENCE_PIXELS",
    "dft2",
    "idft2",
    "to_channels",
    "from_channels",
    "generate_mask",
    "variable_density",
    "undersample",
    "zero_filled",
]

N_CENTRAL = 8

#: Image size the noise power is referenced to (a 256 x 256 matrix).
REFERENCE_PIXELS = 256 * 256

_AXES = (-3, -2)


def dft2(x: np.ndarray) -> np.ndarray:
    """Centered unitary DFT over the two spatial axes of every frame."""
    x = np.fft.ifftshift(x, axes=_AXES)
    return np.fft.fftshift(np.fft.fft2(x, axes=_AXES, norm="ortho"), axes=_AXES)


def idft2(s: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2`."""
    s = np.fft.ifftshift(s, axes=_AXES)
    return np.fft.fftshift(np.fft.ifft2(s, axes=_AXES, norm="ortho"), axes=_AXES)


def to_channels(x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Complex ``(..., X, Y, T)`` -> real ``(..., 2, X, Y, T)``."""
    return np.stack([x.real, x.imag], axis=-4).astype(dtype, copy=False)


def from_channels(x: np.ndarray) -> np.ndarray:
    """Real ``(..., 2, X, Y, T)`` -> complex ``(..., X, Y, T)``."""
    ctype = np.complex64 if x.dtype == np.float32 else np.complex128
    return (x[..., 0, :, :, :] + 1j * x[..., 1, :, :, :]).astype(ctype, copy=False)


@dataclass(frozen=True)
class SamplingMask:
    """Acquired phase-encode lines per frame.

    ``lines[k_y, t]`` is True when line ``k_y`` of frame ``t`` was acquired; k_x is
    always fully sampled for such a line. A leading batch axis is allowed.
    """

    lines: np.ndarray

    def __post_init__(self):
        lines = np.asarray(self.lines)
        if lines.ndim not in (2, 3):
            raise ValueError(f"mask lines must be (n_y, n_t) or (batch, n_y, n_t), got {lines.shape}")
        lines = lines.astype(bool)
        lines.flags.writeable = False
        object.__setattr__(self, "lines", lines)

    @property
    def n_y(self) -> int:
        return self.lines.shape[-2]

    @property
    def n_t(self) -> int:
        return self.lines.shape[-1]

    def omega(self, n_x: int) -> np.ndarray:
        """Boolean indicator of the acquired set over ``(n_x, n_y, n_t)``."""
        lines = self.lines[..., None, :, :]
        return np.broadcast_to(lines, lines.shape[:-3] + (n_x,) + lines.shape[-2:])

    def fraction(self) -> np.ndarray:
        """Acquired fraction of lines per frame."""
        return self.lines.mean(axis=-2)

    def __getitem__(self, idx) -> "SamplingMask":
        if self.lines.ndim != 3:
            raise IndexError("only batched masks can be indexed")
        return SamplingMask(self.lines[idx])


@dataclass(frozen=True)
class NoiseSpec:
    """Complex white Gaussian acquisition noise.

    ``sigma2`` is the noise power in k-space normalised to an image of
    ``reference_pixels`` pixels, so the image-domain noise power of a fully sampled
    acquisition is ``sigma2 * reference_pixels`` whatever the matrix size. With
    ``reference_pixels=1`` the power is defined directly on the unitary k-space.
    """

    sigma2: float = 0.0
    seed: Optional[int] = None
    reference_pixels: int = REFERENCE_PIXELS

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2}")

    @property
    def kspace_power(self) -> float:
        """Expected ``|e_j|^2`` on the unitary k-space grid."""
        return self.sigma2 * self.reference_pixels


def _central_lines(n_y: int, n_central: int = N_CENTRAL) -> np.ndarray:
    c = n_y // 2
    return np.arange(c - n_central // 2, c - n_central // 2 + n_central)


def variable_density(n_y: int, std_frac: float = 1 / 6, floor: float = 0.1) -> np.ndarray:
    """Unnormalised acquisition density of the line pairs ``(2k, 2k+1)``.

    A zero-mean Gaussian over the pair-centre frequency, raised by a constant so
    that the smallest value is ``floor`` times the largest.
    """
    centres = np.arange(0, n_y, 2) + 0.5 - n_y // 2
    g = np.exp(-0.5 * (centres / (std_frac * n_y)) ** 2)
    offset = (floor * g.max() - g.min()) / (1.0 - floor)
    return g + max(offset, 0.0)


def _target_lines(n_y: int, acc: float, n_central: int) -> int:
    target = math.ceil(n_y / acc - 1e-9)
    extra = target - n_central
    if extra % 2:
        extra += 1
    return min(n_y, n_central + extra)


def generate_mask(
    n_y: int,
    n_t: int,
    acc: float,
    seed=None,
    *,
    n_central: int = N_CENTRAL,
    std_frac: float = 1 / 6,
    floor: float = 0.1,
) -> SamplingMask:
    """Draw a Cartesian variable-density mask with paired phase encodes.

    Every frame keeps the ``n_central`` lowest frequencies and adds line pairs
    ``(2k, 2k+1)`` drawn without replacement, with probability proportional to
    :func:`variable_density`, until ``ceil(n_y / acc)`` lines (rounded up to
    keep pairs whole) are acquired. Frames are drawn independently.

    Parameters
    ----------
    n_y, n_t : int
        Phase-encode lines and frames.
    acc : float
        Acceleration factor, ``1 < acc <= n_y / n_central``.
    seed : int, numpy Generator or None
        Source of randomness.
    """
    if n_y < 2 * n_central or n_y % 2:
        raise ValueError(f"n_y must be even and at least {2 * n_central}, got {n_y}")
    if n_t < 1:
        raise ValueError(f"n_t must be positive, got {n_t}")
    if not 1 < acc <= n_y / n_central:
        raise ValueError(f"acceleration {acc} is infeasible for n_y={n_y}: need 1 < acc <= {n_y / n_central:g}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    target = _target_lines(n_y, acc, n_central)

    central = np.zeros(n_y, dtype=bool)
    central[_central_lines(n_y, n_central)] = True
    pair_new = (~central).reshape(-1, 2).sum(axis=1)  # lines each pair would add
    candidates = np.flatnonzero(pair_new > 0)
    logp = np.log(variable_density(n_y, std_frac, floor)[candidates])

    lines = np.zeros((n_y, n_t), dtype=bool)
    for t in range(n_t):
        # Gumbel-top-k == sequential weighted sampling without replacement
        keys = logp - np.log(-np.log(rng.random(candidates.size)))
        order = candidates[np.argsort(-keys, kind="stable")]
        count = n_central + np.cumsum(pair_new[order])
        take = order[: np.searchsorted(count, target) + 1] if target > n_central else order[:0]
        frame = central.copy()
        frame[(2 * take[:, None] + np.arange(2)).ravel()] = True
        lines[:, t] = frame
    return SamplingMask(lines)


def undersample(x: np.ndarray, mask: SamplingMask, noise: Optional[NoiseSpec] = None, rng=None) -> np.ndarray:
    """Simulate an acquisition and return the zero-filled k-space ``s_0``.

    ``s_0 = M (F x + e)`` where ``e`` only touches acquired entries and has
    per-component standard deviation ``sqrt(noise.kspace_power / 2)``.
    """
    x = np.asarray(x)
    if x.shape[-2:] != mask.lines.shape[-2:]:
        raise ValueError(f"sequence shape {x.shape} does not match mask {mask.lines.shape}")
    s = dft2(x)
    if noise is not None and noise.sigma2 > 0:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        std = math.sqrt(noise.kspace_power / 2)
        s = s + std * (rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape))
    om = mask.omega(x.shape[-3])
    return np.where(om, s, 0).astype(s.dtype)


def zero_filled(s0: np.ndarray) -> np.ndarray:
    """Aliased image sequence ``x_u = F^H s_0``."""
    return idft2(s0)
