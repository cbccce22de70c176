"""Synthetic cine phantoms: static ellipses plus a pulsating "heart" region.

The sequences are complex valued (a smooth spatial phase is applied) and
normalised so that the largest magnitude is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = ["Ellipse", "PhantomSpec", "default_spec", "generate", "make_dataset", "split_dataset"]

SUPERSAMPLE = 4


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalised coordinates ([-1, 1] across the field of view)."""

    cx: float
    cy: float
    ax: float
    ay: float
    intensity: float
    angle: float = 0.0
    phase: float = 0.0
    dynamic: bool = False

    def __post_init__(self):
        if self.ax <= 0 or self.ay <= 0:
            raise ValueError(f"degenerate ellipse with axes ({self.ax}, {self.ay})")
        if not 0 <= self.intensity <= 1:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and motion of a synthetic sequence.

    Dynamic ellipses scale by ``1 + pulsation * sin(2 pi t / period)`` and move by
    ``drift * (cos(2 pi t / period) - 1)`` along x (both periodic in ``period``).
    """

    n_x: int = 64
    n_y: int = 64
    n_t: int = 12
    ellipses: tuple = field(default_factory=tuple)
    pulsation: float = 0.15
    drift: float = 0.02
    period: float = 12.0
    phase_smoothness: float = 0.5
    phase_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_x, self.n_y, self.n_t) < 1:
            raise ValueError(f"invalid dimensions {(self.n_x, self.n_y, self.n_t)}")
        if self.period <= 0:
            raise ValueError("period must be positive")


def default_spec(n_x: int = 64, n_y: int = 64, n_t: int = 12, seed: int = 0, **kwargs) -> PhantomSpec:
    """Torso-like phantom: body, two lungs, myocardium ring and a blood pool."""
    ellipses = (
        Ellipse(0.0, 0.0, 0.82, 0.68, 0.35),
        Ellipse(-0.42, 0.05, 0.22, 0.38, 0.08, angle=0.2),
        Ellipse(0.45, 0.02, 0.2, 0.36, 0.1, angle=-0.15),
        Ellipse(0.05, -0.1, 0.26, 0.24, 0.55, angle=0.4, phase=0.3, dynamic=True),
        Ellipse(0.05, -0.1, 0.16, 0.14, 1.0, angle=0.4, phase=0.3, dynamic=True),
        Ellipse(-0.1, 0.45, 0.09, 0.06, 0.7),
    )
    kw = dict(n_x=n_x, n_y=n_y, n_t=n_t, ellipses=ellipses, period=float(n_t), seed=seed)
    kw.update(kwargs)
    return PhantomSpec(**kw)


def _coords(n: int) -> np.ndarray:
    # pixel-centre grid, SUPERSAMPLE sub-samples per pixel
    sub = (np.arange(n * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    return 2.0 * sub / n - 1.0


def _rasterise(e: Ellipse, scale: float, shift: float, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    c, s = np.cos(e.angle), np.sin(e.angle)
    dx, dy = gx - (e.cx + shift), gy - e.cy
    u = (c * dx + s * dy) / (e.ax * scale)
    v = (-s * dx + c * dy) / (e.ay * scale)
    return (u * u + v * v <= 1.0).astype(float)


def _phase_map(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.linspace(-1, 1, spec.n_x)[:, None]
    y = np.linspace(-1, 1, spec.n_y)[None, :]
    phase = np.zeros((spec.n_x, spec.n_y))
    # few random low-frequency cosines; smoothness sets the highest frequency
    for _ in range(4):
        kx, ky = rng.uniform(-1, 1, 2) * np.pi * spec.phase_smoothness
        phase += rng.uniform(-1, 1) * np.cos(kx * x + ky * y + rng.uniform(0, 2 * np.pi))
    return spec.phase_strength * phase / 2.0


def generate(spec: PhantomSpec) -> np.ndarray:
    """Render the complex sequence ``(n_x, n_y, n_t)``.

    Edges are anti-aliased by 4x supersampling. Later ellipses overwrite earlier
    ones where they overlap.
    """
    ellipses = spec.ellipses or default_spec(spec.n_x, spec.n_y, spec.n_t).ellipses
    rng = np.random.default_rng(spec.seed)
    gx, gy = np.meshgrid(_coords(spec.n_x), _coords(spec.n_y), indexing="ij")
    static = np.zeros_like(gx, dtype=complex)
    for e in ellipses:
        if not e.dynamic:
            inside = _rasterise(e, 1.0, 0.0, gx, gy)
            static = np.where(inside > 0, e.intensity * np.exp(1j * e.phase), static)

    phase = np.exp(1j * _phase_map(spec, rng))
    frames = np.empty((spec.n_x, spec.n_y, spec.n_t), dtype=complex)
    dyn = [e for e in ellipses if e.dynamic]
    for t in range(spec.n_t):
        w = 2 * np.pi * t / spec.period
        scale = 1.0 + spec.pulsation * np.sin(w)
        shift = spec.drift * (np.cos(w) - 1.0)
        img = static
        for e in dyn:
            inside = _rasterise(e, scale, shift, gx, gy)
            img = np.where(inside > 0, e.intensity * np.exp(1j * e.phase), img)
        img = img.reshape(spec.n_x, SUPERSAMPLE, spec.n_y, SUPERSAMPLE).mean(axis=(1, 3))
        frames[..., t] = img * phase
    peak = np.abs(frames).max()
    if peak == 0:
        raise ValueError("phantom is empty")
    return frames / peak


def _jitter(spec: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    base = spec.ellipses or default_spec(spec.n_x, spec.n_y, spec.n_t).ellipses
    sx, sy = rng.uniform(0.85, 1.1, 2)
    ox, oy = rng.uniform(-0.08, 0.08, 2)
    rot = rng.uniform(-0.3, 0.3)
    heart = rng.uniform(-0.1, 0.1, 2)
    ellipses = []
    for e in base:
        cx, cy = e.cx * sx + ox, e.cy * sy + oy
        if e.dynamic:
            cx, cy = cx + heart[0], cy + heart[1]
        ellipses.append(
            replace(
                e,
                cx=cx,
                cy=cy,
                ax=e.ax * sx * rng.uniform(0.9, 1.1),
                ay=e.ay * sy * rng.uniform(0.9, 1.1),
                angle=e.angle + rot,
                intensity=float(np.clip(e.intensity * rng.uniform(0.8, 1.2), 0, 1)),
                phase=e.phase + rng.uniform(-0.5, 0.5),
            )
        )
    return replace(
        spec,
        ellipses=tuple(ellipses),
        pulsation=spec.pulsation * rng.uniform(0.7, 1.3),
        drift=spec.drift * rng.uniform(0.5, 1.5),
        seed=int(rng.integers(2**31)),
    )


def make_dataset(template: Optional[PhantomSpec] = None, count: int = 10, seed: int = 0) -> list:
    """``count`` phantoms with jittered geometry, intensities and motion."""
    if count < 1:
        raise ValueError("count must be at least 1")
    template = template or default_spec()
    rng = np.random.default_rng(seed)
    return [generate(_jitter(template, rng)) for _ in range(count)]


def split_dataset(dataset: list, test_fraction: float = 0.3) -> tuple:
    """Disjoint split by index: the last ``round(test_fraction * n)`` items are test."""
    n_test = int(round(test_fraction * len(dataset)))
    n_test = min(max(n_test, 0), len(dataset) - 1) if len(dataset) > 1 else 0
    return list(dataset[: len(dataset) - n_test]), list(dataset[len(dataset) - n_test :])
