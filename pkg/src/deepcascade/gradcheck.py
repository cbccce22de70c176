"""Finite-difference verification of whole-model gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import CascadeModel, forward
from .kspace import SamplingMask, to_channels, undersample
from .tensor import Tape, Tensor, mse_loss

__all__ = ["GradCheckResult", "random_problem", "model_loss", "check_gradients"]


@dataclass
class GradCheckResult:
    """Maximum relative error per parameter group (``None`` when not trainable)."""

    errors: dict
    n_checked: int

    def passed(self, tol: float) -> bool:
        return all(e is None or e < tol for e in self.errors.values())


def random_problem(dims, batch: int = 2, seed: int = 0, min_lines: int = 2):
    """Random complex targets, random line masks and the matching ``s0``."""
    rng = np.random.default_rng(seed)
    nx, ny, nt = dims
    x = rng.standard_normal((batch, nx, ny, nt)) + 1j * rng.standard_normal((batch, nx, ny, nt))
    lines = rng.random((batch, ny, nt)) < 0.4
    lines[:, :min_lines] = True
    mask = SamplingMask(lines)
    s0 = undersample(x, mask)
    return x, s0, mask


def model_loss(model: CascadeModel, params: dict, x, s0, mask) -> float:
    probe = CascadeModel(model.config, params)
    out = forward(probe, s0, mask)
    return float(mse_loss(out, Tensor(to_channels(x, out.dtype))).data)


def _tape_grads(model, x, s0, mask) -> dict:
    leaves = {k: Tensor(v, requires_grad=model.trainable(k)) for k, v in model.params.items()}
    with Tape() as tape:
        out = forward(model, s0, mask, leaves)
        loss = mse_loss(out, Tensor(to_channels(x, out.dtype)))
    grads = tape.backward(loss)
    return {k: grads.get(t.id, np.zeros(t.shape)) for k, t in leaves.items() if t.requires_grad}


def _group(name: str) -> str:
    kind = name.split(".")[1]
    return {"w": "weights", "b": "biases", "lam": "lambda"}[kind.rstrip("0123456789")]


def _central_difference(f, flat, i, l0, step, min_step, kink):
    """Central difference of ``f`` in entry ``i``, shrinking the step past kinks.

    Across a ReLU kink the forward and backward slopes disagree by the jump in
    slope; their half-difference bounds the error of the central estimate. The
    step is divided by ten until that bound drops below ``kink``.
    """
    orig = flat[i]
    h = step
    while True:
        flat[i] = orig + h
        lp = f()
        flat[i] = orig - h
        lm = f()
        flat[i] = orig
        if abs(lp - 2 * l0 + lm) / (2 * h) <= kink or h / 10 < min_step * 0.999:
            return (lp - lm) / (2 * h)
        h /= 10


def check_gradients(
    model: CascadeModel, x, s0, mask, step: float = 1e-6, min_step: float = 1e-8, floor: float = 1e-7
) -> GradCheckResult:
    """Compare tape gradients with central differences for every parameter.

    Relative error per entry is ``|fd - ad| / max(|fd|, |ad|, floor * scale)``,
    ``scale`` being the largest gradient magnitude in the group, so entries that
    are numerically zero do not dominate. Steps start at ``step`` and shrink
    towards ``min_step`` only for entries whose stencil straddles a kink.
    """
    if model.config.dtype != "float64":
        raise ValueError("gradient checks need a float64 model")
    ad = _tape_grads(model, x, s0, mask)
    groups = {"weights": [], "biases": [], "lambda": []}
    params = {k: v.copy() for k, v in model.params.items()}
    l0 = model_loss(model, params, x, s0, mask)
    kink = 1e-6 * max((np.abs(g).max() for g in ad.values()), default=0.0)
    n = 0
    for name, g in ad.items():
        p = params[name]
        flat = p.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            fd[i] = _central_difference(lambda: model_loss(model, params, x, s0, mask), flat, i, l0, step, min_step, kink)
        groups[_group(name)].append((fd, np.asarray(g).reshape(-1)))
        n += flat.size
    errors = {}
    for group, pairs in groups.items():
        if not pairs:
            errors[group] = None
            continue
        fd = np.concatenate([p[0] for p in pairs])
        an = np.concatenate([p[1] for p in pairs])
        scale = max(np.abs(an).max(), np.abs(fd).max(), 1e-300)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor * scale)
        errors[group] = float(np.max(np.abs(fd - an) / denom))
    return GradCheckResult(errors, n)
