"""Reconstruction error measures and report formatting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = ["mse", "magnitude_mse", "psnr", "temporal_profile", "EvalReport", "evaluate"]

#: Value reported as PSNR when the error is exactly zero.
PSNR_INF = math.inf


def _check(x, ref):
    x, ref = np.asarray(x), np.asarray(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def mse(x, x_gnd) -> float:
    """Mean of ``|x - x_gnd|^2`` over all complex entries."""
    x, x_gnd = _check(x, x_gnd)
    d = x.astype(np.complex128) - x_gnd
    return float(np.mean(d.real**2 + d.imag**2))


def magnitude_mse(x, x_gnd) -> float:
    x, x_gnd = _check(x, x_gnd)
    return float(np.mean((np.abs(x) - np.abs(x_gnd)) ** 2))


def psnr(x=None, x_gnd=None, *, error: Optional[float] = None) -> float:
    """``10 log10(1 / MSE)`` for data normalised to unit peak magnitude."""
    e = mse(x, x_gnd) if error is None else error
    return PSNR_INF if e == 0 else 10.0 * math.log10(1.0 / e)


def temporal_profile(x, y_index: int, ref=None):
    """The x-t plane at fixed ``y_index`` and, with ``ref``, its error magnitude."""
    x = np.asarray(x)
    if not 0 <= y_index < x.shape[1]:
        raise IndexError(f"y_index {y_index} out of range for n_y={x.shape[1]}")
    prof = x[:, y_index, :]
    if ref is None:
        return prof
    ref = np.asarray(ref)
    if ref.shape != x.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return prof, np.abs(prof - ref[:, y_index, :])


@dataclass
class EvalReport:
    """Per-sequence errors plus their aggregate."""

    names: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    magnitude_mse: list = field(default_factory=list)
    stage_mse: Optional[list] = None
    acc: Optional[float] = None
    input_psnr: Optional[float] = None

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def std_mse(self) -> float:
        return float(np.std(self.mse)) if self.mse else float("nan")

    def summary(self) -> dict:
        out = {
            "n": len(self.mse),
            "mse_mean": self.mean_mse,
            "mse_std": self.std_mse,
            "psnr_mean": float(np.mean(self.psnr)) if self.psnr else float("nan"),
            "magnitude_mse_mean": float(np.mean(self.magnitude_mse)) if self.magnitude_mse else float("nan"),
        }
        if self.acc is not None:
            out["acc"] = self.acc
        if self.input_psnr is not None:
            out["input_psnr"] = self.input_psnr
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "mse", "psnr", "magnitude_mse"])
        for row in zip(self.names, self.mse, self.psnr, self.magnitude_mse):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        with np.errstate(invalid="ignore"):  # inf PSNR of exact reconstructions
            w.writerow(["mean", self.mean_mse, float(np.mean(self.psnr)), float(np.mean(self.magnitude_mse))])
            w.writerow(["std", self.std_mse, float(np.std(self.psnr)), float(np.std(self.magnitude_mse))])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(n) for n in self.names] + [8])
        lines = [f"{'sequence':<{width}}  {'MSE':>12}  {'PSNR (dB)':>10}  {'|.| MSE':>12}"]
        for n, e, p, m in zip(self.names, self.mse, self.psnr, self.magnitude_mse):
            lines.append(f"{n:<{width}}  {e:12.4e}  {p:10.2f}  {m:12.4e}")
        lines.append(f"{'mean (SD)':<{width}}  {self.mean_mse:12.4e}  ({self.std_mse:.2e})")
        if self.stage_mse:
            lines.append("per-stage MSE: " + ", ".join(f"{v:.4e}" for v in self.stage_mse))
        return "\n".join(lines) + "\n"


def evaluate(recons: Sequence, truths: Sequence, names: Optional[Sequence[str]] = None, **extra) -> EvalReport:
    if len(recons) != len(truths):
        raise ValueError(f"{len(recons)} reconstructions for {len(truths)} references")
    names = list(names) if names is not None else [f"seq{i}" for i in range(len(recons))]
    rep = EvalReport(names=names, **extra)
    for x, g in zip(recons, truths):
        e = mse(x, g)
        rep.mse.append(e)
        rep.psnr.append(psnr(error=e))
        rep.magnitude_mse.append(magnitude_mse(x, g))
    return rep
