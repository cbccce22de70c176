"""End-to-end training of cascade models on simulated acquisitions.

Every step draws a fresh undersampling mask (and optionally a noise level) for
each ground-truth example, so the network never sees the same aliasing twice.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .cascade import CascadeModel, forward, reconstruct, save_model
from .kspace import REFERENCE_PIXELS, NoiseSpec, SamplingMask, generate_mask, to_channels, undersample, zero_filled
from .metrics import mse
from .tensor import Tape, Tensor, mse_loss

__all__ = [
    "AugConfig",
    "TrainConfig",
    "Adam",
    "Trainer",
    "TrainResult",
    "augment",
    "extract_patch",
    "prepare_example",
    "train_step",
    "train",
    "evaluate_model",
    "make_noise_adaptive",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugConfig:
    """Random rigid and elastic augmentation.

    ``rotate`` is the upper end of the uniform rotation range in radians;
    elastic ``sigma`` is a fraction of the image width and ``alpha`` the peak
    displacement in pixels.
    """

    translate_px: int = 20
    rotate: float = 2 * math.pi
    reflect_x_prob: float = 0.5
    elastic_alpha: tuple = (0.0, 3.0)
    elastic_sigma: tuple = (0.05, 0.1)
    reflect_t_prob: float = 0.5

    def __post_init__(self):
        vals = [self.translate_px, self.rotate, self.reflect_x_prob, self.reflect_t_prob, *self.elastic_alpha, *self.elastic_sigma]
        if any(v < 0 for v in vals):
            raise ValueError("augmentation ranges must be nonnegative")

    @classmethod
    def none(cls) -> "AugConfig":
        return cls(0, 0.0, 0.0, (0.0, 0.0), (0.0, 0.0), 0.0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and data-simulation settings.

    ``acc`` is a fixed acceleration or a ``(low, high)`` range sampled uniformly
    per example; ``noise_range`` likewise samples the noise power.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    batch: int = 1
    iters: int = 1000
    acc: object = 4.0
    noise_range: Optional[tuple] = None
    noise_reference: int = REFERENCE_PIXELS
    patch_width: Optional[int] = None
    aug: Optional[AugConfig] = None
    loss_reduction: str = "mean"
    eval_every: int = 0
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    eval_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch must be at least 1, got {self.batch}")
        if self.iters < 0:
            raise ValueError(f"iters must be nonnegative, got {self.iters}")

    def sample_acc(self, rng: np.random.Generator) -> float:
        if isinstance(self.acc, (tuple, list)):
            return float(rng.uniform(*self.acc))
        return float(self.acc)

    def sample_sigma2(self, rng: np.random.Generator) -> float:
        if not self.noise_range:
            return 0.0
        return float(rng.uniform(*self.noise_range))


# -- data preparation -------------------------------------------------------------


def _shift(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(x)
    nx, ny = x.shape[:2]
    sx_src = slice(max(0, -dx), nx - max(0, dx))
    sx_dst = slice(max(0, dx), nx - max(0, -dx))
    sy_src = slice(max(0, -dy), ny - max(0, dy))
    sy_dst = slice(max(0, dy), ny - max(0, -dy))
    out[sx_dst, sy_dst] = x[sx_src, sy_src]
    return out


def _warp(x: np.ndarray, angle: float, disp: Optional[np.ndarray]) -> np.ndarray:
    nx, ny, nt = x.shape
    cx, cy = (nx - 1) / 2, (ny - 1) / 2
    gx, gy = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    px, py = c * gx - s * gy + cx, s * gx + c * gy + cy
    if disp is not None:
        px, py = px + disp[0], py + disp[1]
    out = np.empty_like(x)
    for t in range(nt):
        re = map_coordinates(x[..., t].real, [px, py], order=1, mode="nearest")
        im = map_coordinates(x[..., t].imag, [px, py], order=1, mode="nearest")
        out[..., t] = re + 1j * im
    return out


def augment(x: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Random geometric transform shared by all frames and both channels.

    Rotation and elastic deformation use bilinear interpolation with border
    clamping; reflections and integer translations are exact index operations.
    """
    x = np.asarray(x)
    nx, ny = x.shape[:2]
    angle = float(rng.uniform(0, cfg.rotate)) if cfg.rotate > 0 else 0.0
    alpha = float(rng.uniform(*cfg.elastic_alpha)) if cfg.elastic_alpha[1] > 0 else 0.0
    disp = None
    if alpha > 0:
        sigma = float(rng.uniform(*cfg.elastic_sigma)) * nx
        field_ = rng.uniform(-1, 1, (2, nx, ny))
        field_ = np.stack([gaussian_filter(f, sigma, mode="constant") for f in field_])
        peak = np.abs(field_).max()
        disp = alpha * field_ / peak if peak > 0 else None
    if angle != 0.0 or disp is not None:
        x = _warp(x, angle, disp)
    if cfg.reflect_x_prob > 0 and rng.random() < cfg.reflect_x_prob:
        x = x[::-1]
    if cfg.translate_px > 0:
        dx, dy = rng.integers(-cfg.translate_px, cfg.translate_px + 1, 2)
        x = _shift(x, int(dx), int(dy))
    if cfg.reflect_t_prob > 0 and rng.random() < cfg.reflect_t_prob:
        x = x[..., ::-1]
    return np.ascontiguousarray(x)


def extract_patch(x: np.ndarray, n_patch: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous slab of ``n_patch`` rows along x, the fully sampled readout axis.

    The slab becomes a new, smaller field of view; its k-space must be
    recomputed from the patch rather than cut from the original k-space.
    """
    nx = x.shape[0]
    if not 1 <= n_patch <= nx:
        raise ValueError(f"patch width {n_patch} does not fit n_x={nx}")
    start = int(rng.integers(0, nx - n_patch + 1))
    return np.ascontiguousarray(x[start : start + n_patch])


def prepare_example(x_gnd: np.ndarray, cfg: TrainConfig, rngs: dict, n_central: int = 8):
    """Augment, crop and undersample one ground truth; returns (target, s0, mask)."""
    x = x_gnd
    if cfg.aug is not None:
        x = augment(x, cfg.aug, rngs["aug"])
    if cfg.patch_width:
        x = extract_patch(x, cfg.patch_width, rngs["aug"])
    n_y, n_t = x.shape[1:]
    mask = generate_mask(n_y, n_t, cfg.sample_acc(rngs["mask"]), rngs["mask"], n_central=n_central)
    noise = NoiseSpec(cfg.sample_sigma2(rngs["noise"]), reference_pixels=cfg.noise_reference)
    s0 = undersample(x, mask, noise, rngs["noise"])
    return x, s0, mask


# -- optimiser ---------------------------------------------------------------------


class Adam:
    """Adam with bias correction, updating numpy arrays in place."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            g = np.asarray(g, dtype=np.float64)
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p - update).astype(p.dtype)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CascadeModel
    curve: list = field(default_factory=list)  # (step, train_mse, test_mse)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_mse", "test_mse"])
            for step, tr, te in self.curve:
                w.writerow([step, repr(tr), "" if te is None else repr(te)])


def _streams(seed: int) -> dict:
    mask, noise, aug, order = np.random.SeedSequence(seed).spawn(4)
    return {
        "mask": np.random.default_rng(mask),
        "noise": np.random.default_rng(noise),
        "aug": np.random.default_rng(aug),
        "order": np.random.default_rng(order),
    }


class Trainer:
    """Holds the optimiser state and random streams for one training run."""

    def __init__(self, model: CascadeModel, cfg: TrainConfig, n_central: int = 8):
        self.model = model
        self.cfg = cfg
        self.n_central = n_central
        self.optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.rngs = _streams(cfg.seed)
        self.steps = 0

    def loss_and_grads(self, targets: np.ndarray, s0: np.ndarray, mask: SamplingMask):
        """Loss (including weight decay) and gradients for one prepared batch."""
        model, cfg = self.model, self.cfg
        dtype = np.dtype(model.config.dtype)
        leaves = {k: Tensor(v, requires_grad=model.trainable(k), name=k) for k, v in model.params.items()}
        with Tape() as tape:
            out = forward(model, s0, mask, leaves)
            loss = mse_loss(out, Tensor(to_channels(targets, dtype)), reduction=cfg.loss_reduction)
        grads = tape.backward(loss)
        named = {k: grads[t.id] for k, t in leaves.items() if t.id in grads}
        value = float(loss.data)
        if cfg.weight_decay:
            for k in named:
                if ".w" in k:
                    w = model.params[k].astype(np.float64)
                    named[k] = named[k] + 2.0 * cfg.weight_decay * w
                    value += cfg.weight_decay * float(np.sum(w * w))
        return value, named, out

    def step(self, batch: Sequence[np.ndarray]) -> float:
        prepared = [prepare_example(x, self.cfg, self.rngs, self.n_central) for x in batch]
        shapes = {p[0].shape for p in prepared}
        if len(shapes) != 1:
            raise ValueError(f"batch elements differ in shape: {shapes}")
        targets = np.stack([p[0] for p in prepared])
        s0 = np.stack([p[1] for p in prepared])
        mask = SamplingMask(np.stack([p[2].lines for p in prepared]))
        value, grads, _ = self.loss_and_grads(targets, s0, mask)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {self.steps}")
        self.optimizer.step(self.model.params, grads)
        for k in self.model.params:
            if k.endswith(".lam"):
                self.model.params[k] = np.maximum(self.model.params[k], 0).astype(self.model.params[k].dtype)
        self.steps += 1
        return value

    def fit(self, dataset: Sequence[np.ndarray], test_set: Optional[Sequence[np.ndarray]] = None, test_acc=None, test_sigma2: float = 0.0) -> TrainResult:
        cfg = self.cfg
        if not dataset:
            raise ValueError("empty training set")
        result = TrainResult(self.model)
        order = self.rngs["order"]
        running = []
        acc_eval = test_acc if test_acc is not None else (cfg.acc if not isinstance(cfg.acc, (tuple, list)) else cfg.acc[1])
        for it in range(cfg.iters):
            idx = order.integers(0, len(dataset), cfg.batch)
            running.append(self.step([dataset[i] for i in idx]))
            step = it + 1
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.iters):
                test_mse = None
                if test_set:
                    test_mse = float(np.mean(evaluate_model(self.model, test_set, acc_eval, cfg.eval_seed, test_sigma2, cfg.noise_reference)[0]))
                # loss is a mean over 2 real channels; complex MSE is twice that
                scale = 2.0 if cfg.loss_reduction == "mean" else 1.0
                result.curve.append((step, scale * float(np.mean(running)), test_mse))
                log.info("step %d train %.4e test %s", step, result.curve[-1][1], test_mse)
                running = []
            if cfg.checkpoint_every and cfg.checkpoint_path and step % cfg.checkpoint_every == 0:
                save_model(self.model, f"{cfg.checkpoint_path}.step{step}")
        return result


def train_step(model: CascadeModel, batch: Sequence[np.ndarray], cfg: TrainConfig, trainer: Optional[Trainer] = None) -> float:
    """One optimisation step; pass a persistent ``trainer`` to keep Adam state."""
    trainer = trainer or Trainer(model, cfg)
    return trainer.step(batch)


def train(model: CascadeModel, dataset: Sequence[np.ndarray], cfg: TrainConfig, test_set=None, **kwargs) -> TrainResult:
    """Train ``model`` in place for ``cfg.iters`` steps."""
    return Trainer(model, cfg).fit(dataset, test_set, **kwargs)


def evaluate_model(model: CascadeModel, seqs: Sequence[np.ndarray], acc: float, seed: int = 1234, sigma2: float = 0.0, noise_reference: int = REFERENCE_PIXELS, n_central: int = 8):
    """Reconstruction and zero-filled MSE per sequence, with a fixed mask per sequence."""
    rec_err, zf_err = [], []
    for i, x in enumerate(seqs):
        mask = generate_mask(x.shape[1], x.shape[2], acc, seed + i, n_central=n_central)
        s0 = undersample(x, mask, NoiseSpec(sigma2, seed + 10_000 + i, noise_reference))
        rec_err.append(mse(reconstruct(model, s0, mask), x))
        zf_err.append(mse(zero_filled(s0), x))
    return np.array(rec_err), np.array(zf_err)


def make_noise_adaptive(model: CascadeModel, lam: float = 0.025) -> CascadeModel:
    """Copy of ``model`` with soft, trainable DC layers initialised at ``lam``."""
    cfg = replace(model.config, dc_mode="soft", train_lambda=True, lam=lam)
    params = {k: (np.array(lam, dtype=v.dtype) if k.endswith(".lam") else v.copy()) for k, v in model.params.items()}
    return CascadeModel(cfg, params)
