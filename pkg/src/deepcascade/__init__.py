"""Cascaded CNN reconstruction of undersampled dynamic (cine) MRI.

A small reverse-mode autodiff core drives residual CNN blocks interleaved with
k-space data-consistency layers, optionally fed data-shared inputs.
"""

from .cascade import CascadeConfig, CascadeModel, build, count_params, estimate_memory, grow_cascade, load_model, reconstruct, save_model
from .estimator import CascadeReconstructor
from .kspace import NoiseSpec, SamplingMask, dft2, generate_mask, idft2, undersample, zero_filled
from .metrics import EvalReport, evaluate, mse, psnr
from .phantom import PhantomSpec, default_spec, generate, make_dataset, split_dataset
from .training import AugConfig, TrainConfig, Trainer, evaluate_model, make_noise_adaptive, train

__version__ = "0.1.0"

__all__ = [
    "AugConfig",
    "CascadeConfig",
    "CascadeModel",
    "CascadeReconstructor",
    "EvalReport",
    "NoiseSpec",
    "PhantomSpec",
    "SamplingMask",
    "TrainConfig",
    "Trainer",
    "build",
    "count_params",
    "default_spec",
    "dft2",
    "estimate_memory",
    "evaluate",
    "evaluate_model",
    "generate",
    "generate_mask",
    "grow_cascade",
    "idft2",
    "load_model",
    "make_dataset",
    "make_noise_adaptive",
    "mse",
    "psnr",
    "reconstruct",
    "save_model",
    "split_dataset",
    "train",
    "undersample",
    "zero_filled",
]
