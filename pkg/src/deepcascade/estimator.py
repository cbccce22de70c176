"""scikit-learn style front end for training and applying a cascade."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cascade import CascadeConfig, build, grow_cascade, reconstruct
from .training import AugConfig, TrainConfig, Trainer, evaluate_model
from .validation import check_mask, check_sequence, check_sequences

__all__ = ["CascadeReconstructor"]


class CascadeReconstructor(BaseEstimator):
    """Learned reconstruction of undersampled Cartesian cine MRI.

    ``fit`` takes fully sampled complex sequences and trains on simulated
    acquisitions with freshly drawn masks. ``predict`` maps zero-filled k-space
    plus its mask to an image sequence.

    Parameters
    ----------
    n_d, n_c, n_f : int
        Convolutions per subnetwork, number of subnetworks, filters per layer.
    data_sharing : bool
        Feed data-shared images (n_adj = 0..5) to each subnetwork.
    dynamic : bool
        3D (x, y, t) kernels; with False every frame is reconstructed alone.
    dc_mode : {"hard", "soft"}
        Exact replacement or lambda-weighted blending of acquired k-space.
    acc : float or (float, float)
        Training acceleration, fixed or sampled from a range.
    noise_range : (float, float) or None
        Range of noise power drawn per training example.
    augment : bool
        Random rigid plus elastic augmentation during training.
    warm_start : bool
        Continue training the existing model on repeated ``fit`` calls.
    """

    def __init__(
        self,
        n_d=5,
        n_c=5,
        n_f=64,
        kernel_size=3,
        data_sharing=False,
        dynamic=True,
        dc_mode="hard",
        lam=0.025,
        train_lambda=False,
        acc=4.0,
        n_iter=1000,
        learning_rate=1e-4,
        beta1=0.9,
        beta2=0.999,
        weight_decay=1e-7,
        batch_size=1,
        noise_range=None,
        patch_width=None,
        augment=False,
        n_central=8,
        dtype="float32",
        warm_start=False,
        random_state=0,
    ):
        self.n_d = n_d
        self.n_c = n_c
        self.n_f = n_f
        self.kernel_size = kernel_size
        self.data_sharing = data_sharing
        self.dynamic = dynamic
        self.dc_mode = dc_mode
        self.lam = lam
        self.train_lambda = train_lambda
        self.acc = acc
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.noise_range = noise_range
        self.patch_width = patch_width
        self.augment = augment
        self.n_central = n_central
        self.dtype = dtype
        self.warm_start = warm_start
        self.random_state = random_state

    def _model_config(self) -> CascadeConfig:
        return CascadeConfig(
            n_d=self.n_d,
            n_c=self.n_c,
            n_f=self.n_f,
            kernel_size=self.kernel_size,
            dynamic=self.dynamic,
            data_sharing=self.data_sharing,
            dc_mode=self.dc_mode,
            lam=self.lam,
            train_lambda=self.train_lambda,
            dtype=self.dtype,
            seed=int(self.random_state or 0),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
            batch=self.batch_size,
            iters=self.n_iter,
            acc=self.acc,
            noise_range=self.noise_range,
            patch_width=self.patch_width,
            aug=AugConfig() if self.augment else None,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        """Train on fully sampled sequences ``X`` (list or array of (n_x, n_y, n_t))."""
        seqs = check_sequences(X)
        if not (self.warm_start and hasattr(self, "model_")):
            self.model_ = build(self._model_config())
        trainer = Trainer(self.model_, self._train_config(), self.n_central)
        self.loss_curve_ = [trainer.step([seqs[i] for i in trainer.rngs["order"].integers(0, len(seqs), self.batch_size)]) for _ in range(self.n_iter)]
        self.n_features_in_ = int(np.prod(seqs[0].shape))
        return self

    def grow(self):
        """Append one subnetwork to the fitted cascade (greedy depth training)."""
        check_is_fitted(self, "model_")
        self.model_ = grow_cascade(self.model_)
        self.n_c = self.model_.n_c
        return self

    def predict(self, kspace, mask, return_stages=False):
        """Reconstruct from zero-filled k-space ``(n_x, n_y, n_t)`` or a batch of them."""
        check_is_fitted(self, "model_")
        kspace = np.asarray(kspace)
        if kspace.ndim not in (3, 4):
            raise ValueError(f"k-space must be (n_x, n_y, n_t) or batched, got {kspace.shape}")
        check_sequence(kspace.reshape(-1, *kspace.shape[-2:]), "kspace")
        mask = check_mask(mask, kspace.shape)
        return reconstruct(self.model_, kspace, mask, return_stages=return_stages)

    def score(self, X, y=None, acc=None, seed=1234):
        """Negative mean reconstruction MSE on simulated fixed-mask acquisitions of ``X``."""
        check_is_fitted(self, "model_")
        seqs = check_sequences(X)
        acc = acc if acc is not None else (self.acc if np.isscalar(self.acc) else max(self.acc))
        rec, _ = evaluate_model(self.model_, seqs, acc, seed, n_central=self.n_central)
        return -float(np.mean(rec))
