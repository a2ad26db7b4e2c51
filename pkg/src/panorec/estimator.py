"""Estimator facade over the reconstruction pipeline.

PanoramicReconstructor wraps network construction, per-image input
normalization, and the Adam training loop behind the usual fit /
predict / score surface, so the model drops into sklearn-style tooling
(clone, get_params, grid search) without touching the file-based run
harness. One image per forward pass internally; fit still accepts the
whole stack at once.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffops import clear_caches
from .geometry import paper_geometry, toy_geometry
from .losses import PercExtractor, total_loss
from .metrics import psnr
from .model import Pipeline
from .optim import Adam
from .preprocess import normalize_scan

_SCALES = {"toy": (toy_geometry, 32), "paper": (paper_geometry, 128)}


def check_image_stack(X, shape, name="X"):
    """Coerce a sequence of panoramic images to one [n, H, W] float
    array, enforcing the per-scale grid and finiteness."""
    arrs = [np.asarray(a, dtype=np.float64) for a in X]
    if not arrs:
        raise ValueError(f"{name} is empty")
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(
                f"{name}[{i}] has shape {a.shape}, expected {shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
    return np.stack(arrs)


def check_volume_stack(y, shape, name="y"):
    """Same contract as check_image_stack for [n, H, X, Y] volumes."""
    arrs = [np.asarray(a, dtype=np.float64) for a in y]
    if not arrs:
        raise ValueError(f"{name} is empty")
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(
                f"{name}[{i}] has shape {a.shape}, expected {shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
    return np.stack(arrs)


class PanoramicReconstructor(BaseEstimator):
    """Single-view panoramic image to attenuation volume regressor.

    fit() trains from scratch each call (no warm start): images are
    range-normalized per sample, the network runs in float32, and the
    composite reconstruction loss is minimized with Adam over shuffled
    single-sample steps. score() is mean PSNR in dB against the 255
    intensity peak, so bigger is better, matching the sklearn
    convention.

    Parameters mirror the training harness defaults; all of them are
    plain constructor attributes so clone() round-trips the config.
    """

    def __init__(self, scale: str = "toy", epochs: int = 20,
                 lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 lambda_proj: float = 1e-3, lambda_perc: float = 1e-2,
                 seed: int = 0):
        self.scale = scale
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_proj = lambda_proj
        self.lambda_perc = lambda_perc
        self.seed = seed

    # ------------------------------------------------------------ internals

    def _shapes(self):
        if self.scale not in _SCALES:
            raise ValueError(f"scale must be one of {sorted(_SCALES)}, "
                             f"got {self.scale!r}")
        make_geom, rows = _SCALES[self.scale]
        geom = make_geom()
        return geom, rows, (rows, geom.W), (rows, geom.nx, geom.ny)

    def _validate_config(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValueError(f"epochs must be a positive int, "
                             f"got {self.epochs!r}")
        for field in ("lr", "lambda_proj", "lambda_perc"):
            v = getattr(self, field)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{field} must be finite and >= 0, got {v!r}")
        if self.lr == 0:
            raise ValueError("lr must be positive")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative int, "
                             f"got {self.seed!r}")

    # ------------------------------------------------------------ sklearn api

    def fit(self, X, y):
        """Train on image stack X against volume stack y.

        X: sequence of [H, W] panoramic images (raw intensity scale).
        y: sequence of [H, X, Y] target volumes in [0, 255].
        """
        self._validate_config()
        geom, rows, px_shape, vol_shape = self._shapes()
        X = check_image_stack(X, px_shape)
        y = check_volume_stack(y, vol_shape)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")

        inputs = [normalize_scan(a).astype(np.float32) for a in X]
        targets = [a.astype(np.float32) for a in y]

        pipe = Pipeline(geom, rows=rows,
                        rng=np.random.default_rng(self.seed))
        pipe.astype(np.float32)
        ext = PercExtractor().astype(np.float32)
        opt = Adam(pipe.params(), lr=self.lr,
                   beta1=self.beta1, beta2=self.beta2)

        curve = []
        # denormal stalls dominate the step time otherwise; scoped so
        # float64 callers keep ieee subnormals
        torch.set_flush_denormal(True)
        try:
            for epoch in range(1, self.epochs + 1):
                order = np.random.default_rng(
                    [self.seed, epoch]).permutation(len(inputs))
                running = 0.0
                for j in order:
                    out = pipe.forward(inputs[j])
                    value, grad, _ = total_loss(
                        out.V, targets[j], ext,
                        self.lambda_proj, self.lambda_perc)
                    if not np.isfinite(value):
                        raise FloatingPointError(
                            f"loss diverged at epoch {epoch}")
                    pipe.backward(grad)
                    opt.step()
                    opt.zero_grad()
                    running += value
                curve.append(running / len(inputs))
        finally:
            torch.set_flush_denormal(False)

        self.pipeline_ = pipe
        self.loss_curve_ = curve
        self.n_iter_ = self.epochs
        self.image_shape_ = px_shape
        self.volume_shape_ = vol_shape
        return self

    def predict(self, X):
        """Reconstruct volumes for image stack X, [n, H, X, Y] float32."""
        check_is_fitted(self, "pipeline_")
        X = check_image_stack(X, self.image_shape_)
        preds = []
        for a in X:
            x = normalize_scan(a).astype(np.float32)
            preds.append(self.pipeline_.forward(x).V)
            clear_caches(self.pipeline_)
        return np.stack(preds)

    def score(self, X, y):
        """Mean PSNR (dB, peak 255) of predict(X) against y."""
        check_is_fitted(self, "pipeline_")
        y = check_volume_stack(y, self.volume_shape_)
        preds = self.predict(X)
        if len(preds) != len(y):
            raise ValueError(f"X has {len(preds)} samples but y has {len(y)}")
        return float(np.mean([psnr(p.astype(np.float64), g)
                              for p, g in zip(preds, y)]))
