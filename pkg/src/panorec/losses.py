"""Composite volume objective: voxel MSE, projection (MIP) fidelity, and
a frozen-extractor perceptual term.

All three terms are computed in the native [0,255] intensity domain and
return their gradient with respect to the predicted volume alongside the
value; the weighted sum is L = L_mse + lam1 * L_proj + lam2 * L_perc.
The projection term compares maximum-intensity projections over the three
anatomical views, so its gradient lands only on voxels that achieve a
per-pixel maximum (ties broken toward the lowest index, matching the MIP
subgradient convention used everywhere else).
"""

import numpy as np

from .conv import Conv2d
from .geometry import MIP_AXES, mip, mip_with_argmax, mip_vjp
from .diffops import Op

LAMBDA_PROJ = 1e-3
LAMBDA_PERC = 1e-2
VIEWS = ("axial", "sagittal", "coronal")


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def mse_loss(pred: np.ndarray, gt: np.ndarray):
    """Mean squared voxel difference and its gradient in pred."""
    _check_pair(pred, gt)
    d = pred - gt
    n = d.size
    return float(np.mean(d * d)), (2.0 / n) * d


def proj_loss(pred: np.ndarray, gt: np.ndarray):
    """Sum over the three views of the summed squared MIP differences."""
    _check_pair(pred, gt)
    loss = 0.0
    grad = np.zeros_like(pred)
    for view in VIEWS:
        p, idx = mip_with_argmax(pred, view)
        d = p - mip(gt, view)
        loss += float(np.sum(d * d))
        grad += mip_vjp(2.0 * d, idx, view, pred.shape)
    return loss, grad


class PercExtractor(Op):
    """Frozen random conv stack standing in for a pretrained backbone.

    Four 3x3 convs (1->8->16->32->64), stride 2 after the first, ReLU
    throughout; features are read out after layers 2 and 4 so the
    distance mixes two scales. Weights come from a fixed seed and are
    never updated; inputs in [0,255] are divided by 255 on the way in.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        widths = (1, 8, 16, 32, 64)
        strides = (1, 2, 2, 2)
        self.layers = [Conv2d(widths[i], widths[i + 1], stride=strides[i],
                              rng=rng, name=f"perc{i + 1}")
                       for i in range(4)]

    def params(self):
        return []  # frozen: expose nothing to the optimizer

    def features(self, img: np.ndarray, keep: bool = True):
        """img: [H,W] in [0,255] -> (f2, f4).

        keep=False discards the caches this pass left behind (for
        reference images that never see a backward)."""
        x = (img / 255.0)[None]
        acts = []
        for layer in self.layers:
            x = layer.forward(x)
            x = np.maximum(x, 0.0)
            acts.append(x)
        if keep:
            self.save((img.dtype, acts))
        else:
            for layer in self.layers:
                layer.saved()
        return acts[1], acts[3]

    def backward(self, g2, g4):
        """Gradient of (f2, f4) cotangents back to the [H,W] input."""
        dtype, acts = self.saved()[0]
        g = g4 * (acts[3] > 0)
        g = self.layers[3].backward(g)
        g = g * (acts[2] > 0)
        g = self.layers[2].backward(g)
        g = (g + g2) * (acts[1] > 0)
        g = self.layers[1].backward(g)
        g = g * (acts[0] > 0)
        g = self.layers[0].backward(g)
        return (g[0] / 255.0).astype(dtype, copy=False)


def perc_loss(pred: np.ndarray, gt: np.ndarray, extractor: PercExtractor):
    """Squared feature distance over the three MIP views, two scales each."""
    _check_pair(pred, gt)
    loss = 0.0
    grad = np.zeros_like(pred)
    for view in VIEWS:
        p, idx = mip_with_argmax(pred, view)
        gt2, gt4 = extractor.features(mip(gt, view), keep=False)
        fp2, fp4 = extractor.features(p)
        d2, d4 = fp2 - gt2, fp4 - gt4
        loss += float(np.sum(d2 * d2) + np.sum(d4 * d4))
        gimg = extractor.backward(2.0 * d2, 2.0 * d4)
        grad += mip_vjp(gimg, idx, view, pred.shape)
    return loss, grad


def total_loss(pred: np.ndarray, gt: np.ndarray, extractor: PercExtractor,
               lam1: float = LAMBDA_PROJ, lam2: float = LAMBDA_PERC):
    """Weighted composite; returns (value, grad_pred, per-term dict)."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be non-negative")
    lm, gm = mse_loss(pred, gt)
    lp, gp = proj_loss(pred, gt)
    lf, gf = perc_loss(pred, gt, extractor)
    value = lm + lam1 * lp + lam2 * lf
    grad = gm + lam1 * gp + lam2 * gf
    return value, grad, {"mse": lm, "proj": lp, "perc": lf}
