"""Full-reference quality metrics in the [0,255] intensity domain.

PSNR follows the textbook definition with a +inf sentinel for exact
matches. SSIM uses non-overlapping 8x8 windows with population moments
(a deterministic variant of the usual Gaussian-window form; the constants
keep their standard peak-relative values). A volume's SSIM is the mean
over its slices along the axial projection axis.
"""

import csv

import numpy as np

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 255.0) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _window_view(img: np.ndarray, w: int) -> np.ndarray:
    """[H,W] -> [nh, nw, w, w]; partial edge windows are dropped."""
    nh, nw = img.shape[0] // w, img.shape[1] // w
    return (img[:nh * w, :nw * w]
            .reshape(nh, w, nw, w).swapaxes(1, 2))


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = SSIM_WINDOW,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2:
        raise ValueError("ssim expects 2D images")
    if min(pred.shape) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    x = _window_view(pred.astype(np.float64), window)
    y = _window_view(gt.astype(np.float64), window)
    mx = x.mean(axis=(2, 3))
    my = y.mean(axis=(2, 3))
    vx = x.var(axis=(2, 3))
    vy = y.var(axis=(2, 3))
    cov = ((x - mx[..., None, None]) * (y - my[..., None, None])
           ).mean(axis=(2, 3))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim_volume(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM over the slices stacked along the axial (last) axis."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ValueError("expected 3D volumes")
    return float(np.mean([ssim(pred[:, :, d], gt[:, :, d])
                          for d in range(pred.shape[2])]))


def write_metric_report(path, rows):
    """rows: iterable of (sample_id, psnr_db, ssim, perc_dist)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "psnr_db", "ssim", "perc_dist"])
        for sample_id, p, s, d in rows:
            writer.writerow([sample_id, f"{p:.6f}", f"{s:.6f}", f"{d:.6f}"])
