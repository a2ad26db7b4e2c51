"""Intensity normalization: percentile clip, global z-score, [0,255] map.

The same pipeline runs on volumes and panoramic images, with per-scan
statistics. Percentiles use linear interpolation between closest
ranks; std is the population standard deviation; degenerate constant
inputs map to zeros rather than dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["IntensityStats", "percentile_clip", "zscore", "rescale_255",
           "normalize_scan"]

_EPS_STD = 1e-12


@dataclass
class IntensityStats:
    p_low: float
    p_high: float
    mean: float
    std: float


def compute_stats(v: np.ndarray, low: float = 1.0,
                  high: float = 99.9) -> IntensityStats:
    if v.size == 0:
        raise ValueError("empty volume")
    p_low, p_high = np.percentile(v, [low, high])
    return IntensityStats(float(p_low), float(p_high),
                          float(v.mean()), float(v.std()))


def percentile_clip(v: np.ndarray, low: float = 1.0,
                    high: float = 99.9) -> np.ndarray:
    """Truncate to the [low, high] percentile range of this scan."""
    if v.size == 0:
        raise ValueError("empty volume")
    p_low, p_high = np.percentile(v, [low, high])
    return np.clip(v, p_low, p_high)


def zscore(v: np.ndarray) -> np.ndarray:
    """Subtract global mean, divide by global population std."""
    if v.size == 0:
        raise ValueError("empty volume")
    sd = v.std()
    if sd < _EPS_STD:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def rescale_255(v: np.ndarray) -> np.ndarray:
    """Map min→0, max→255 linearly; constant input → zeros."""
    if v.size == 0:
        raise ValueError("empty volume")
    lo, hi = v.min(), v.max()
    if hi - lo < _EPS_STD:
        return np.zeros_like(v)
    return (v - lo) * (255.0 / (hi - lo))


def normalize_scan(v: np.ndarray, low: float = 1.0,
                   high: float = 99.9) -> np.ndarray:
    """clip → zscore → rescale, the full per-scan pipeline."""
    return rescale_255(zscore(percentile_clip(v, low, high)))
