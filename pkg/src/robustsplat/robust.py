"""Residual tracking and robust inlier masking.

Covers the per-pixel residual image, the discounted histogram that estimates
streaming residual quantiles (the generalized median), the thresholded +
3x3-vote robust filter mask, cluster majority voting, and the staircase
warm-up scheduler with Bernoulli mask sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

HISTOGRAM_BUCKETS = 1000
BUCKET_WIDTH = 1e-3
HISTOGRAM_DISCOUNT = 0.99

_BOX_3X3 = np.full((3, 3), 1.0 / 9.0)


def residual(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean absolute color error per pixel, in [0, 1]."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    return np.abs(rendered - target).mean(axis=2)


@dataclass
class ResidualHistogram:
    """Discounted bucket populations over [0, 1); the last bucket absorbs
    overflow. Tracks a moving residual distribution in constant memory."""
    buckets: np.ndarray = field(
        default_factory=lambda: np.zeros(HISTOGRAM_BUCKETS))
    discount: float = HISTOGRAM_DISCOUNT

    @property
    def total(self) -> float:
        return float(self.buckets.sum())

    @property
    def ready(self) -> bool:
        return self.total > 0.0

    def update(self, res: np.ndarray) -> None:
        """Discount all buckets, then add weight 1 per pixel to its bucket."""
        self.buckets *= self.discount
        idx = np.floor(np.asarray(res, dtype=np.float64).ravel() / BUCKET_WIDTH)
        idx = np.clip(idx, 0, HISTOGRAM_BUCKETS - 1).astype(np.int64)
        np.add.at(self.buckets, idx, 1.0)

    def quantile(self, tau: float):
        """Upper edge of the first bucket where the CDF reaches tau.

        Returns None while the histogram is empty (not ready); callers then
        treat every pixel as an inlier.
        """
        total = self.total
        if total <= 0.0:
            return None
        cdf = np.cumsum(self.buckets)
        i = int(np.searchsorted(cdf, tau * total))
        i = min(i, HISTOGRAM_BUCKETS - 1)
        return (i + 1) * BUCKET_WIDTH


def histogram_update(hist: ResidualHistogram, res: np.ndarray) -> ResidualHistogram:
    hist.update(res)
    return hist


def histogram_quantile(hist: ResidualHistogram, tau: float):
    return hist.quantile(tau)


def robust_filter_mask(res: np.ndarray, rho: float) -> np.ndarray:
    """Thresholded inlier indicator smoothed by a 3x3 majority vote.

    omega = 1{res <= rho}; mask = 1{box3x3(omega) >= 0.5} with zero padding
    (the normalizer stays 1/9 at borders). 1 marks an inlier.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    omega = (np.asarray(res, dtype=np.float64) <= rho).astype(np.float64)
    votes = convolve(omega, _BOX_3X3, mode='constant', cval=0.0)
    return (votes >= 0.5).astype(np.float64)


def cluster_vote_mask(labels: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Per-cluster inlier probability = inlier fraction; a cluster's pixels all
    become inliers iff that probability exceeds 0.5 (strict)."""
    labels = np.asarray(labels)
    pixel_mask = np.asarray(pixel_mask, dtype=np.float64)
    if labels.shape != pixel_mask.shape:
        raise ValueError("cluster labels and mask shapes differ")
    n = int(labels.max()) + 1
    size = np.bincount(labels.ravel(), minlength=n)
    inliers = np.bincount(labels.ravel(), weights=pixel_mask.ravel(), minlength=n)
    keep = (inliers / np.maximum(size, 1)) > 0.5
    return keep[labels].astype(np.float64)


@dataclass
class WarmupSchedule:
    """Staircase exponential warm-up alpha = exp(-beta1 * floor((t+1)/beta2))."""
    beta1: float = 3e-4
    beta2: float = 1.5

    def alpha(self, t: int) -> float:
        if t < 0:
            raise ValueError("iteration must be non-negative")
        return float(np.exp(-self.beta1 * np.floor((t + 1) / self.beta2)))


def alpha_schedule(sched: WarmupSchedule, t: int) -> float:
    return sched.alpha(t)


def scheduled_sample(mask: np.ndarray, alpha: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Bernoulli mask sampling: pixel ~ B(alpha * 1 + (1 - alpha) * mask)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mask = np.asarray(mask, dtype=np.float64)
    p = alpha + (1.0 - alpha) * mask
    return (rng.random(mask.shape) < p).astype(np.float64)
