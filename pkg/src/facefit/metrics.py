"""Masked image-similarity metrics: L1, PSNR and SSIM.

Evaluation-side only (no gradients).  SSIM follows the standard recipe:
grayscale input, 11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03,
dynamic range 1; the score is the mean of the local SSIM map over windows
whose center texel is masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    l1: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict[str, float]:
        return {"l1": self.l1, "psnr": self.psnr, "ssim": self.ssim}


def _broadcast_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    return np.broadcast_to(m, shape)


def l1_metric(a, b, mask) -> float:
    """Masked mean absolute difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = _broadcast_mask(mask, a.shape)
    denom = m.sum()
    if denom == 0:
        raise ValueError("empty mask")
    return float((m * np.abs(a - b)).sum() / denom)


def psnr(a, b, mask) -> float:
    """-10*log10 of the masked MSE; +inf when the images agree exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = _broadcast_mask(mask, a.shape)
    denom = m.sum()
    if denom == 0:
        raise ValueError("empty mask")
    mse = float((m * (a - b) ** 2).sum() / denom)
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise ValueError("expected (C,H,W) or (H,W) image")


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, mask) -> float:
    """Mean local SSIM over masked window centers (values in [-1, 1])."""
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    kernel = _gaussian_kernel()

    def local_moments(img: np.ndarray) -> np.ndarray:
        windows = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))

    mu_x = local_moments(x)
    mu_y = local_moments(y)
    xx = local_moments(x * x) - mu_x ** 2
    yy = local_moments(y * y) - mu_y ** 2
    xy = local_moments(x * y) - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    ssim_map = (((2 * mu_x * mu_y + c1) * (2 * xy + c2)) /
                ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)))

    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[0]
    half = SSIM_WINDOW // 2
    centers = m[half:h - half, half:w - half]
    denom = centers.sum()
    if denom == 0:
        raise ValueError("empty mask")
    return float((ssim_map * centers).sum() / denom)


def metric_report(a, b, mask) -> MetricReport:
    return MetricReport(l1=l1_metric(a, b, mask), psnr=psnr(a, b, mask),
                        ssim=ssim(a, b, mask))
