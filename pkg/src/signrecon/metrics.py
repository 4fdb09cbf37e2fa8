"""Reconstruction quality metrics: PSNR and SSIM."""

from __future__ import annotations

import math

import numpy as np
from skimage.metrics import structural_similarity

from .errors import ConfigError, InvalidInputError

__all__ = ["PSNR_CAP_DB", "psnr", "ssim"]

PSNR_CAP_DB = 100.0

SSIM_WIN_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report the
    100 dB cap so tables stay numeric."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise InvalidInputError(f"shape mismatch: {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * math.log10(data_range**2 / mse)
    return min(value, PSNR_CAP_DB)


def ssim(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise InvalidInputError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if min(ref.shape) < SSIM_WIN_SIZE:
        raise ConfigError(
            f"images must be at least {SSIM_WIN_SIZE}x{SSIM_WIN_SIZE} for SSIM, got {ref.shape}"
        )
    return float(
        structural_similarity(
            ref,
            test,
            win_size=SSIM_WIN_SIZE,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            K1=SSIM_K1,
            K2=SSIM_K2,
            use_sample_covariance=False,
            data_range=data_range,
        )
    )
