"""Forward model of accelerated Cartesian MRI.

Centered orthonormal Fourier transforms, seeded 1D Gaussian column
masks, zero-filled reconstruction and the data-consistency operation
used between reconstruction blocks. All functions here are pure NumPy
reference implementations; the differentiable torch counterparts used
inside the networks live in ``backbones`` and are tested against these.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError

__all__ = [
    "INFINITY",
    "SamplingMask",
    "DCConfig",
    "fft2c",
    "ifft2c",
    "gen_gaussian_mask",
    "undersample",
    "zero_filled_recon",
    "data_consistency",
    "data_consistency_kspace",
    "data_consistency_complex",
    "save_mask",
    "load_mask",
]

INFINITY = math.inf

_MASK_MAGIC = b"SIGNMSK1"


@dataclass(frozen=True)
class SamplingMask:
    """Cartesian column mask: a column is fully sampled or fully skipped."""

    columns: np.ndarray  # bool, shape (W,)
    accel: float
    center_fraction: float
    seed: int

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=bool)
        object.__setattr__(self, "columns", cols)
        if cols.ndim != 1:
            raise InvalidInputError("mask columns must be a 1D boolean vector")
        if self.accel < 1:
            raise ConfigError(f"acceleration must be >= 1, got {self.accel}")
        if not (0 <= self.center_fraction < 1):
            raise ConfigError(
                f"center_fraction must be in [0, 1), got {self.center_fraction}"
            )

    @property
    def width(self) -> int:
        return int(self.columns.shape[0])

    @property
    def n_sampled(self) -> int:
        return int(self.columns.sum())


@dataclass(frozen=True)
class DCConfig:
    """Data-consistency weighting. ``lam = INFINITY`` means hard replacement."""

    lam: float = INFINITY

    def __post_init__(self):
        if not (self.lam > 0):
            raise ConfigError(f"dc lambda must be positive, got {self.lam}")

    @property
    def hard(self) -> bool:
        return math.isinf(self.lam)


def _check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D DFT (DC component at the grid center)."""
    img = _check_finite(img, "image")
    shifted = np.fft.ifftshift(img, axes=(-2, -1))
    k = np.fft.fft2(shifted, norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`fft2c`; returns a complex array."""
    k = _check_finite(k, "k-space")
    shifted = np.fft.ifftshift(k, axes=(-2, -1))
    img = np.fft.ifft2(shifted, norm="ortho")
    return np.fft.fftshift(img, axes=(-2, -1))


def center_band(width: int, center_fraction: float) -> tuple[int, int]:
    """[lo, hi) index range of the fully-sampled central column band."""
    n_center = int(math.ceil(width * center_fraction))
    lo = (width - n_center) // 2
    return lo, lo + n_center


def gen_gaussian_mask(
    width: int,
    accel: float,
    center_fraction: float = 0.08,
    seed: int = 0,
    std_factor: float = 6.0,
) -> SamplingMask:
    """1D Gaussian column mask with a fully-sampled central band.

    Exactly ``round(width / accel)`` columns are sampled. The central
    ``ceil(width * center_fraction)`` columns are always included; the
    remaining budget is drawn without replacement with probability
    proportional to a Gaussian density (std ``width / std_factor``)
    centered on the middle column. Deterministic under ``seed``.
    """
    if width < 8:
        raise ConfigError(f"mask width must be >= 8, got {width}")
    if accel < 1:
        raise ConfigError(f"acceleration must be >= 1, got {accel}")
    if std_factor <= 0:
        raise ConfigError("std_factor must be positive")
    n_cols = int(round(width / accel))
    lo, hi = center_band(width, center_fraction)
    n_center = hi - lo
    if n_cols < n_center:
        raise ConfigError(
            f"column budget {n_cols} smaller than center band {n_center} "
            f"(width={width}, accel={accel}, center_fraction={center_fraction})"
        )
    columns = np.zeros(width, dtype=bool)
    columns[lo:hi] = True
    budget = n_cols - n_center
    if budget > 0:
        candidates = np.flatnonzero(~columns)
        center = (width - 1) / 2.0
        std = width / std_factor
        weights = np.exp(-0.5 * ((candidates - center) / std) ** 2)
        weights /= weights.sum()
        rng = np.random.default_rng(seed)
        chosen = rng.choice(candidates, size=budget, replace=False, p=weights)
        columns[chosen] = True
    return SamplingMask(
        columns=columns, accel=float(accel), center_fraction=float(center_fraction), seed=int(seed)
    )


def undersample(k: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Zero all k-space columns outside the mask; sampled columns verbatim."""
    k = np.asarray(k)
    if k.shape[-1] != mask.width:
        raise InvalidInputError(
            f"k-space width {k.shape[-1]} does not match mask width {mask.width}"
        )
    return np.where(mask.columns[None, :], k, 0)


def zero_filled_recon(k_u: np.ndarray) -> np.ndarray:
    """Magnitude of the inverse transform of (zero-filled) k-space."""
    return np.abs(ifft2c(k_u))


def _check_measured(y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[-1] != mask.width:
        raise InvalidInputError(
            f"measured k-space width {y.shape[-1]} does not match mask width {mask.width}"
        )
    off = y[..., :, ~mask.columns]
    if off.size and np.any(off != 0):
        raise InvalidInputError("measured k-space has nonzero entries off the mask")
    return y


def data_consistency_kspace(
    pred: np.ndarray, y: np.ndarray, mask: SamplingMask, cfg: DCConfig = DCConfig()
) -> np.ndarray:
    """Merged k-space of a prediction with the measurements (pre-magnitude).

    Off-mask columns keep the prediction's spectrum. On-mask columns are
    ``(k_pred + lam * y) / (1 + lam)``, which for ``lam = INFINITY``
    reduces to the measurements themselves.
    """
    y = _check_measured(y, mask)
    k_p = fft2c(pred)
    if k_p.shape != y.shape:
        raise InvalidInputError(f"shape mismatch: pred {k_p.shape} vs y {y.shape}")
    cols = mask.columns[None, :]
    if cfg.hard:
        merged = np.where(cols, y, k_p)
    else:
        merged = np.where(cols, (k_p + cfg.lam * y) / (1.0 + cfg.lam), k_p)
    return merged


def data_consistency_complex(
    pred: np.ndarray, y: np.ndarray, mask: SamplingMask, cfg: DCConfig = DCConfig()
) -> np.ndarray:
    """Complex-image data consistency (no magnitude step).

    For ``lam = INFINITY`` this operator is exactly idempotent: the
    second application finds the measured columns already in place.
    """
    return ifft2c(data_consistency_kspace(pred, y, mask, cfg))


def data_consistency(
    pred: np.ndarray, y: np.ndarray, mask: SamplingMask, cfg: DCConfig = DCConfig()
) -> np.ndarray:
    """Magnitude image after enforcing consistency with the measurements.

    The magnitude step keeps the pipeline real-valued. It discards phase,
    so consistency checks against ``y`` belong in k-space (see
    :func:`data_consistency_kspace`) rather than on this output.
    """
    return np.abs(data_consistency_complex(pred, y, mask, cfg))


def save_mask(mask: SamplingMask, path) -> None:
    """Write a mask as a 36-byte header plus one byte per column."""
    header = struct.pack(
        "<8sIddq",
        _MASK_MAGIC,
        mask.width,
        float(mask.accel),
        float(mask.center_fraction),
        int(mask.seed),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mask.columns.astype(np.uint8).tobytes())


def load_mask(path) -> SamplingMask:
    """Read a mask written by :func:`save_mask`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<8sIddq")
    if len(blob) < header_size:
        raise InvalidInputError(f"mask file {path} is truncated")
    magic, width, accel, center_fraction, seed = struct.unpack(
        "<8sIddq", blob[:header_size]
    )
    if magic != _MASK_MAGIC:
        raise InvalidInputError(f"mask file {path} has wrong magic {magic!r}")
    body = np.frombuffer(blob[header_size:], dtype=np.uint8)
    if body.shape[0] != width:
        raise InvalidInputError(
            f"mask file {path} has {body.shape[0]} columns, header says {width}"
        )
    return SamplingMask(
        columns=body.astype(bool),
        accel=accel,
        center_fraction=center_fraction,
        seed=seed,
    )
