"""Image-quality metrics: SSIM against a reference and the reference-free FOM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from .errors import DegenerateSignalError, DimensionError
from .grid import _as_array

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricResult:
    ssim: float | None = None
    fom_db: float | None = None
    ssim_map: np.ndarray | None = None


def _crop(a, region):
    a = np.asarray(_as_array(a), dtype=np.float64)
    return a if region is None else a[region]


def ssim(x, ref, region=None, data_range: float | None = None, full: bool = False):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5).

    The dynamic range defaults to ``max(ref) - min(ref)`` over ``region``.
    With ``full=True`` the per-pixel map is returned as well.
    """
    a, b = _crop(x, region), _crop(ref, region)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min())
        if data_range == 0:
            raise DegenerateSignalError("reference is constant; SSIM range undefined")
    out = structural_similarity(a, b, data_range=data_range, gaussian_weights=True,
                                sigma=SSIM_SIGMA, use_sample_covariance=False,
                                K1=SSIM_K1, K2=SSIM_K2, full=full)
    if full:
        return float(out[0]), out[1]
    return float(out)


def fom(x, region=None) -> float:
    """``20 log10(peak / std)`` in dB, population standard deviation."""
    a = _crop(x, region)
    sd = float(np.std(a))
    if sd == 0:
        raise DegenerateSignalError("image is constant; FOM undefined")
    return float(20.0 * np.log10(a.max() / sd))


def negative_mass_fraction(x) -> float:
    a = np.asarray(_as_array(x))
    total = float(np.sum(np.abs(a)))
    return float(np.sum(np.abs(np.minimum(a, 0.0)))) / total if total > 0 else 0.0


def scanline(x, index: int | None = None, axis: int = 1, region=None) -> np.ndarray:
    """Intensity profile through the image, along ``x`` (axis=1 fixes iy)."""
    a = _crop(x, region)
    if axis == 1:
        index = a.shape[1] // 2 if index is None else index
        return a[:, index].copy()
    index = a.shape[0] // 2 if index is None else index
    return a[index, :].copy()
