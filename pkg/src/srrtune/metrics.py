"""Reference-based image quality: masked PSNR and 3-D Gaussian-window SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import MaskError, ShapeError
from .geometry import Volume3D

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIDTH = 11


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mask_voxels: int
    data_range: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)

    def to_dict(self) -> dict:
        return {
            "psnr_db": None if self.psnr_infinite else self.psnr,
            "psnr_infinite": self.psnr_infinite,
            "ssim": self.ssim,
            "mask_voxels": self.mask_voxels,
            "data_range": self.data_range,
        }


def evaluation_mask(support: np.ndarray, dilation: int = 3) -> np.ndarray:
    """Non-zero support of the reference phantom dilated by ``dilation`` voxels."""
    support = np.asarray(support, dtype=bool)
    if dilation <= 0:
        return support.copy()
    return ndimage.binary_dilation(support, iterations=dilation)


def _arrays(test, ref, mask):
    a = test.data if isinstance(test, Volume3D) else np.asarray(test, dtype=float)
    b = ref.data if isinstance(ref, Volume3D) else np.asarray(ref, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError("mask shape does not match the images")
    if not m.any():
        raise MaskError("evaluation mask is empty")
    return a.astype(float, copy=False), b.astype(float, copy=False), m


def data_range(ref, mask=None) -> float:
    _, b, m = _arrays(ref, ref, mask)
    return float(b[m].max())


def psnr(test, ref, mask=None) -> float:
    """10·log10(DR² / MSE) over the mask, DR = max of ``ref`` inside the mask.

    Returns ``math.inf`` when the images agree exactly on the mask.
    """
    a, b, m = _arrays(test, ref, mask)
    dr = float(b[m].max())
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dr * dr / mse)


def gaussian_window(sigma: float = SSIM_SIGMA, width: int = SSIM_WIDTH) -> np.ndarray:
    r = width // 2
    w = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return w / w.sum()


def _filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    for ax in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=ax, mode="reflect")
    return x


def ssim_map(a: np.ndarray, b: np.ndarray, dr: float, sigma=SSIM_SIGMA, width=SSIM_WIDTH,
             k1=SSIM_K1, k2=SSIM_K2) -> np.ndarray:
    """Local SSIM with Gaussian-weighted statistics (``b`` is the reference)."""
    w = gaussian_window(sigma, width)
    c1 = (k1 * dr) ** 2
    c2 = (k2 * dr) ** 2
    mu_a = _filter(a, w)
    mu_b = _filter(b, w)
    var_a = _filter(a * a, w) - mu_a * mu_a
    var_b = _filter(b * b, w) - mu_b * mu_b
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(test, ref, mask=None, sigma: float = SSIM_SIGMA, width: int = SSIM_WIDTH,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean 3-D SSIM over the mask; the window is a separable Gaussian."""
    a, b, m = _arrays(test, ref, mask)
    if np.array_equal(a, b):
        return 1.0
    dr = float(b[m].max())
    return float(np.mean(ssim_map(a, b, dr, sigma, width, k1, k2)[m]))


def compare_reconstructions(a, b, mask=None) -> MetricReport:
    """PSNR and SSIM of ``a`` against ``b``; ``b`` fixes the data range, so the
    report is not symmetric in its arguments."""
    _, bb, m = _arrays(a, b, mask)
    return MetricReport(psnr(a, b, m), ssim(a, b, m), int(m.sum()), float(bb[m].max()))
