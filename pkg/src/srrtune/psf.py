"""Separable Gaussian point-spread functions on isotropic axis-aligned grids."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

KINDS = ("gaussian-separable",)


@dataclass(frozen=True)
class PSFSpec:
    """Gaussian blur given as FWHM (mm) along (in-plane u, in-plane v, slice normal)."""

    fwhm: tuple[float, float, float]
    kind: str = "gaussian-separable"
    truncation: float = 3.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown PSF kind {self.kind!r}")
        fwhm = tuple(float(f) for f in self.fwhm)
        if len(fwhm) != 3 or min(fwhm) <= 0:
            raise ValueError("PSF FWHM must be three positive lengths")
        if self.truncation < 2:
            raise ValueError("truncation must be at least 2 sigma")
        object.__setattr__(self, "fwhm", fwhm)

    @classmethod
    def for_sequence(cls, seq, truncation: float = 3.0) -> "PSFSpec":
        return cls((seq.in_plane, seq.in_plane, seq.slice_thickness), truncation=truncation)

    @classmethod
    def delta(cls) -> "PSFSpec":
        """A PSF narrower than any practical voxel; reduces to point sampling."""
        return cls((1e-6, 1e-6, 1e-6))


def gaussian_kernel(fwhm_mm: float, spacing_mm: float, truncation: float = 3.0) -> np.ndarray:
    """Normalised, symmetric taps of a Gaussian sampled at ``spacing_mm``.

    Taps are kept for offsets within ``truncation`` standard deviations.
    """
    sigma = fwhm_mm * FWHM_TO_SIGMA / spacing_mm
    radius = int(np.floor(truncation * sigma + 1e-12))
    if radius == 0:
        return np.ones(1)
    d = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (d / sigma) ** 2)
    return k / k.sum()


def world_fwhm(psf: PSFSpec, frame: np.ndarray) -> np.ndarray:
    """Express slice-frame FWHM along the world axes.

    ``frame`` holds the slice-frame unit vectors (u, v, normal) as columns and
    must be a signed permutation of the identity.
    """
    perm = np.abs(np.round(frame)).astype(int)
    if not np.allclose(np.abs(frame), perm):
        raise ValueError("slice frame must be aligned with the grid axes")
    return perm @ np.asarray(psf.fwhm)


@lru_cache(maxsize=64)
def blur_matrix(n: int, fwhm_mm: float, spacing_mm: float, truncation: float = 3.0) -> np.ndarray:
    """Dense ``n x n`` zero-padded convolution matrix of :func:`gaussian_kernel`; symmetric."""
    k = gaussian_kernel(fwhm_mm, spacing_mm, truncation)
    r = k.size // 2
    M = np.zeros((n, n))
    for off, w in zip(range(-r, r + 1), k):
        M += w * np.eye(n, k=off)
    M.setflags(write=False)
    return M


def blur(data: np.ndarray, fwhm_xyz, spacing, truncation: float = 3.0) -> np.ndarray:
    """Separable zero-padded Gaussian blur along the three array axes.

    The map is a product of symmetric matrices acting on commuting axes, so it
    is its own adjoint.
    """
    out = np.asarray(data, dtype=float)
    nx, ny, nz = out.shape
    for axis in range(3):
        if gaussian_kernel(fwhm_xyz[axis], spacing[axis], truncation).size == 1:
            continue
        M = blur_matrix(out.shape[axis], float(fwhm_xyz[axis]), float(spacing[axis]), float(truncation))
        if axis == 0:
            out = (M @ out.reshape(nx, -1)).reshape(nx, ny, nz)
        elif axis == 1:
            out = np.matmul(M, out)
        else:
            out = out @ M
    return out
