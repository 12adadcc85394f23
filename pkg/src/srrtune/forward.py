"""The acquisition operator H (slice motion, PSF blur, slice sampling) and its adjoint.

H is factored as ``S @ B``: ``B`` blurs the HR volume once per distinct
(orientation, PSF) group and ``S`` is a sparse trilinear sampling matrix that
reads every slice pixel, after that slice's rigid motion, from its group's
blurred volume.  The adjoint is the exact transpose of the same discrete
factors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .acquisition import LRSeries, MotionConfig, SeriesGeometry, _stream, sample_motion
from .errors import GeometryError, InputError, ShapeError
from .geometry import Grid, RigidTransform, Volume3D, trilinear_matrix
from .psf import PSFSpec, blur, world_fwhm


@dataclass(frozen=True)
class SliceDescriptor:
    series_id: str
    slice_index: int
    motion: RigidTransform
    grid: Grid
    psf: PSFSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.dims[:2]

    @property
    def size(self) -> int:
        return self.grid.dims[0] * self.grid.dims[1]


class ForwardOperator:
    """Linear map from an HR volume to the stacked pixels of every slice."""

    def __init__(self, target: Grid, descriptors: Sequence[SliceDescriptor], psf: PSFSpec | None = None):
        if not descriptors:
            raise InputError("operator needs at least one slice")
        if not np.allclose(target.axes, np.eye(3)):
            raise GeometryError("target grid must be axis-aligned")
        vs = np.asarray(target.voxel_size)
        self.target = target
        self.descriptors = tuple(descriptors)
        self.psf = psf
        self.domain_shape = target.dims

        # one blurred copy of x per distinct world-axis blur
        groups: dict[tuple, int] = {}
        slice_group = []
        for d in self.descriptors:
            key = tuple(np.round(world_fwhm(d.psf, d.grid.axes), 12)) + (d.psf.truncation,)
            slice_group.append(groups.setdefault(key, len(groups)))
        self._blurs = [(np.array(k[:3]), k[3]) for k in groups]
        self._spacing = vs

        n_vox = target.size
        coords, row_group, offsets = [], [], [0]
        for d, g in zip(self.descriptors, slice_group):
            pts = d.motion.apply(d.grid.world_coordinates().reshape(-1, 3))
            coords.append(target.world_to_index(pts))
            row_group.append(np.full(d.size, g, dtype=np.int64))
            offsets.append(offsets[-1] + d.size)
        S = trilinear_matrix(np.concatenate(coords), target.dims)
        row_group = np.concatenate(row_group)
        entry_rows = np.repeat(np.arange(S.shape[0]), np.diff(S.indptr))
        indices = S.indices.astype(np.int64) + row_group[entry_rows] * n_vox
        self._S = sp.csr_matrix((S.data, indices, S.indptr), shape=(S.shape[0], len(groups) * n_vox))
        self._ST = self._S.T.tocsr()
        self.offsets = np.asarray(offsets)
        self.shape = (int(offsets[-1]), n_vox)
        self._norm = None

    @property
    def n_slices(self) -> int:
        return len(self.descriptors)

    def _as_array(self, x) -> np.ndarray:
        if isinstance(x, Volume3D):
            if not x.grid.same_as(self.target):
                raise ShapeError("volume geometry does not match the operator's target grid")
            x = x.data
        x = np.asarray(x, dtype=float)
        if x.shape != self.domain_shape:
            raise ShapeError(f"expected array of shape {self.domain_shape}, got {x.shape}")
        return x

    def apply(self, x) -> np.ndarray:
        x = self._as_array(x)
        stacked = np.concatenate([blur(x, fwhm, self._spacing, trunc).ravel() for fwhm, trunc in self._blurs])
        return self._S @ stacked

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.shape[0]:
            raise ShapeError(f"expected {self.shape[0]} slice values, got {y.size}")
        z = (self._ST @ y).reshape(len(self._blurs), *self.domain_shape)
        out = np.zeros(self.domain_shape)
        for zg, (fwhm, trunc) in zip(z, self._blurs):
            out += blur(zg, fwhm, self._spacing, trunc)
        return out

    def adjoint_volume(self, y) -> Volume3D:
        return Volume3D(self.adjoint(y), self.target)

    def split(self, y) -> list[np.ndarray]:
        """Cut stacked data into per-slice 2-D images, in descriptor order."""
        y = np.asarray(y).ravel()
        return [y[a:b].reshape(d.shape) for a, b, d in zip(self.offsets[:-1], self.offsets[1:], self.descriptors)]

    def norm(self, iters: int = 50, seed: int = 0) -> float:
        """Operator 2-norm estimated by power iteration on HᵀH (cached for seed 0)."""
        if seed == 0 and self._norm is not None:
            return self._norm
        value = power_norm(lambda v: self.adjoint(self.apply(v)), self.domain_shape, iters, seed)
        if seed == 0:
            self._norm = value
        return value


def power_norm(normal_op, shape, iters: int = 50, seed: int = 0) -> float:
    """sqrt of the largest eigenvalue of a symmetric PSD map, by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = normal_op(v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))


def stack_data(series: Sequence[LRSeries]) -> np.ndarray:
    """Observed slices of ``series`` flattened in operator order."""
    return np.concatenate([s.slices.reshape(-1) for s in series])


def build_operator(series: Sequence[LRSeries], target: Grid, psf: PSFSpec | None = None,
                   motion_error: MotionConfig | None = None, seed: int = 0) -> ForwardOperator:
    """Assemble H for ``series`` on the HR grid ``target``.

    Slice motions come from the simulator.  With ``motion_error`` each slice's
    motion is composed with a random perturbation mimicking registration error.
    ``psf`` overrides the per-series PSF.
    """
    if not series:
        raise InputError("no series given")
    descriptors = []
    for j, s in enumerate(series):
        s_psf = psf or s.psf
        if s_psf is None:
            raise InputError(f"series {s.series_id} carries no PSF")
        motions = list(s.motion)
        if motion_error is not None:
            rng = _stream(seed, motion_error.seed, j, 3)
            perturb, _ = sample_motion(motion_error, s.n_slices, rng)
            motions = [m if p.is_identity else p.compose(m) for m, p in zip(motions, perturb)]
        geom: SeriesGeometry = s.geometry
        for k in range(s.n_slices):
            descriptors.append(SliceDescriptor(s.series_id, k, motions[k], geom.slice_grid(k), s_psf))
    return ForwardOperator(target, descriptors, psf)


class MatrixOperator:
    """Dense or sparse matrix wrapped with the operator interface used by the solvers."""

    def __init__(self, matrix, domain_shape=None):
        self.matrix = matrix
        self.domain_shape = tuple(domain_shape) if domain_shape is not None else (matrix.shape[1],)
        self.shape = matrix.shape
        self.target = None

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=float).ravel()

    def adjoint(self, y):
        return (self.matrix.T @ np.asarray(y, dtype=float).ravel()).reshape(self.domain_shape)

    def norm(self, iters: int = 50, seed: int = 0) -> float:
        return power_norm(lambda v: self.adjoint(self.apply(v)), self.domain_shape, iters, seed)


def identity_operator(shape) -> MatrixOperator:
    n = int(np.prod(shape))
    return MatrixOperator(sp.identity(n, format="csr"), shape)


def adjoint_mismatch(op, x: np.ndarray, y: np.ndarray) -> float:
    """Relative gap |<Hx, y> - <x, Hᵀy>| / (‖Hx‖‖y‖ + eps)."""
    Hx = op.apply(x)
    lhs = float(np.dot(Hx, y))
    rhs = float(np.vdot(np.asarray(x).ravel(), op.adjoint(y).ravel()))
    return abs(lhs - rhs) / (np.linalg.norm(Hx) * np.linalg.norm(y) + 1e-300)
