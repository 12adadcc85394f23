"""Voxel grids, volumes, rigid transforms and trilinear resampling.

World coordinates are in millimetres.  A voxel index ``(i, j, k)`` maps to
``origin + axes @ (voxel_size * (i, j, k))``.  Arrays are indexed ``[i, j, k]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import GeometryError, ShapeError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Geometry of a regular 3-D voxel grid (no intensities)."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        axes = np.array(self.axes, dtype=float).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"dims must be three positive integers, got {self.dims}")
        if len(vs) != 3 or min(vs) <= 0 or not np.all(np.isfinite(vs)):
            raise GeometryError(f"voxel sizes must be positive, got {self.voxel_size}")
        if not np.allclose(axes.T @ axes, np.eye(3), atol=_ORTHO_TOL):
            raise GeometryError("direction matrix must have orthonormal columns")
        axes.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "axes", axes)

    @classmethod
    def centered(cls, dims, voxel_size, axes=None) -> "Grid":
        """Grid whose centre sits at the world origin."""
        dims = np.broadcast_to(np.asarray(dims, dtype=int), (3,))
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,))
        axes = np.eye(3) if axes is None else np.asarray(axes, dtype=float)
        origin = -axes @ (vs * (dims - 1) / 2.0)
        return cls(tuple(dims), tuple(vs), tuple(origin), axes)

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index to world matrix."""
        A = np.eye(4)
        A[:3, :3] = self.axes * np.asarray(self.voxel_size)[None, :]
        A[:3, 3] = self.origin
        return A

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        """Physical length (mm) covered by voxel centres plus one voxel, per axis."""
        return np.asarray(self.dims) * np.asarray(self.voxel_size)

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return idx * np.asarray(self.voxel_size) @ self.axes.T + np.asarray(self.origin)

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float) - np.asarray(self.origin)
        return (pts @ self.axes) / np.asarray(self.voxel_size)

    def world_coordinates(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``dims + (3,)``."""
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.index_to_world(idx)

    def same_as(self, other: "Grid", atol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.axes, other.axes, atol=atol)
        )


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensities on a :class:`Grid`."""

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.grid.dims:
            raise ShapeError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def origin(self):
        return self.grid.origin

    @property
    def axes(self):
        return self.grid.axes

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(np.asarray(data).reshape(self.grid.dims), self.grid)


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """Intrinsic Z-Y-X rotation, ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.

    ``angles_deg`` is ``(rx, ry, rz)`` in degrees.
    """
    rx, ry, rz = np.deg2rad(np.asarray(angles_deg, dtype=float))
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (Euler angles, degrees) followed by translation (mm).

    Maps a world point ``p`` to ``R @ p + t``; rotations are about the world
    origin, which is the centre of grids built with :meth:`Grid.centered`.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(t) for t in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise GeometryError("rotation and translation need three components each")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise GeometryError("transform parameters must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    @property
    def is_identity(self) -> bool:
        return not any(self.rotation) and not any(self.translation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.is_identity:
            return pts
        return pts @ self.matrix.T + np.asarray(self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        R = self.matrix @ other.matrix
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform(matrix_to_euler(R), tuple(t))


def matrix_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_matrix` (away from gimbal lock)."""
    R = np.asarray(R, dtype=float)
    ry = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    rx = np.arctan2(R[2, 1], R[2, 2])
    rz = np.arctan2(R[1, 0], R[0, 0])
    return tuple(float(a) for a in np.rad2deg([rx, ry, rz]))


_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


def trilinear_matrix(coords: np.ndarray, dims: Sequence[int]) -> sp.csr_matrix:
    """Sparse matrix sampling a ``dims`` array at fractional voxel ``coords``.

    ``coords`` has shape ``(n, 3)``.  Corner voxels outside the array carry
    zero weight, i.e. the source is zero-padded.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    n = coords.shape[0]
    dims = np.asarray(dims, dtype=int)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    rows, cols, vals = [], [], []
    row_ids = np.arange(n)
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    for corner in _CORNERS:
        idx = base + corner
        w = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < dims), axis=1) & (w != 0.0)
        rows.append(row_ids[ok])
        cols.append(idx[ok] @ strides)
        vals.append(w[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, int(np.prod(dims))))


def resample(src: Volume3D, transform: RigidTransform, target: Grid,
             interpolation: str = "trilinear") -> Volume3D:
    """Sample ``src`` at ``transform(world(v))`` for every voxel ``v`` of ``target``.

    Points outside ``src`` read zero (zero-padded trilinear interpolation).
    """
    if interpolation != "trilinear":
        raise ValueError(f"unsupported interpolation {interpolation!r}")
    try:
        np.linalg.inv(src.grid.affine)
        np.linalg.inv(target.affine)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("non-invertible geometry") from exc
    pts = transform.apply(target.world_coordinates().reshape(-1, 3))
    idx = src.grid.world_to_index(pts)
    out = ndimage.map_coordinates(np.asarray(src.data, dtype=float), idx.T, order=1,
                                  mode="grid-constant", cval=0.0, prefilter=False)
    return Volume3D(out.reshape(target.dims), target)


def inner_product(a, b) -> float:
    """Euclidean inner product of two equally shaped volumes or arrays."""
    da = a.data if isinstance(a, Volume3D) else np.asarray(a)
    db = b.data if isinstance(b, Volume3D) else np.asarray(b)
    if da.shape != db.shape:
        raise ShapeError(f"shape mismatch {da.shape} vs {db.shape}")
    return float(np.vdot(da.ravel(), db.ravel()).real)
