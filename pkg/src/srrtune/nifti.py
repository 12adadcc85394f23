"""Minimal single-file NIfTI-1 (.nii / .nii.gz) reader and writer.

Supports float32, float64 and int16 voxels.  The header's float32 affine is
complemented by a comment extension carrying the float64 geometry so that
volumes round-trip at sub-micrometre precision; other readers ignore it.
"""
from __future__ import annotations

import contextlib
import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, NiftiError, TruncatedFileError, UnsupportedDatatypeError
from .geometry import Grid, Volume3D

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
ECODE_COMMENT = 6
_EXT_KEY = "srrtune_geometry"

DATATYPES = {
    4: np.dtype("int16"),
    16: np.dtype("float32"),
    64: np.dtype("float64"),
}
_CODES = {v: k for k, v in DATATYPES.items()}


@contextlib.contextmanager
def _open(path: Path, mode: str):
    if path.suffix != ".gz":
        with open(path, mode) as fh:
            yield fh
    elif "w" in mode:
        # no embedded name or mtime, so compressed output is byte-reproducible
        with open(path, mode) as raw, gzip.GzipFile(filename="", mode=mode, fileobj=raw, mtime=0) as fh:
            yield fh
    else:
        with gzip.open(path, mode) as fh:
            yield fh


def _quaternion(R: np.ndarray):
    """Quaternion (b, c, d) and qfac of a proper/improper rotation."""
    qfac = 1.0
    if np.linalg.det(R) < 0:
        R = R.copy()
        R[:, 2] *= -1
        qfac = -1.0
    a = 1.0 + R[0, 0] + R[1, 1] + R[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (R[2, 1] - R[1, 2]) / a
        c = 0.25 * (R[0, 2] - R[2, 0]) / a
        d = 0.25 * (R[1, 0] - R[0, 1]) / a
    else:
        xd = 1.0 + R[0, 0] - (R[1, 1] + R[2, 2])
        yd = 1.0 + R[1, 1] - (R[0, 0] + R[2, 2])
        zd = 1.0 + R[2, 2] - (R[0, 0] + R[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (R[0, 1] + R[1, 0]) / b
            d = 0.25 * (R[0, 2] + R[2, 0]) / b
            a = 0.25 * (R[2, 1] - R[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (R[0, 1] + R[1, 0]) / c
            d = 0.25 * (R[1, 2] + R[2, 1]) / c
            a = 0.25 * (R[0, 2] - R[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (R[0, 2] + R[2, 0]) / d
            c = 0.25 * (R[1, 2] + R[2, 1]) / d
            a = 0.25 * (R[1, 0] - R[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


def _quaternion_matrix(b, c, d, qfac) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    R[:, 2] *= qfac
    return R


def _extension(grid: Grid) -> bytes:
    payload = json.dumps({_EXT_KEY: {
        "voxel_size": list(grid.voxel_size),
        "origin": list(grid.origin),
        "axes": grid.axes.tolist(),
    }}).encode()
    esize = 8 + len(payload)
    esize += (-esize) % 16
    return struct.pack("<ii", esize, ECODE_COMMENT) + payload.ljust(esize - 8, b"\x00")


def encode_header(grid: Grid, dtype: np.dtype, vox_offset: int, description: str = "") -> bytes:
    code = _CODES[np.dtype(dtype)]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<hhh", hdr, 70, code, np.dtype(dtype).itemsize * 8, 0)
    b, c, d, qfac = _quaternion(grid.axes)
    struct.pack_into("<8f", hdr, 76, qfac, *grid.voxel_size, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, float(vox_offset), 1.0, 0.0)
    hdr[123] = 2  # NIFTI_UNITS_MM
    hdr[148:148 + 80] = description.encode()[:79].ljust(80, b"\x00")
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, b, c, d, *grid.origin)
    A = grid.affine
    struct.pack_into("<12f", hdr, 280, *A[0], *A[1], *A[2])
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_volume(volume: Volume3D, path, dtype=None, description: str = "srrtune") -> None:
    """Write ``volume`` as a single-file NIfTI-1 image (gzip if the name ends in .gz)."""
    path = Path(path)
    data = np.asarray(volume.data)
    if dtype is None:
        dtype = np.int16 if np.issubdtype(data.dtype, np.integer) else np.float64
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {dtype}")
    ext = _extension(volume.grid)
    vox_offset = HEADER_SIZE + 4 + len(ext)
    header = encode_header(volume.grid, dtype, vox_offset, description)
    body = data.astype(dtype.newbyteorder("<"), copy=False).ravel(order="F").tobytes()
    with _open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x01\x00\x00\x00")
        fh.write(ext)
        fh.write(body)


def _read_bytes(path: Path) -> bytes:
    try:
        with _open(path, "rb") as fh:
            return fh.read()
    except (EOFError, gzip.BadGzipFile) as exc:
        raise TruncatedFileError(f"{path}: {exc}") from None


def read_volume(path) -> Volume3D:
    """Read a single-file NIfTI-1 volume into a :class:`Volume3D`."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        en = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        en = ">"
    else:
        raise BadMagicError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise BadMagicError(f"{path}: magic {raw[344:348]!r} is not a single-file NIfTI-1 image")

    dim = struct.unpack_from(en + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7 or any(d > 1 for d in dim[4:ndim + 1]):
        raise NiftiError(f"{path}: only 3-D volumes are supported (dim={dim})")
    dims = tuple(max(1, d) for d in dim[1:4])
    code = struct.unpack_from(en + "h", raw, 70)[0]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(en)
    pixdim = struct.unpack_from(en + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(en + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(en + "ff", raw, 112)
    qform_code, sform_code = struct.unpack_from(en + "hh", raw, 252)

    n_bytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < vox_offset + n_bytes:
        raise TruncatedFileError(f"{path}: expected {vox_offset + n_bytes} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=vox_offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope or 1.0) + inter

    voxel_size = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        srow = np.array(struct.unpack_from(en + "12f", raw, 280), dtype=float).reshape(3, 4)
        voxel_size = tuple(np.linalg.norm(srow[:, :3], axis=0))
        axes = srow[:, :3] / np.asarray(voxel_size)
        origin = tuple(srow[:, 3])
    elif qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from(en + "6f", raw, 256)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        axes = _quaternion_matrix(b, c, d, qfac)
        origin = (qx, qy, qz)
    else:
        axes = np.eye(3)
        origin = (0.0, 0.0, 0.0)
    # orthonormalise float32 round-off
    u, _, vt = np.linalg.svd(axes)
    axes = u @ vt
    geometry = _read_extension(raw, en, vox_offset)
    if geometry is not None and np.allclose(geometry["voxel_size"], voxel_size, rtol=1e-5, atol=1e-5) \
            and np.allclose(geometry["origin"], origin, atol=1e-3):
        voxel_size = tuple(geometry["voxel_size"])
        origin = tuple(geometry["origin"])
        axes = np.asarray(geometry["axes"], dtype=float)
    return Volume3D(data, Grid(dims, voxel_size, origin, axes))


def _read_extension(raw: bytes, en: str, vox_offset: int):
    pos = HEADER_SIZE
    if len(raw) < pos + 4 or raw[pos] == 0:
        return None
    pos += 4
    while pos + 8 <= min(vox_offset, len(raw)):
        esize, ecode = struct.unpack_from(en + "ii", raw, pos)
        if esize < 8:
            break
        if ecode == ECODE_COMMENT:
            try:
                blob = json.loads(raw[pos + 8:pos + esize].rstrip(b"\x00"))
                return blob[_EXT_KEY]
            except (ValueError, KeyError, TypeError):
                pass
        pos += esize
    return None
