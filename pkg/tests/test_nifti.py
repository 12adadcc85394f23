import gzip
import struct

import numpy as np
import pytest

from srrtune.errors import BadMagicError, TruncatedFileError, UnsupportedDatatypeError
from srrtune.geometry import Grid, Volume3D, rotation_matrix
from srrtune.nifti import HEADER_SIZE, read_volume, write_volume


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int16])
def test_roundtrip_bit_exact(tmp_path, rng, dtype):
    data = (rng.standard_normal((8, 8, 8)) * 100).astype(dtype)
    vol = Volume3D(data, Grid.centered(8, 1.1))
    write_volume(vol, tmp_path / "v.nii", dtype=dtype)
    back = read_volume(tmp_path / "v.nii")
    assert back.data.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back.data, data)


def test_header_fields(tmp_path, rng):
    write_volume(Volume3D(rng.random((3, 4, 5)), Grid.centered((3, 4, 5), 1.0)), tmp_path / "v.nii")
    raw = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<8h", raw[40:56])[:4] == (3, 3, 4, 5)
    assert struct.unpack("<f", raw[108:112])[0] >= 352


def test_anisotropic_affine_recovered(tmp_path, rng):
    g = Grid((6, 5, 4), (1.1, 1.1, 3.0), (-34.65, 12.3, -7.77), rotation_matrix((12.0, -30.0, 75.0)))
    write_volume(Volume3D(rng.random(g.dims), g), tmp_path / "v.nii.gz")
    back = read_volume(tmp_path / "v.nii.gz").grid
    np.testing.assert_allclose(back.voxel_size, (1.1, 1.1, 3.0), atol=1e-6)
    np.testing.assert_allclose(back.origin, g.origin, atol=1e-6)
    np.testing.assert_allclose(back.affine, g.affine, atol=1e-6)


def test_float32_header_geometry_alone(tmp_path, rng):
    # drop the extension flag: geometry comes from the sform only
    g = Grid((4, 4, 4), (1.1, 1.1, 3.0), (1.0, 2.0, 3.0), rotation_matrix((0, 0, 90)))
    write_volume(Volume3D(rng.random(g.dims), g), tmp_path / "v.nii")
    raw = bytearray((tmp_path / "v.nii").read_bytes())
    raw[HEADER_SIZE] = 0
    (tmp_path / "w.nii").write_bytes(bytes(raw))
    back = read_volume(tmp_path / "w.nii").grid
    np.testing.assert_allclose(back.affine, g.affine, atol=1e-5)


def test_gzip_output_is_reproducible(tmp_path, rng):
    vol = Volume3D(rng.random((4, 4, 4)), Grid.centered(4, 1.0))
    write_volume(vol, tmp_path / "a.nii.gz")
    write_volume(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    with gzip.open(tmp_path / "a.nii.gz") as fh:
        assert fh.read(4) == struct.pack("<i", 348)


def test_distinct_errors(tmp_path, rng):
    vol = Volume3D(rng.random((4, 4, 4)), Grid.centered(4, 1.0))
    write_volume(vol, tmp_path / "v.nii")
    raw = (tmp_path / "v.nii").read_bytes()

    (tmp_path / "magic.nii").write_bytes(raw[:344] + b"ni1\x00" + raw[348:])
    with pytest.raises(BadMagicError):
        read_volume(tmp_path / "magic.nii")

    bad_type = bytearray(raw)
    struct.pack_into("<h", bad_type, 70, 32)  # complex64
    (tmp_path / "type.nii").write_bytes(bytes(bad_type))
    with pytest.raises(UnsupportedDatatypeError):
        read_volume(tmp_path / "type.nii")

    (tmp_path / "short.nii").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        read_volume(tmp_path / "short.nii")
    (tmp_path / "tiny.nii").write_bytes(raw[:100])
    with pytest.raises(TruncatedFileError):
        read_volume(tmp_path / "tiny.nii")

    with pytest.raises(UnsupportedDatatypeError):
        write_volume(vol, tmp_path / "u8.nii", dtype=np.uint8)


def test_big_endian_header_is_read(tmp_path):
    data = np.arange(8, dtype=">f4").reshape(2, 2, 2)
    hdr = bytearray(352)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">hh", hdr, 70, 16, 32)
    struct.pack_into(">8f", hdr, 76, 1, 2, 2, 2, 0, 0, 0, 0)
    struct.pack_into(">f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    (tmp_path / "be.nii").write_bytes(bytes(hdr) + data.ravel(order="F").tobytes())
    vol = read_volume(tmp_path / "be.nii")
    np.testing.assert_array_equal(vol.data, data.astype(np.float32))
    assert vol.voxel_size == (2.0, 2.0, 2.0)
