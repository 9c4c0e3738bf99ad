import gzip
import struct

import numpy as np
import pytest

from genesis3d.volume import (
    BadMagicError,
    IntensityDomain,
    MVOL_MAGIC,
    MVOL_VERSION,
    PayloadSizeError,
    PhantomSpec,
    TruncatedFileError,
    UnsupportedDatatypeError,
    Volume,
    VolumeFormatError,
    generate_phantom,
    normalize_ct,
    normalize_minmax,
    phantom_blob_mask,
    read_mvol,
    read_nifti1,
    write_mvol,
)


def test_volume_requires_rank_3():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4), dtype=np.float32), (1, 1, 1), IntensityDomain.UNIT)


def test_volume_rejects_bad_spacing():
    data = np.zeros((4, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        Volume(data, (1.0, 0.0, 1.0), IntensityDomain.UNIT)
    with pytest.raises(ValueError):
        Volume(data, (1.0, float("nan"), 1.0), IntensityDomain.UNIT)


def test_unit_volume_range_enforced():
    data = np.full((4, 4, 4), 1.5, dtype=np.float32)
    with pytest.raises(ValueError):
        Volume(data, (1, 1, 1), IntensityDomain.UNIT)
    # same values are fine in the raw domain
    Volume(data, (1, 1, 1), IntensityDomain.HOUNSFIELD)


def test_mvol_roundtrip_preserves_everything(tmp_path, unit_volume):
    p = tmp_path / "a.mvol"
    write_mvol(str(p), unit_volume)
    back = read_mvol(str(p))
    assert back.dims == unit_volume.dims
    assert back.spacing == unit_volume.spacing
    assert back.domain is unit_volume.domain
    assert np.array_equal(back.data, unit_volume.data)


def test_mvol_rewrite_is_byte_identical(tmp_path, unit_volume):
    p1 = tmp_path / "a.mvol"
    p2 = tmp_path / "b.mvol"
    write_mvol(str(p1), unit_volume)
    write_mvol(str(p2), read_mvol(str(p1)))
    assert p1.read_bytes() == p2.read_bytes()


def test_mvol_header_layout_and_x_fastest_order(tmp_path):
    # distinct values let the payload ordering be checked voxel by voxel
    data = np.arange(8, dtype=np.float32).reshape((2, 2, 2)) / 10.0
    vol = Volume(data, (0.5, 1.0, 2.0), IntensityDomain.UNIT, "layout")
    p = tmp_path / "layout.mvol"
    write_mvol(str(p), vol)
    raw = p.read_bytes()
    assert raw[:4] == MVOL_MAGIC
    version, nx, ny, nz, sx, sy, sz, dtype_code, domain_code, r0, r1 = struct.unpack_from(
        "<IIIIfffBBBB", raw, 4
    )
    assert (version, nx, ny, nz) == (MVOL_VERSION, 2, 2, 2)
    assert (sx, sy, sz) == (0.5, 1.0, 2.0)
    assert dtype_code == 1
    assert domain_code == 1
    assert (r0, r1) == (0, 0)
    assert len(raw) == 36 + 4 * 8
    payload = np.frombuffer(raw[36:], dtype="<f4")
    for z in range(2):
        for y in range(2):
            for x in range(2):
                assert payload[x + 2 * y + 4 * z] == data[x, y, z]


def test_mvol_error_taxonomy(tmp_path, unit_volume):
    p = tmp_path / "v.mvol"
    write_mvol(str(p), unit_volume)
    good = p.read_bytes()

    def variant(name, blob):
        q = tmp_path / name
        q.write_bytes(blob)
        return str(q)

    with pytest.raises(BadMagicError):
        read_mvol(variant("magic.mvol", b"XXXX" + good[4:]))
    with pytest.raises(TruncatedFileError):
        read_mvol(variant("shorthdr.mvol", good[:20]))
    with pytest.raises(TruncatedFileError):
        read_mvol(variant("shortpayload.mvol", good[:-8]))
    with pytest.raises(PayloadSizeError):
        read_mvol(variant("trailing.mvol", good + b"\x00\x00\x00\x00"))
    bad_version = good[:4] + struct.pack("<I", 99) + good[8:]
    with pytest.raises(VolumeFormatError):
        read_mvol(variant("version.mvol", bad_version))
    bad_dtype = bytearray(good)
    bad_dtype[4 + 28] = 7
    with pytest.raises(UnsupportedDatatypeError):
        read_mvol(variant("dtype.mvol", bytes(bad_dtype)))
    bad_domain = bytearray(good)
    bad_domain[4 + 29] = 9
    with pytest.raises(VolumeFormatError):
        read_mvol(variant("domain.mvol", bytes(bad_domain)))
    bad_reserved = bytearray(good)
    bad_reserved[4 + 30] = 1
    with pytest.raises(VolumeFormatError):
        read_mvol(variant("reserved.mvol", bytes(bad_reserved)))


def test_normalize_ct_window_mapping():
    raw = np.array([[[-2000.0, -1000.0, 0.0, 1000.0, 2000.0]]], dtype=np.float32)
    vol = Volume(raw, (1, 1, 1), IntensityDomain.HOUNSFIELD)
    out = normalize_ct(vol)
    assert out.domain is IntensityDomain.UNIT
    assert np.allclose(out.data[0, 0], [0.0, 0.0, 0.5, 1.0, 1.0])
    # a narrower window clips harder
    out2 = normalize_ct(vol, clip=(-500.0, 500.0))
    assert np.allclose(out2.data[0, 0], [0.0, 0.0, 0.5, 1.0, 1.0])


def test_normalize_ct_rejects_nonfinite_and_bad_window():
    raw = np.zeros((2, 2, 2), dtype=np.float32)
    raw[1, 0, 1] = np.nan
    vol = Volume(raw, (1, 1, 1), IntensityDomain.HOUNSFIELD)
    with pytest.raises(ValueError, match=r"\(1, 0, 1\)"):
        normalize_ct(vol)
    ok = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), IntensityDomain.HOUNSFIELD)
    with pytest.raises(ValueError):
        normalize_ct(ok, clip=(5.0, 5.0))


def test_normalize_minmax():
    raw = np.array([[[2.0, 4.0, 6.0]]], dtype=np.float32)
    out = normalize_minmax(Volume(raw, (1, 1, 1), IntensityDomain.HOUNSFIELD))
    assert np.allclose(out.data[0, 0], [0.0, 0.5, 1.0])
    flat = normalize_minmax(
        Volume(np.full((2, 2, 2), 3.0, dtype=np.float32), (1, 1, 1), IntensityDomain.HOUNSFIELD)
    )
    assert np.array_equal(flat.data, np.zeros((2, 2, 2), dtype=np.float32))


def _nifti_bytes(arr, datatype, slope=0.0, inter=0.0, rank=3, pixdim=(1.5, 2.0, 2.5),
                 vox_offset=352.0, magic=b"n+1\x00"):
    np_dtype = {4: "<i2", 16: "<f4"}[datatype]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    nx, ny = arr.shape[0], arr.shape[1]
    nz = arr.shape[2] if rank == 3 else 0
    struct.pack_into("<8h", hdr, 40, rank, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, 8 * np.dtype(np_dtype).itemsize)
    struct.pack_into("<8f", hdr, 76, 0.0, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    hdr[344:348] = magic
    pad = b"\x00" * (int(vox_offset) - 348)
    return bytes(hdr) + pad + np.ascontiguousarray(arr, dtype=np_dtype).tobytes(order="F")


def test_nifti_float32_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    arr = rng.normal(size=(6, 5, 4)).astype(np.float32)
    p = tmp_path / "img.nii"
    p.write_bytes(_nifti_bytes(arr, 16))
    vol = read_nifti1(str(p))
    assert vol.domain is IntensityDomain.HOUNSFIELD
    assert vol.dims == (6, 5, 4)
    assert vol.spacing == (1.5, 2.0, 2.5)
    assert np.array_equal(vol.data, arr)


def test_nifti_int16_with_scaling(tmp_path):
    arr = np.array([[[-100, 0], [50, 200]]], dtype=np.int16).reshape((1, 2, 2))
    p = tmp_path / "scaled.nii"
    p.write_bytes(_nifti_bytes(arr, 4, slope=2.0, inter=-10.0))
    vol = read_nifti1(str(p))
    assert np.allclose(vol.data, arr.astype(np.float32) * 2.0 - 10.0)


def test_nifti_rank2_and_gzip(tmp_path):
    arr2 = np.arange(12, dtype=np.float32).reshape((4, 3))
    blob = _nifti_bytes(arr2[:, :, None], 16, rank=2)
    p = tmp_path / "flat.nii.gz"
    p.write_bytes(gzip.compress(blob))
    vol = read_nifti1(str(p))
    assert vol.dims == (4, 3, 1)
    assert np.array_equal(vol.data[:, :, 0], arr2)


def test_nifti_error_taxonomy(tmp_path):
    arr = np.zeros((4, 4, 2), dtype=np.float32)

    def write(name, blob):
        q = tmp_path / name
        q.write_bytes(blob)
        return str(q)

    with pytest.raises(BadMagicError):
        read_nifti1(write("magic.nii", _nifti_bytes(arr, 16, magic=b"bad\x00")))
    with pytest.raises(TruncatedFileError):
        read_nifti1(write("short.nii", _nifti_bytes(arr, 16)[:100]))
    with pytest.raises(TruncatedFileError):
        read_nifti1(write("payload.nii", _nifti_bytes(arr, 16)[:-10]))
    bad_rank = bytearray(_nifti_bytes(arr, 16))
    struct.pack_into("<h", bad_rank, 40, 4)
    with pytest.raises(VolumeFormatError):
        read_nifti1(write("rank.nii", bytes(bad_rank)))
    bad_dtype = bytearray(_nifti_bytes(arr, 16))
    struct.pack_into("<h", bad_dtype, 70, 64)
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti1(write("dtype.nii", bytes(bad_dtype)))
    bad_bitpix = bytearray(_nifti_bytes(arr, 16))
    struct.pack_into("<h", bad_bitpix, 72, 8)
    with pytest.raises(VolumeFormatError):
        read_nifti1(write("bitpix.nii", bytes(bad_bitpix)))
    bad_size = bytearray(_nifti_bytes(arr, 16))
    struct.pack_into("<i", bad_size, 0, 999)
    with pytest.raises(VolumeFormatError):
        read_nifti1(write("hdr.nii", bytes(bad_size)))


def test_phantom_is_deterministic_and_bounded():
    spec = PhantomSpec(dims=(24, 20, 16), seed=11)
    a = generate_phantom(spec)
    b = generate_phantom(spec)
    assert np.array_equal(a.data, b.data)
    assert a.dims == (24, 20, 16)
    assert a.domain is IntensityDomain.UNIT
    assert float(a.data.min()) >= 0.0 and float(a.data.max()) <= 1.0
    c = generate_phantom(PhantomSpec(dims=(24, 20, 16), seed=12))
    assert not np.array_equal(a.data, c.data)


def test_phantom_mask_aligns_with_volume():
    spec = PhantomSpec(dims=(32, 32, 16), seed=3)
    vol = generate_phantom(spec)
    mask = phantom_blob_mask(spec, level=0.1)
    assert mask.shape == vol.dims
    assert mask.dtype == np.bool_
    frac = mask.mean()
    assert 0.0 < frac < 0.5
    # masks are nested in the threshold level
    tighter = phantom_blob_mask(spec, level=0.3)
    assert np.all(mask[tighter])
    # blob interiors are brighter than the rest of the volume on average
    assert vol.data[mask].mean() > vol.data[~mask].mean()


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(dims=(4, 48, 24))
    with pytest.raises(ValueError):
        PhantomSpec(n_ellipsoids=0)
    with pytest.raises(ValueError):
        PhantomSpec(texture_scale=0.0)
    with pytest.raises(ValueError):
        PhantomSpec(background_level=1.5)
