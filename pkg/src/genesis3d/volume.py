"""Volumetric containers, intensity normalization, file formats, and phantoms.

A :class:`Volume` is a dense scalar field on a regular grid.  Arrays are
indexed ``[x, y, z]`` and serialized x-fastest.  Two intensity domains are
distinguished: raw scanner units (Hounsfield, unbounded reals) and the unit
interval that every downstream stage consumes.
"""

from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass

import numpy as np

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1

_MVOL_DTYPE_F32 = 1
_DOMAIN_CODES = {"HOUNSFIELD": 0, "UNIT": 1}
_DOMAIN_NAMES = {v: k for k, v in _DOMAIN_CODES.items()}

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.int16, 16: np.float32}


class IntensityDomain(enum.Enum):
    HOUNSFIELD = 0
    UNIT = 1


class VolumeFormatError(ValueError):
    """Malformed volume file."""


class BadMagicError(VolumeFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(VolumeFormatError):
    """File ends before the declared payload does."""


class PayloadSizeError(VolumeFormatError):
    """Declared dims disagree with the stored payload size."""


class UnsupportedDatatypeError(VolumeFormatError):
    """Header declares a datatype this reader does not accept."""


@dataclass
class Volume:
    """Dense scalar volume.

    Parameters
    ----------
    data : np.ndarray
        Shape ``(nx, ny, nz)``, float32.
    spacing : tuple of float
        Physical voxel spacing along x, y, z; strictly positive and finite.
    domain : IntensityDomain
        UNIT volumes must lie within [0, 1].
    source_id : str
        Provenance tag carried through cropping and serialization.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    domain: IntensityDomain
    source_id: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be rank 3, got rank {self.data.ndim}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive finite reals, got {self.spacing}")
        if self.domain is IntensityDomain.UNIT:
            lo = float(self.data.min(initial=0.0))
            hi = float(self.data.max(initial=0.0))
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"UNIT volume out of range: min={lo}, max={hi}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a synthetic test volume.

    The phantom is a low-amplitude value-noise background plus smooth
    ellipsoidal blobs with cosine-ramp edges, clamped to [0, 1].
    """

    dims: tuple[int, int, int] = (48, 48, 24)
    n_ellipsoids: int = 4
    texture_scale: float = 0.35
    background_level: float = 0.3
    # semi-axes as fractions of the smallest dimension; the default keeps the
    # blob interiors several percent of the voxels so that dense targets
    # derived from them are learnable at desk scale
    blob_axis_range: tuple[float, float] = (0.3, 0.5)
    # +1 for inclusions brighter than the background, -1 for darker ones
    blob_sign: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError(f"phantom dims must be three ints >= 8, got {self.dims}")
        if self.n_ellipsoids < 1:
            raise ValueError("n_ellipsoids must be >= 1")
        if not 0.0 < self.texture_scale <= 1.0:
            raise ValueError("texture_scale must lie in (0, 1]")
        if not 0.0 <= self.background_level <= 1.0:
            raise ValueError("background_level must lie in [0, 1]")
        lo, hi = self.blob_axis_range
        if not 0.0 < lo < hi <= 1.0:
            raise ValueError(f"blob_axis_range needs 0 < lo < hi <= 1, got {self.blob_axis_range}")
        if self.blob_sign not in (1.0, -1.0):
            raise ValueError(f"blob_sign must be +1 or -1, got {self.blob_sign}")


def normalize_ct(vol: Volume, clip: tuple[float, float] = (-1000.0, 1000.0)) -> Volume:
    """Clip raw CT intensities to ``clip`` and rescale that window to [0, 1].

    Values at or below the lower bound map to 0, at or above the upper bound
    to 1.  Non-finite voxels are rejected with the coordinate of the first
    offender.
    """
    lo, hi = float(clip[0]), float(clip[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ValueError(f"clip window must be finite with hi > lo, got {clip}")
    finite = np.isfinite(vol.data)
    if not finite.all():
        x, y, z = np.argwhere(~finite)[0]
        raise ValueError(f"non-finite intensity at voxel ({x}, {y}, {z})")
    scaled = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(scaled.astype(np.float32), vol.spacing, IntensityDomain.UNIT, vol.source_id)


def normalize_minmax(vol: Volume) -> Volume:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    finite = np.isfinite(vol.data)
    if not finite.all():
        x, y, z = np.argwhere(~finite)[0]
        raise ValueError(f"non-finite intensity at voxel ({x}, {y}, {z})")
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        scaled = np.zeros_like(vol.data)
    else:
        scaled = (vol.data - lo) / (hi - lo)
    return Volume(scaled.astype(np.float32), vol.spacing, IntensityDomain.UNIT, vol.source_id)


def write_mvol(path: str, vol: Volume) -> None:
    """Serialize a volume to the MVOL container (little-endian, x-fastest)."""
    nx, ny, nz = vol.dims
    header = MVOL_MAGIC + struct.pack(
        "<IIIIfffBBBB",
        MVOL_VERSION,
        nx,
        ny,
        nz,
        vol.spacing[0],
        vol.spacing[1],
        vol.spacing[2],
        _MVOL_DTYPE_F32,
        _DOMAIN_CODES[vol.domain.name],
        0,
        0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes(order="F"))


def read_mvol(path: str, source_id: str | None = None) -> Volume:
    """Read an MVOL file written by :func:`write_mvol`.

    Raises
    ------
    BadMagicError, UnsupportedDatatypeError, TruncatedFileError,
    PayloadSizeError
        Distinct errors for the distinct ways the container can be broken.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 36:
        raise TruncatedFileError(f"{path}: header needs 36 bytes, file has {len(raw)}")
    if raw[:4] != MVOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, nx, ny, nz, sx, sy, sz, dtype_code, domain_code, r0, r1 = struct.unpack_from(
        "<IIIIfffBBBB", raw, 4
    )
    if version != MVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if dtype_code != _MVOL_DTYPE_F32:
        raise UnsupportedDatatypeError(f"{path}: unknown dtype code {dtype_code}")
    if domain_code not in _DOMAIN_NAMES:
        raise VolumeFormatError(f"{path}: unknown domain code {domain_code}")
    if r0 != 0 or r1 != 0:
        raise VolumeFormatError(f"{path}: reserved bytes must be zero")
    n_values = nx * ny * nz
    payload = raw[36:]
    if len(payload) < 4 * n_values:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, dims {nx}x{ny}x{nz} need {4 * n_values}"
        )
    if len(payload) > 4 * n_values:
        raise PayloadSizeError(
            f"{path}: payload holds {len(payload)} bytes, dims {nx}x{ny}x{nz} declare {4 * n_values}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=n_values).reshape((nx, ny, nz), order="F")
    return Volume(
        data.copy(),
        (sx, sy, sz),
        IntensityDomain[_DOMAIN_NAMES[domain_code]],
        path if source_id is None else source_id,
    )


def read_nifti1(path: str, source_id: str | None = None) -> Volume:
    """Read a minimal single-file NIfTI-1 image (.nii or .nii.gz).

    Supports rank-2 and rank-3 images with datatype int16 or float32.
    ``scl_slope``/``scl_inter`` are applied when the slope is nonzero.  The
    result stays in the raw (Hounsfield-like) domain; normalize separately.
    """
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:  # type: ignore[operator]
        raw = fh.read()
    if len(raw) < _NIFTI_HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header needs {_NIFTI_HEADER_SIZE} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected {_NIFTI_HEADER_SIZE}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<ff", raw, 112)
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"{path}: bad NIfTI magic {magic!r}")
    if dim[0] not in (2, 3):
        raise VolumeFormatError(f"{path}: rank {dim[0]} images not supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} not supported")
    np_dtype = _NIFTI_DTYPES[datatype]
    if bitpix != 8 * np.dtype(np_dtype).itemsize:
        raise VolumeFormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    nx = int(dim[1])
    ny = int(dim[2])
    nz = int(dim[3]) if dim[0] == 3 else 1
    if nx < 1 or ny < 1 or nz < 1:
        raise VolumeFormatError(f"{path}: non-positive dims {(nx, ny, nz)}")
    n_values = nx * ny * nz
    offset = int(vox_offset) if vox_offset else _NIFTI_HEADER_SIZE
    end = offset + n_values * np.dtype(np_dtype).itemsize
    if len(raw) < end:
        raise TruncatedFileError(f"{path}: payload ends at {len(raw)}, needs {end}")
    data = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<"), count=n_values, offset=offset)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float32)
    if scl_slope != 0.0:
        data = data * scl_slope + scl_inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing, IntensityDomain.HOUNSFIELD, path if source_id is None else source_id)


def _value_noise(dims: tuple[int, int, int], cells: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth noise in [-1, 1]: a coarse random lattice, trilinearly upsampled."""
    lattice = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1, cells + 1))
    coords = [np.linspace(0.0, cells, d) for d in dims]
    i0 = [np.minimum(c.astype(np.int64), cells - 1) for c in coords]
    frac = [c - i for c, i in zip(coords, i0)]
    fx = frac[0][:, None, None]
    fy = frac[1][None, :, None]
    fz = frac[2][None, None, :]

    def corner(dx: int, dy: int, dz: int) -> np.ndarray:
        return lattice[np.ix_(i0[0] + dx, i0[1] + dy, i0[2] + dz)]

    out = (
        corner(0, 0, 0) * (1 - fx) * (1 - fy) * (1 - fz)
        + corner(1, 0, 0) * fx * (1 - fy) * (1 - fz)
        + corner(0, 1, 0) * (1 - fx) * fy * (1 - fz)
        + corner(0, 0, 1) * (1 - fx) * (1 - fy) * fz
        + corner(1, 1, 0) * fx * fy * (1 - fz)
        + corner(1, 0, 1) * fx * (1 - fy) * fz
        + corner(0, 1, 1) * (1 - fx) * fy * fz
        + corner(1, 1, 1) * fx * fy * fz
    )
    return out


def _ellipsoid_radius(
    dims: tuple[int, int, int],
    rng: np.random.Generator,
    axis_range: tuple[float, float],
) -> np.ndarray:
    """Normalized radius field r(p) of one randomly posed ellipsoid.

    r = 0 at the center and 1 on the surface.  Semi-axes span ``axis_range``
    as a fraction of the smallest dimension; orientation is a uniform random
    rotation.
    """
    dims_arr = np.asarray(dims, dtype=np.float64)
    center = rng.uniform(0.2, 0.8, size=3) * dims_arr
    scale = float(min(dims))
    axes = rng.uniform(axis_range[0], axis_range[1], size=3) * scale
    basis, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    grid = np.stack(
        np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"),
        axis=-1,
    )
    local = (grid - center) @ basis.T
    return np.sqrt(((local / axes) ** 2).sum(axis=-1))


def _phantom_fields(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Background texture and summed blob field for a phantom spec."""
    rng = np.random.default_rng(spec.seed)
    cells = max(2, min(spec.dims) // 6)
    texture = spec.background_level + 0.15 * spec.texture_scale * _value_noise(spec.dims, cells, rng)
    blobs = np.zeros(spec.dims, dtype=np.float64)
    for _ in range(spec.n_ellipsoids):
        r = _ellipsoid_radius(spec.dims, rng, spec.blob_axis_range)
        amplitude = rng.uniform(0.35, 0.6)
        # cosine ramp: amplitude at r=0, smoothly 0 at r>=1
        blobs += amplitude * 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0)))
    return texture, blobs


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic synthetic volume; a pure function of its spec."""
    texture, blobs = _phantom_fields(spec)
    data = np.clip(texture + spec.blob_sign * blobs, 0.0, 1.0).astype(np.float32)
    return Volume(data, (1.0, 1.0, 1.0), IntensityDomain.UNIT, f"phantom-{spec.seed}")


def phantom_blob_mask(spec: PhantomSpec, level: float = 0.3) -> np.ndarray:
    """Boolean ground-truth mask of the phantom's blob interiors.

    Deterministic companion to :func:`generate_phantom`: the same spec always
    yields a mask aligned with the generated volume.  ``level`` is the blob
    field threshold defining the interior.
    """
    _, blobs = _phantom_fields(spec)
    return blobs >= level
