"""Sub-volume cropping with informativeness rejection.

Crops are drawn uniformly over all valid origins and kept only when they are
neither mostly empty (air) nor mostly saturated tissue, so the restoration
task always sees structure worth learning.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .volume import IntensityDomain, Volume, read_mvol, write_mvol


@dataclass
class SubVolume:
    """A crop from a unit-domain volume, tagged with its provenance."""

    data: np.ndarray
    origin: tuple[int, int, int]
    source_id: str

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("sub-volume data must be rank 3")
        self.origin = tuple(int(o) for o in self.origin)
        if len(self.origin) != 3 or any(o < 0 for o in self.origin):
            raise ValueError(f"origin must be 3 non-negative ints, got {self.origin}")
        lo = float(self.data.min(initial=0.0))
        hi = float(self.data.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"sub-volume values out of [0, 1]: min={lo}, max={hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class SamplerConfig:
    crop_shape: tuple[int, int, int] = (64, 64, 32)
    air_value_max: float = 0.05
    tissue_value_min: float = 0.95
    reject_fraction: float = 0.95
    max_attempts: int = 50

    def __post_init__(self) -> None:
        if len(self.crop_shape) != 3 or any(int(c) < 1 for c in self.crop_shape):
            raise ValueError(f"crop_shape must be 3 positive ints, got {self.crop_shape}")
        if not 0.0 <= self.air_value_max < self.tissue_value_min <= 1.0:
            raise ValueError("need 0 <= air_value_max < tissue_value_min <= 1")
        if not 0.0 < self.reject_fraction <= 1.0:
            raise ValueError("reject_fraction must lie in (0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass
class SampleResult:
    """Crops actually drawn plus whether the request fell short."""

    crops: list[SubVolume]
    requested: int
    shortfall: bool = field(default=False)


def is_informative(data: np.ndarray, cfg: SamplerConfig) -> bool:
    """False iff the crop is dominated by air or by saturated tissue.

    A crop is rejected when the fraction of voxels below ``air_value_max``
    exceeds ``reject_fraction``, or the fraction above ``tissue_value_min``
    does.
    """
    n = data.size
    empty_frac = float(np.count_nonzero(data < cfg.air_value_max)) / n
    tissue_frac = float(np.count_nonzero(data > cfg.tissue_value_min)) / n
    return not (empty_frac > cfg.reject_fraction or tissue_frac > cfg.reject_fraction)


def crop_subvolumes(
    vol: Volume, n: int, cfg: SamplerConfig, rng: np.random.Generator
) -> SampleResult:
    """Draw up to ``n`` informative crops with uniform random origins.

    Each crop gets ``cfg.max_attempts`` draws; if none passes the
    informativeness filter the crop is skipped and the result is flagged as a
    shortfall.  Overlapping crops are allowed.
    """
    if vol.domain is not IntensityDomain.UNIT:
        raise ValueError("cropping requires a unit-domain volume; normalize first")
    cx, cy, cz = cfg.crop_shape
    nx, ny, nz = vol.dims
    if cx > nx or cy > ny or cz > nz:
        raise ValueError(f"crop shape {cfg.crop_shape} exceeds volume dims {vol.dims}")
    crops: list[SubVolume] = []
    for _ in range(n):
        for _attempt in range(cfg.max_attempts):
            ox = int(rng.integers(0, nx - cx + 1))
            oy = int(rng.integers(0, ny - cy + 1))
            oz = int(rng.integers(0, nz - cz + 1))
            window = vol.data[ox : ox + cx, oy : oy + cy, oz : oz + cz]
            if is_informative(window, cfg):
                crops.append(SubVolume(window.copy(), (ox, oy, oz), vol.source_id))
                break
    return SampleResult(crops, requested=n, shortfall=len(crops) < n)


def save_subvolumes(directory: str, crops: list[SubVolume]) -> None:
    """Persist crops as MVOL files plus a manifest (one line per crop)."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, crop in enumerate(crops):
        name = f"crop_{i:05d}.mvol"
        vol = Volume(crop.data, (1.0, 1.0, 1.0), IntensityDomain.UNIT, crop.source_id)
        write_mvol(os.path.join(directory, name), vol)
        origin = ",".join(str(o) for o in crop.origin)
        shape = ",".join(str(s) for s in crop.shape)
        lines.append(f"{crop.source_id}\t{origin}\t{shape}\t{name}")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_subvolumes(directory: str) -> list[SubVolume]:
    """Read back a directory written by :func:`save_subvolumes`."""
    manifest = os.path.join(directory, "manifest.txt")
    crops: list[SubVolume] = []
    with open(manifest, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{manifest}:{line_no}: expected 4 tab-separated fields")
            source_id, origin_s, shape_s, name = parts
            origin = tuple(int(v) for v in origin_s.split(","))
            shape = tuple(int(v) for v in shape_s.split(","))
            vol = read_mvol(os.path.join(directory, name), source_id=source_id)
            if vol.dims != shape:
                raise ValueError(f"{name}: manifest shape {shape} != stored dims {vol.dims}")
            crops.append(SubVolume(vol.data, origin, source_id))
    return crops
