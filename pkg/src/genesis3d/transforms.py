"""Composable intensity and spatial corruptions for restoration pretraining.

Four corruptions, each invertible only through learning: a nonlinear
intensity remap driven by a cubic Bezier lookup table, local window
shuffling, and inner/outer cutout.  A probabilistic scheduler composes them;
the application order is fixed (nonlinear, then shuffle, then cutout).  Every
application is captured in a replayable record.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .sampler import SubVolume


class Direction(enum.Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"


class CutoutMode(enum.Enum):
    NONE = "none"
    INNER = "inner"
    OUTER = "outer"


# retry budget before the deterministic cutout fallback kicks in
_CUTOUT_RETRIES = 25


@dataclass(frozen=True)
class BezierMap:
    """Monotone-ish intensity transfer curve sampled from a cubic Bezier.

    ``control`` holds the four control points ((x0, y0) .. (x3, y3)).  The
    curve is sampled at ``resolution`` parameter values and sorted by x to
    form a lookup table; ``strict_monotone`` instead sorts x and y
    independently (y descending for the decreasing direction), which forces a
    monotone map.
    """

    control: tuple[tuple[float, float], ...]
    direction: Direction
    resolution: int
    strict_monotone: bool = False

    def __post_init__(self) -> None:
        if len(self.control) != 4:
            raise ValueError("a cubic Bezier needs exactly 4 control points")
        if self.resolution < 1000:
            raise ValueError("lut resolution must be >= 1000")
        for x, y in self.control:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"control point ({x}, {y}) outside the unit square")


@dataclass(frozen=True)
class ShuffleWindow:
    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    perms: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    def __post_init__(self) -> None:
        if any(e < 1 for e in self.extent):
            raise ValueError(f"window extent must be >= 1 per axis, got {self.extent}")
        for axis, perm in enumerate(self.perms):
            if sorted(perm) != list(range(self.extent[axis])):
                raise ValueError(f"axis {axis} permutation {perm} does not match extent")


@dataclass(frozen=True)
class CutoutMask:
    """Cutout decision: mode, merged windows, fill value, target shape.

    The boolean mask is reconstructed on demand: the union of the windows for
    INNER, its complement for OUTER.  The masked fraction never exceeds
    ``fraction_cap``.
    """

    mode: CutoutMode
    windows: tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...]
    fill_value: float
    shape: tuple[int, int, int]
    fraction_cap: float = 0.25

    def __post_init__(self) -> None:
        if self.mode is CutoutMode.NONE:
            raise ValueError("a cutout mask needs mode INNER or OUTER")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ValueError("fill value must lie in [0, 1]")
        frac = self.masked_fraction()
        if frac > self.fraction_cap:
            raise ValueError(f"masked fraction {frac:.4f} exceeds cap {self.fraction_cap}")

    def union(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for (ox, oy, oz), (ex, ey, ez) in self.windows:
            out[ox : ox + ex, oy : oy + ey, oz : oz + ez] = True
        return out

    def mask(self) -> np.ndarray:
        u = self.union()
        return u if self.mode is CutoutMode.INNER else ~u

    def masked_fraction(self) -> float:
        return float(np.count_nonzero(self.mask())) / float(np.prod(self.shape))


@dataclass(frozen=True)
class SchedulerConfig:
    """Probabilities and size knobs for the composed corruption scheme.

    Defaults follow the combined preset: nonlinear remap almost always, local
    shuffle on half the draws, a cutout (inner or outer with equal odds) on
    most draws.  At most three corruptions are ever active at once because
    inner and outer cutout are mutually exclusive by construction.
    """

    p_nonlinear: float = 0.9
    p_shuffle: float = 0.5
    p_cutout: float = 0.9
    p_inner: float = 0.5
    lut_resolution: int = 100_000
    strict_monotone: bool = False
    shuffle_windows: int = 1000
    shuffle_max_extent: tuple[int, int, int] = (8, 8, 4)
    cutout_max_windows: int = 10
    cutout_max_fraction: float = 0.25
    receptive_field: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        for name in ("p_nonlinear", "p_shuffle", "p_cutout", "p_inner"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.lut_resolution < 1000:
            raise ValueError("lut_resolution must be >= 1000")
        if self.shuffle_windows < 0:
            raise ValueError("shuffle_windows must be >= 0")
        if len(self.shuffle_max_extent) != 3 or any(e < 1 for e in self.shuffle_max_extent):
            raise ValueError("shuffle_max_extent must be 3 ints >= 1")
        if self.cutout_max_windows < 0:
            raise ValueError("cutout_max_windows must be >= 0")
        if not 0.0 < self.cutout_max_fraction <= 0.25:
            raise ValueError("cutout_max_fraction must lie in (0, 0.25]")
        if self.receptive_field is not None and not all(
            e < r for e, r in zip(self.shuffle_max_extent, self.receptive_field)
        ):
            raise ValueError(
                f"shuffle_max_extent {self.shuffle_max_extent} must stay below the "
                f"receptive field {self.receptive_field} on every axis"
            )


@dataclass
class TransformSpec:
    """One scheduled corruption draw, with parameters filled at apply time."""

    apply_nonlinear: bool
    apply_shuffle: bool
    cutout: CutoutMode
    cfg: SchedulerConfig
    rng_seed: int
    bezier: BezierMap | None = None
    shuffle: tuple[ShuffleWindow, ...] | None = None
    cutout_mask: CutoutMask | None = None

    def outcome(self) -> tuple[bool, bool, str]:
        return (self.apply_nonlinear, self.apply_shuffle, self.cutout.value)

    def n_active(self) -> int:
        return int(self.apply_nonlinear) + int(self.apply_shuffle) + int(
            self.cutout is not CutoutMode.NONE
        )


def bezier_point(
    p0: tuple[float, float],
    p1: tuple[float, float],
    p2: tuple[float, float],
    p3: tuple[float, float],
    t: np.ndarray | float,
) -> tuple[np.ndarray, np.ndarray]:
    """Cubic Bezier point(s): B(t) = (1-t)^3 P0 + 3(1-t)^2 t P1 + 3(1-t) t^2 P2 + t^3 P3."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("Bezier parameter t must lie in [0, 1]")
    u = 1.0 - t
    w0 = u * u * u
    w1 = 3.0 * u * u * t
    w2 = 3.0 * u * t * t
    w3 = t * t * t
    x = w0 * p0[0] + w1 * p1[0] + w2 * p2[0] + w3 * p3[0]
    y = w0 * p0[1] + w1 * p1[1] + w2 * p2[1] + w3 * p3[1]
    return x, y


def build_intensity_map(
    rng: np.random.Generator,
    direction: Direction,
    resolution: int = 100_000,
    strict_monotone: bool = False,
) -> BezierMap:
    """Sample a random transfer curve: interior control points uniform in the unit square.

    INCREASING pins the endpoints at (0,0) and (1,1); DECREASING at (0,1)
    and (1,0).
    """
    p1 = (float(rng.uniform()), float(rng.uniform()))
    p2 = (float(rng.uniform()), float(rng.uniform()))
    if direction is Direction.INCREASING:
        control = ((0.0, 0.0), p1, p2, (1.0, 1.0))
    else:
        control = ((0.0, 1.0), p1, p2, (1.0, 0.0))
    return BezierMap(control, direction, resolution, strict_monotone)


def bezier_lut(bmap: BezierMap) -> tuple[np.ndarray, np.ndarray]:
    """Tabulate the curve as (xs, ys) with xs non-decreasing."""
    t = np.linspace(0.0, 1.0, bmap.resolution)
    x, y = bezier_point(*bmap.control, t)
    if bmap.strict_monotone:
        xs = np.sort(x)
        ys = np.sort(y)
        if bmap.direction is Direction.DECREASING:
            ys = ys[::-1]
    else:
        order = np.argsort(x, kind="mergesort")
        xs = x[order]
        ys = y[order]
    return xs, ys


def apply_nonlinear(data: np.ndarray, bmap: BezierMap) -> np.ndarray:
    """Remap intensities through the tabulated curve (linear interpolation)."""
    xs, ys = bezier_lut(bmap)
    out = np.interp(data.astype(np.float64, copy=False), xs, ys)
    return out.astype(np.float32)


def _sample_shuffle_window(
    shape: tuple[int, int, int], max_extent: tuple[int, int, int], rng: np.random.Generator
) -> ShuffleWindow:
    extent = tuple(
        int(rng.integers(1, min(me, d) + 1)) for me, d in zip(max_extent, shape)
    )
    origin = tuple(int(rng.integers(0, d - e + 1)) for d, e in zip(shape, extent))
    perms = tuple(tuple(int(i) for i in rng.permutation(e)) for e in extent)
    return ShuffleWindow(origin, extent, perms)  # type: ignore[arg-type]


def apply_shuffle_windows(data: np.ndarray, windows: tuple[ShuffleWindow, ...]) -> np.ndarray:
    """Apply the windows sequentially; each permutes its block along every axis."""
    out = data.copy()
    for w in windows:
        ox, oy, oz = w.origin
        ex, ey, ez = w.extent
        block = out[ox : ox + ex, oy : oy + ey, oz : oz + ez]
        out[ox : ox + ex, oy : oy + ey, oz : oz + ez] = block[np.ix_(*w.perms)]
    return out


def local_pixel_shuffle(
    data: np.ndarray, cfg: SchedulerConfig, rng: np.random.Generator
) -> tuple[np.ndarray, tuple[ShuffleWindow, ...]]:
    """Shuffle many small windows in place; windows may overlap.

    Window extents are clipped to fit the input, so no draw can fail.  The
    global voxel multiset is preserved.
    """
    shape = data.shape
    windows = tuple(
        _sample_shuffle_window(shape, cfg.shuffle_max_extent, rng)
        for _ in range(cfg.shuffle_windows)
    )
    return apply_shuffle_windows(data, windows), windows


def _window_union_fraction(
    windows: list[tuple[tuple[int, int, int], tuple[int, int, int]]],
    shape: tuple[int, int, int],
) -> float:
    mask = np.zeros(shape, dtype=bool)
    for (ox, oy, oz), (ex, ey, ez) in windows:
        mask[ox : ox + ex, oy : oy + ey, oz : oz + ez] = True
    return float(np.count_nonzero(mask)) / float(np.prod(shape))


def _sample_cutout_windows(
    shape: tuple[int, int, int],
    mode: CutoutMode,
    cfg: SchedulerConfig,
    rng: np.random.Generator,
) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    if cfg.cutout_max_windows == 0:
        return []
    k = int(rng.integers(1, cfg.cutout_max_windows + 1))
    windows = []
    for _ in range(k):
        if mode is CutoutMode.INNER:
            extent = tuple(
                int(rng.integers(max(1, d // 8), max(2, d // 3) + 1)) for d in shape
            )
        else:
            # outer cutout exposes the union, so windows must be large
            extent = tuple(
                min(d, int(rng.integers(max(1, (7 * d) // 10), d + 1))) for d in shape
            )
        origin = tuple(int(rng.integers(0, d - e + 1)) for d, e in zip(shape, extent))
        windows.append((origin, extent))
    return windows


def _fallback_windows(
    windows: list[tuple[tuple[int, int, int], tuple[int, int, int]]],
    shape: tuple[int, int, int],
    mode: CutoutMode,
    cap: float,
) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """Deterministic repair when sampling keeps violating the fraction cap."""
    total = float(np.prod(shape))
    if mode is CutoutMode.INNER:
        kept = list(windows)
        while kept and _window_union_fraction(kept, shape) > cap:
            kept.pop()
        if kept:
            return kept
        if windows:
            # shrink the first window until it fits under the cap
            origin, extent = windows[0]
            extent = tuple(extent)
            while np.prod(extent) / total > cap and max(extent) > 1:
                axis = int(np.argmax(extent))
                extent = tuple(
                    max(1, e // 2) if i == axis else e for i, e in enumerate(extent)
                )
            if np.prod(extent) / total <= cap:
                return [(origin, extent)]
        return []
    # OUTER: grow a centered exposed box until its complement fits under the cap
    need = (1.0 - cap) * total
    extent = [min(d, int(np.ceil(d * (1.0 - cap) ** (1.0 / 3.0)))) for d in shape]
    while float(np.prod(extent)) < need:
        growable = [i for i in range(3) if extent[i] < shape[i]]
        axis = max(growable, key=lambda i: shape[i] - extent[i])
        extent[axis] += 1
    origin = tuple((d - e) // 2 for d, e in zip(shape, extent))
    return [(origin, tuple(extent))]


def gen_cutout_mask(
    shape: tuple[int, int, int],
    mode: CutoutMode,
    cfg: SchedulerConfig,
    rng: np.random.Generator,
) -> CutoutMask:
    """Sample a cutout decision whose masked fraction respects the cap.

    Bounded rejection resampling first; if every retry violates the cap, a
    deterministic shrink (INNER) or centered-box grow (OUTER) repairs the
    draw, so generation never fails.
    """
    fill = float(rng.uniform())
    cap = cfg.cutout_max_fraction
    windows: list = []
    for _ in range(_CUTOUT_RETRIES):
        windows = _sample_cutout_windows(shape, mode, cfg, rng)
        union = _window_union_fraction(windows, shape)
        masked = union if mode is CutoutMode.INNER else 1.0 - union
        if masked <= cap:
            return CutoutMask(mode, tuple(windows), fill, shape, cap)
    repaired = _fallback_windows(windows, shape, mode, cap)
    return CutoutMask(mode, tuple(repaired), fill, shape, cap)


def apply_cutout(data: np.ndarray, cmask: CutoutMask) -> np.ndarray:
    """Replace the masked region with the mask's fill value."""
    if data.shape != cmask.shape:
        raise ValueError(f"mask shape {cmask.shape} does not match data shape {data.shape}")
    out = data.copy()
    out[cmask.mask()] = np.float32(cmask.fill_value)
    return out


def schedule(cfg: SchedulerConfig, rng: np.random.Generator) -> TransformSpec:
    """Draw which corruptions to apply; parameters are sampled at apply time."""
    nl = bool(rng.random() < cfg.p_nonlinear)
    sh = bool(rng.random() < cfg.p_shuffle)
    if rng.random() < cfg.p_cutout:
        mode = CutoutMode.INNER if rng.random() < cfg.p_inner else CutoutMode.OUTER
    else:
        mode = CutoutMode.NONE
    seed = int(rng.integers(0, 2**63))
    return TransformSpec(nl, sh, mode, cfg, seed)


def apply_pipeline(sv: SubVolume, spec: TransformSpec) -> tuple[SubVolume, TransformSpec]:
    """Apply the scheduled corruptions in the fixed order and record parameters.

    A spec whose parameters are already filled is replayed bit-identically;
    otherwise parameters are sampled from the spec's own seed, making the
    result a pure function of (input, spec).
    """
    assert not (
        spec.cutout is CutoutMode.INNER and spec.cutout is CutoutMode.OUTER
    )  # enum makes this structural; kept as an executable statement of intent
    assert spec.n_active() <= 3
    rng = np.random.default_rng(spec.rng_seed)
    cfg = spec.cfg
    data = sv.data

    bezier = spec.bezier
    if spec.apply_nonlinear:
        if bezier is None:
            direction = Direction.INCREASING if rng.random() < 0.5 else Direction.DECREASING
            bezier = build_intensity_map(rng, direction, cfg.lut_resolution, cfg.strict_monotone)
        data = apply_nonlinear(data, bezier)

    windows = spec.shuffle
    if spec.apply_shuffle:
        if windows is None:
            data, windows = local_pixel_shuffle(data, cfg, rng)
        else:
            data = apply_shuffle_windows(data, windows)

    cmask = spec.cutout_mask
    if spec.cutout is not CutoutMode.NONE:
        if cmask is None:
            cmask = gen_cutout_mask(data.shape, spec.cutout, cfg, rng)
        data = apply_cutout(data, cmask)

    filled = replace(spec, bezier=bezier, shuffle=windows, cutout_mask=cmask)
    return SubVolume(data, sv.origin, sv.source_id), filled


# ---------------------------------------------------------------------------
# record serialization: line-oriented key=value text, floats at repr precision


def _fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _fmt_ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def record_to_text(spec: TransformSpec) -> str:
    """Serialize a (filled or unfilled) transform record."""
    cfg = spec.cfg
    lines = [
        "version = 1",
        f"nonlinear = {str(spec.apply_nonlinear).lower()}",
        f"shuffle = {str(spec.apply_shuffle).lower()}",
        f"cutout = {spec.cutout.value}",
        f"rng_seed = {spec.rng_seed}",
        f"cfg.p_nonlinear = {repr(cfg.p_nonlinear)}",
        f"cfg.p_shuffle = {repr(cfg.p_shuffle)}",
        f"cfg.p_cutout = {repr(cfg.p_cutout)}",
        f"cfg.p_inner = {repr(cfg.p_inner)}",
        f"cfg.lut_resolution = {cfg.lut_resolution}",
        f"cfg.strict_monotone = {str(cfg.strict_monotone).lower()}",
        f"cfg.shuffle_windows = {cfg.shuffle_windows}",
        f"cfg.shuffle_max_extent = {_fmt_ints(cfg.shuffle_max_extent)}",
        f"cfg.cutout_max_windows = {cfg.cutout_max_windows}",
        f"cfg.cutout_max_fraction = {repr(cfg.cutout_max_fraction)}",
    ]
    if cfg.receptive_field is not None:
        lines.append(f"cfg.receptive_field = {_fmt_ints(cfg.receptive_field)}")
    if spec.bezier is not None:
        b = spec.bezier
        lines.append(f"bezier.direction = {b.direction.value}")
        lines.append(f"bezier.resolution = {b.resolution}")
        lines.append(f"bezier.strict_monotone = {str(b.strict_monotone).lower()}")
        for i, (x, y) in enumerate(b.control):
            lines.append(f"bezier.p{i} = {_fmt_floats((x, y))}")
    if spec.shuffle is not None:
        for w in spec.shuffle:
            parts = [_fmt_ints(w.origin), _fmt_ints(w.extent)]
            parts.extend(_fmt_ints(p) for p in w.perms)
            lines.append(f"shuffle.window = {' '.join(parts)}")
    if spec.cutout_mask is not None:
        m = spec.cutout_mask
        lines.append(f"cutout.shape = {_fmt_ints(m.shape)}")
        lines.append(f"cutout.fill = {repr(m.fill_value)}")
        lines.append(f"cutout.fraction_cap = {repr(m.fraction_cap)}")
        for origin, extent in m.windows:
            lines.append(f"cutout.window = {_fmt_ints(origin)} {_fmt_ints(extent)}")
    return "\n".join(lines) + "\n"


def _parse_kv_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def record_from_text(text: str) -> TransformSpec:
    """Parse a record written by :func:`record_to_text`."""
    pairs = _parse_kv_lines(text)
    scalars: dict[str, str] = {}
    shuffle_lines: list[str] = []
    cutout_lines: list[str] = []
    for key, value in pairs:
        if key == "shuffle.window":
            shuffle_lines.append(value)
        elif key == "cutout.window":
            cutout_lines.append(value)
        elif key in scalars:
            raise ValueError(f"duplicate record key {key!r}")
        else:
            scalars[key] = value
    if scalars.get("version") != "1":
        raise ValueError(f"unsupported record version {scalars.get('version')!r}")

    cfg = SchedulerConfig(
        p_nonlinear=float(scalars["cfg.p_nonlinear"]),
        p_shuffle=float(scalars["cfg.p_shuffle"]),
        p_cutout=float(scalars["cfg.p_cutout"]),
        p_inner=float(scalars["cfg.p_inner"]),
        lut_resolution=int(scalars["cfg.lut_resolution"]),
        strict_monotone=scalars["cfg.strict_monotone"] == "true",
        shuffle_windows=int(scalars["cfg.shuffle_windows"]),
        shuffle_max_extent=_ints(scalars["cfg.shuffle_max_extent"]),  # type: ignore[arg-type]
        cutout_max_windows=int(scalars["cfg.cutout_max_windows"]),
        cutout_max_fraction=float(scalars["cfg.cutout_max_fraction"]),
        receptive_field=(
            _ints(scalars["cfg.receptive_field"])  # type: ignore[arg-type]
            if "cfg.receptive_field" in scalars
            else None
        ),
    )

    bezier = None
    if "bezier.direction" in scalars:
        control = []
        for i in range(4):
            x_s, y_s = scalars[f"bezier.p{i}"].split(",")
            control.append((float(x_s), float(y_s)))
        bezier = BezierMap(
            tuple(control),
            Direction(scalars["bezier.direction"]),
            int(scalars["bezier.resolution"]),
            scalars["bezier.strict_monotone"] == "true",
        )

    windows = None
    if scalars.get("shuffle") == "true":
        parsed = []
        for line in shuffle_lines:
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"bad shuffle window line: {line!r}")
            origin = _ints(parts[0])
            extent = _ints(parts[1])
            perms = tuple(_ints(p) for p in parts[2:5])
            parsed.append(ShuffleWindow(origin, extent, perms))  # type: ignore[arg-type]
        windows = tuple(parsed)

    cmask = None
    if "cutout.shape" in scalars:
        cwindows = []
        for line in cutout_lines:
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"bad cutout window line: {line!r}")
            cwindows.append((_ints(parts[0]), _ints(parts[1])))
        cmask = CutoutMask(
            CutoutMode(scalars["cutout"]),
            tuple(cwindows),
            float(scalars["cutout.fill"]),
            _ints(scalars["cutout.shape"]),  # type: ignore[arg-type]
            float(scalars["cutout.fraction_cap"]),
        )

    return TransformSpec(
        apply_nonlinear=scalars["nonlinear"] == "true",
        apply_shuffle=scalars["shuffle"] == "true",
        cutout=CutoutMode(scalars["cutout"]),
        cfg=cfg,
        rng_seed=int(scalars["rng_seed"]),
        bezier=bezier,
        shuffle=windows,
        cutout_mask=cmask,
    )


# canonical enumeration of the twelve scheduler outcomes: identity, the four
# singletons, the five pairs, and the two admissible triples
ALL_OUTCOMES: tuple[tuple[bool, bool, CutoutMode], ...] = (
    (False, False, CutoutMode.NONE),
    (True, False, CutoutMode.NONE),
    (False, True, CutoutMode.NONE),
    (False, False, CutoutMode.OUTER),
    (False, False, CutoutMode.INNER),
    (True, True, CutoutMode.NONE),
    (True, False, CutoutMode.OUTER),
    (True, False, CutoutMode.INNER),
    (False, True, CutoutMode.OUTER),
    (False, True, CutoutMode.INNER),
    (True, True, CutoutMode.OUTER),
    (True, True, CutoutMode.INNER),
)


def outcome_probability(cfg: SchedulerConfig, outcome: tuple[bool, bool, CutoutMode]) -> float:
    """Analytic probability of one scheduler outcome under independence."""
    nl, sh, mode = outcome
    p = cfg.p_nonlinear if nl else 1.0 - cfg.p_nonlinear
    p *= cfg.p_shuffle if sh else 1.0 - cfg.p_shuffle
    if mode is CutoutMode.NONE:
        p *= 1.0 - cfg.p_cutout
    elif mode is CutoutMode.INNER:
        p *= cfg.p_cutout * cfg.p_inner
    else:
        p *= cfg.p_cutout * (1.0 - cfg.p_inner)
    return p
