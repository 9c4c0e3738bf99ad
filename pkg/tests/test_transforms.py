import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genesis3d.sampler import SubVolume
from genesis3d.transforms import (
    ALL_OUTCOMES,
    BezierMap,
    CutoutMask,
    CutoutMode,
    Direction,
    SchedulerConfig,
    ShuffleWindow,
    TransformSpec,
    apply_cutout,
    apply_nonlinear,
    apply_pipeline,
    apply_shuffle_windows,
    bezier_lut,
    bezier_point,
    build_intensity_map,
    gen_cutout_mask,
    local_pixel_shuffle,
    outcome_probability,
    record_from_text,
    record_to_text,
    schedule,
)

SMALL = SchedulerConfig(
    lut_resolution=1000,
    shuffle_windows=40,
    shuffle_max_extent=(4, 4, 2),
    cutout_max_windows=4,
)


def _sv(rng, shape=(16, 16, 8)):
    return SubVolume(rng.uniform(0.05, 0.95, size=shape).astype(np.float32), (0, 0, 0), "sv")


def _de_casteljau(points, t):
    # independent evaluation: repeated linear interpolation of control points
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    while len(pts) > 1:
        pts = [(1.0 - t) * a + t * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]


def test_bezier_point_matches_de_casteljau(rng):
    for _ in range(20):
        control = [tuple(rng.uniform(size=2)) for _ in range(4)]
        for t in np.linspace(0.0, 1.0, 17):
            x, y = bezier_point(*control, t)
            ref = _de_casteljau(control, float(t))
            assert abs(x - ref[0]) < 1e-12
            assert abs(y - ref[1]) < 1e-12


def test_bezier_endpoints_exact():
    control = ((0.0, 0.0), (0.3, 0.9), (0.7, 0.1), (1.0, 1.0))
    assert bezier_point(*control, 0.0) == (0.0, 0.0)
    assert bezier_point(*control, 1.0) == (1.0, 1.0)
    with pytest.raises(ValueError):
        bezier_point(*control, 1.5)


unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
point = st.tuples(unit, unit)


@settings(max_examples=200, deadline=None)
@given(control=st.tuples(point, point, point, point))
def test_bezier_curve_stays_in_control_hull(control):
    # the curve is a convex combination of its control points, so it can
    # never leave their bounding box, and t = 0 / 1 hit the end points
    t = np.linspace(0.0, 1.0, 101)
    x, y = bezier_point(*control, t)
    cx = [p[0] for p in control]
    cy = [p[1] for p in control]
    eps = 1e-12
    assert np.all(x >= min(cx) - eps) and np.all(x <= max(cx) + eps)
    assert np.all(y >= min(cy) - eps) and np.all(y <= max(cy) + eps)
    assert abs(x[0] - control[0][0]) < eps and abs(y[0] - control[0][1]) < eps
    assert abs(x[-1] - control[3][0]) < eps and abs(y[-1] - control[3][1]) < eps


def test_bezier_map_validation():
    ctrl3 = ((0.0, 0.0), (0.5, 0.5), (1.0, 1.0))
    with pytest.raises(ValueError):
        BezierMap(ctrl3, Direction.INCREASING, 2000)
    ctrl4 = ((0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0))
    with pytest.raises(ValueError):
        BezierMap(ctrl4, Direction.INCREASING, 10)
    bad = ((0.0, 0.0), (1.5, 0.5), (0.5, 0.5), (1.0, 1.0))
    with pytest.raises(ValueError):
        BezierMap(bad, Direction.INCREASING, 2000)


def test_lut_x_grid_is_sorted(rng):
    for direction in Direction:
        for strict in (False, True):
            bmap = build_intensity_map(rng, direction, 2000, strict)
            xs, ys = bezier_lut(bmap)
            assert np.all(np.diff(xs) >= 0)
            if strict:
                dy = np.diff(ys)
                assert np.all(dy >= 0) if direction is Direction.INCREASING else np.all(dy <= 0)


def test_nonlinear_endpoint_mapping(rng):
    ends = np.array([[[0.0, 1.0]]], dtype=np.float32)
    for _ in range(5):
        inc = build_intensity_map(rng, Direction.INCREASING, 2000)
        out = apply_nonlinear(ends, inc)
        assert np.allclose(out[0, 0], [0.0, 1.0], atol=1e-6)
        dec = build_intensity_map(rng, Direction.DECREASING, 2000)
        out = apply_nonlinear(ends, dec)
        assert np.allclose(out[0, 0], [1.0, 0.0], atol=1e-6)


def test_nonlinear_is_valuewise_and_bounded(rng):
    bmap = build_intensity_map(rng, Direction.INCREASING, 2000)
    data = rng.uniform(size=(6, 5, 4)).astype(np.float32)
    out = apply_nonlinear(data, bmap)
    assert out.shape == data.shape
    assert out.dtype == np.float32
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    # equal inputs map to equal outputs
    tied = np.full((3, 3, 3), 0.37, dtype=np.float32)
    tied_out = apply_nonlinear(tied, bmap)
    assert np.all(tied_out == tied_out.flat[0])


def test_strict_monotone_preserves_order(rng):
    vals = np.sort(rng.uniform(size=64)).astype(np.float32).reshape((4, 4, 4))
    inc = build_intensity_map(rng, Direction.INCREASING, 2000, strict_monotone=True)
    out = apply_nonlinear(vals.reshape(-1)[None, None, :], inc)[0, 0]
    assert np.all(np.diff(out) >= 0)
    dec = build_intensity_map(rng, Direction.DECREASING, 2000, strict_monotone=True)
    out = apply_nonlinear(vals.reshape(-1)[None, None, :], dec)[0, 0]
    assert np.all(np.diff(out) <= 0)


def test_shuffle_window_validation():
    with pytest.raises(ValueError):
        ShuffleWindow((0, 0, 0), (2, 2, 0), ((0, 1), (1, 0), ()))
    with pytest.raises(ValueError):
        ShuffleWindow((0, 0, 0), (2, 2, 1), ((0, 1), (0, 0), (0,)))


def test_shuffle_preserves_multiset(rng):
    sv = _sv(rng)
    out, windows = local_pixel_shuffle(sv.data, SMALL, rng)
    assert len(windows) == SMALL.shuffle_windows
    assert np.array_equal(np.sort(out.ravel()), np.sort(sv.data.ravel()))
    assert not np.array_equal(out, sv.data)
    for w in windows:
        assert all(e <= m for e, m in zip(w.extent, SMALL.shuffle_max_extent))
        assert all(o + e <= d for o, e, d in zip(w.origin, w.extent, sv.data.shape))


def test_shuffle_identity_perms_is_noop(rng):
    sv = _sv(rng, shape=(6, 6, 4))
    w = ShuffleWindow((1, 1, 0), (3, 2, 2), ((0, 1, 2), (0, 1), (0, 1)))
    assert np.array_equal(apply_shuffle_windows(sv.data, (w,)), sv.data)


def test_shuffle_matches_manual_axis_permutation(rng):
    data = rng.uniform(size=(5, 4, 3)).astype(np.float32)
    w = ShuffleWindow((1, 0, 1), (3, 2, 2), ((2, 0, 1), (1, 0), (0, 1)))
    out = apply_shuffle_windows(data, (w,))
    manual = data.copy()
    block = manual[1:4, 0:2, 1:3]
    block = block[(2, 0, 1), :, :]
    block = block[:, (1, 0), :]
    block = block[:, :, (0, 1)]
    manual[1:4, 0:2, 1:3] = block
    assert np.array_equal(out, manual)
    assert np.array_equal(out[0], data[0])


def test_receptive_field_caps_shuffle_extent():
    with pytest.raises(ValueError, match="receptive field"):
        SchedulerConfig(shuffle_max_extent=(8, 8, 4), receptive_field=(8, 16, 16))
    SchedulerConfig(shuffle_max_extent=(8, 8, 4), receptive_field=(9, 9, 5))


def test_cutout_mask_semantics(rng):
    shape = (16, 16, 8)
    inner = CutoutMask(
        CutoutMode.INNER, (((2, 2, 1), (4, 4, 2)), ((10, 10, 4), (3, 3, 2))), 0.33, shape
    )
    data = rng.uniform(0.4, 0.6, size=shape).astype(np.float32)
    out = apply_cutout(data, inner)
    m = inner.mask()
    assert np.all(out[m] == np.float32(0.33))
    assert np.array_equal(out[~m], data[~m])
    outer = CutoutMask(CutoutMode.OUTER, (((1, 1, 0), (15, 15, 8)),), 0.9, shape)
    out2 = apply_cutout(data, outer)
    m2 = outer.mask()
    assert np.all(out2[m2] == np.float32(0.9))
    assert np.array_equal(out2[~m2], data[~m2])
    assert outer.masked_fraction() <= 0.25


def test_cutout_mask_cap_enforced():
    with pytest.raises(ValueError, match="exceeds cap"):
        CutoutMask(CutoutMode.INNER, (((0, 0, 0), (16, 16, 8)),), 0.5, (16, 16, 8))
    with pytest.raises(ValueError):
        CutoutMask(CutoutMode.NONE, (), 0.5, (4, 4, 4))
    with pytest.raises(ValueError):
        CutoutMask(CutoutMode.INNER, (((0, 0, 0), (1, 1, 1)),), 1.5, (16, 16, 8))


def test_gen_cutout_mask_always_respects_cap(rng):
    shape = (16, 16, 8)
    for mode in (CutoutMode.INNER, CutoutMode.OUTER):
        for _ in range(50):
            cmask = gen_cutout_mask(shape, mode, SMALL, rng)
            assert cmask.mode is mode
            assert cmask.masked_fraction() <= SMALL.cutout_max_fraction + 1e-12
            assert 0.0 <= cmask.fill_value <= 1.0
    # a tight cap forces the deterministic fallback path for outer cutout
    tight = SchedulerConfig(cutout_max_fraction=0.01, cutout_max_windows=1)
    for _ in range(10):
        cmask = gen_cutout_mask(shape, CutoutMode.OUTER, tight, rng)
        assert cmask.masked_fraction() <= 0.01 + 1e-12


def test_scheduler_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(p_nonlinear=1.5)
    with pytest.raises(ValueError):
        SchedulerConfig(lut_resolution=10)
    with pytest.raises(ValueError):
        SchedulerConfig(cutout_max_fraction=0.3)
    with pytest.raises(ValueError):
        SchedulerConfig(shuffle_max_extent=(0, 4, 4))


def test_schedule_degenerate_probabilities(rng):
    forced = SchedulerConfig(p_nonlinear=1.0, p_shuffle=0.0, p_cutout=1.0, p_inner=1.0)
    for _ in range(25):
        spec = schedule(forced, rng)
        assert spec.outcome() == (True, False, "inner")
    off = SchedulerConfig(p_nonlinear=0.0, p_shuffle=0.0, p_cutout=0.0)
    for _ in range(25):
        spec = schedule(off, rng)
        assert spec.outcome() == (False, False, "none")
        assert spec.n_active() == 0


def test_at_most_three_active(rng):
    for _ in range(300):
        spec = schedule(SchedulerConfig(), rng)
        assert spec.n_active() <= 3


def test_outcome_probabilities_form_a_distribution(rng):
    for _ in range(10):
        cfg = SchedulerConfig(
            p_nonlinear=float(rng.uniform()),
            p_shuffle=float(rng.uniform()),
            p_cutout=float(rng.uniform()),
            p_inner=float(rng.uniform()),
        )
        probs = [outcome_probability(cfg, o) for o in ALL_OUTCOMES]
        assert all(p >= 0 for p in probs)
        assert abs(sum(probs) - 1.0) < 1e-12
    cfg = SchedulerConfig(p_nonlinear=0.9, p_shuffle=0.5, p_cutout=0.9, p_inner=0.5)
    ident = outcome_probability(cfg, (False, False, CutoutMode.NONE))
    assert abs(ident - 0.1 * 0.5 * 0.1) < 1e-15
    triple = outcome_probability(cfg, (True, True, CutoutMode.INNER))
    assert abs(triple - 0.9 * 0.5 * 0.45) < 1e-15


def test_identity_pipeline_is_bit_exact(rng):
    sv = _sv(rng)
    spec = TransformSpec(False, False, CutoutMode.NONE, SMALL, rng_seed=99)
    out, filled = apply_pipeline(sv, spec)
    assert np.array_equal(out.data, sv.data)
    assert filled.bezier is None and filled.shuffle is None and filled.cutout_mask is None


def test_filled_spec_replays_bit_identically(rng):
    sv = _sv(rng)
    spec = TransformSpec(True, True, CutoutMode.INNER, SMALL, rng_seed=1234)
    out1, filled = apply_pipeline(sv, spec)
    assert filled.bezier is not None
    assert filled.shuffle is not None
    assert filled.cutout_mask is not None
    out2, filled2 = apply_pipeline(sv, filled)
    assert np.array_equal(out1.data, out2.data)
    assert filled2 == filled
    assert out1.origin == sv.origin and out1.source_id == sv.source_id


def test_pipeline_order_matches_manual_composition(rng):
    sv = _sv(rng)
    spec = TransformSpec(True, True, CutoutMode.OUTER, SMALL, rng_seed=77)
    out, filled = apply_pipeline(sv, spec)
    manual = apply_nonlinear(sv.data, filled.bezier)
    manual = apply_shuffle_windows(manual, filled.shuffle)
    manual = apply_cutout(manual, filled.cutout_mask)
    assert np.array_equal(out.data, manual)


def test_record_roundtrip_replays_and_is_stable(rng):
    sv = _sv(rng)
    for outcome in ALL_OUTCOMES:
        nl, sh, mode = outcome
        spec = TransformSpec(nl, sh, mode, SMALL, rng_seed=int(rng.integers(2**31)))
        out1, filled = apply_pipeline(sv, spec)
        text = record_to_text(filled)
        parsed = record_from_text(text)
        out2, refilled = apply_pipeline(sv, parsed)
        assert np.array_equal(out1.data, out2.data)
        assert record_to_text(refilled) == text


def test_record_parser_rejects_malformed_text(rng):
    sv = _sv(rng)
    spec = TransformSpec(True, False, CutoutMode.NONE, SMALL, rng_seed=5)
    _, filled = apply_pipeline(sv, spec)
    text = record_to_text(filled)
    with pytest.raises(ValueError, match="version"):
        record_from_text(text.replace("version = 1", "version = 9"))
    with pytest.raises(ValueError, match="duplicate"):
        record_from_text(text + "rng_seed = 5\n")
    with pytest.raises(ValueError, match="key = value"):
        record_from_text(text + "not a record line\n")
    # comments and blank lines are tolerated
    spec2 = record_from_text("# note\n\n" + text)
    assert spec2.rng_seed == filled.rng_seed
