"""Tests for metrics, the t-test, and the experiment protocols.

The AUC oracle is direct pair counting, the rank helper is checked against
scipy.stats.rankdata, and the t-test against scipy.stats.ttest_ind, so every
hand-rolled routine has an independent second route.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from genesis3d.evalstat import (
    AblationResult,
    SweepTable,
    TrialResult,
    _ranks_with_ties,
    ablation_matrix,
    annotation_sweep,
    auc,
    dice,
    iou,
    run_trials,
    ttest_independent,
)


def _pairwise_auc(scores, labels):
    """Count concordant positive/negative pairs; ties score one half."""
    pos = scores[labels]
    neg = scores[~labels]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# ranks and AUC


def test_ranks_match_scipy_rankdata(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        vals = rng.integers(0, 8, size=n).astype(np.float64)
        assert np.array_equal(_ranks_with_ties(vals), stats.rankdata(vals))


def test_auc_equals_pair_counting_on_random_instances(rng):
    for _ in range(200):
        n = int(rng.integers(2, 50))
        labels = rng.uniform(size=n) < 0.5
        if labels.all() or not labels.any():
            continue
        if rng.random() < 0.5:
            scores = rng.normal(size=n)
        else:
            # coarse integer scores force plenty of ties
            scores = rng.integers(0, 4, size=n).astype(np.float64)
        assert auc(scores, labels) == _pairwise_auc(scores, labels)


def test_auc_known_values():
    labels = np.array([0, 0, 1, 1], dtype=bool)
    assert auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0
    assert auc(np.array([0.5, 0.5, 0.5, 0.5]), labels) == 0.5


def test_auc_rejects_single_class_and_length_mismatch():
    with pytest.raises(ValueError, match="positive"):
        auc(np.array([0.1, 0.9]), np.array([True, True]))
    with pytest.raises(ValueError, match="equal length"):
        auc(np.array([0.1, 0.9, 0.5]), np.array([True, False]))


# ---------------------------------------------------------------------------
# overlap metrics


def test_dice_iou_hand_values():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, :2] = True
    b[0, 1:3] = True
    # |a|=2, |b|=2, intersection 1, union 3
    assert dice(a, b) == 0.5
    assert iou(a, b) == pytest.approx(1 / 3)


def test_dice_iou_empty_masks_count_as_perfect():
    empty = np.zeros((3, 3), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert iou(empty, empty) == 1.0


def test_dice_iou_algebraic_identity(rng):
    for _ in range(300):
        shape = tuple(rng.integers(2, 9, size=3))
        a = rng.uniform(size=shape) < rng.uniform(0.0, 1.0)
        b = rng.uniform(size=shape) < rng.uniform(0.0, 1.0)
        d = dice(a, b)
        assert iou(a, b) == pytest.approx(d / (2.0 - d), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_dice_iou_identity_property(data):
    # holds for every mask pair, including empty and saturated ones
    shape = data.draw(hnp.array_shapes(min_dims=1, max_dims=3, max_side=5))
    a = data.draw(hnp.arrays(np.bool_, shape))
    b = data.draw(hnp.arrays(np.bool_, shape))
    d = dice(a, b)
    assert iou(a, b) == pytest.approx(d / (2.0 - d), abs=1e-12)


def test_overlap_metrics_reject_shape_mismatch():
    a = np.zeros((2, 2), dtype=bool)
    b = np.zeros((2, 3), dtype=bool)
    with pytest.raises(ValueError, match="shapes differ"):
        dice(a, b)
    with pytest.raises(ValueError, match="shapes differ"):
        iou(a, b)


# ---------------------------------------------------------------------------
# t-test


def test_ttest_matches_scipy_on_random_samples(rng):
    for _ in range(60):
        n = int(rng.integers(2, 12))
        m = int(rng.integers(2, 12))
        a = rng.normal(loc=0.0, scale=1.0, size=n)
        b = rng.normal(loc=rng.uniform(-1, 1), scale=1.5, size=m)
        ours = ttest_independent(a, b)
        ref = stats.ttest_ind(a, b, equal_var=True)
        assert abs(ours.t - ref.statistic) < 1e-9
        assert abs(ours.p - ref.pvalue) < 1e-9
        assert ours.dof == n + m - 2


def test_ttest_textbook_example():
    # two small samples with pooled sd 1.0 and mean gap 2.0
    a = [5.0, 6.0, 7.0]
    b = [3.0, 4.0, 5.0]
    r = ttest_independent(a, b)
    ref = stats.ttest_ind(a, b, equal_var=True)
    assert r.t == pytest.approx(ref.statistic, abs=1e-12)
    assert r.p == pytest.approx(ref.pvalue, abs=1e-12)
    assert r.significant == (r.p < 0.05)


def test_ttest_degenerate_zero_variance():
    same = ttest_independent([2.0, 2.0], [2.0, 2.0])
    assert same.degenerate and same.p == 1.0 and same.t == 0.0 and not same.significant
    apart = ttest_independent([3.0, 3.0], [2.0, 2.0])
    assert apart.degenerate and apart.p == 0.0 and apart.t == math.inf and apart.significant
    below = ttest_independent([1.0, 1.0], [2.0, 2.0])
    assert below.t == -math.inf


def test_ttest_needs_two_observations_per_sample():
    with pytest.raises(ValueError, match="two observations"):
        ttest_independent([1.0], [2.0, 3.0])


# ---------------------------------------------------------------------------
# trial aggregation


def test_trial_result_statistics():
    r = TrialResult("m", "t", "dice", [0.5, 0.7, 0.6, 0.8])
    assert r.n == 4
    assert r.mean == pytest.approx(0.65)
    assert r.sd == pytest.approx(np.std([0.5, 0.7, 0.6, 0.8], ddof=1))
    assert r.ci95 == pytest.approx(1.96 * r.sd / 2.0)


def test_trial_result_needs_two_values():
    with pytest.raises(ValueError, match="at least 2"):
        TrialResult("m", "t", "dice", [0.5])


def test_run_trials_passes_consecutive_seeds():
    seen = []

    def experiment(seed):
        seen.append(seed)
        return float(seed)

    r = run_trials(experiment, n=4, base_seed=10, method="m", task="t", metric="x")
    assert seen == [10, 11, 12, 13]
    assert r.values == [10.0, 11.0, 12.0, 13.0]
    with pytest.raises(ValueError, match="at least 2"):
        run_trials(experiment, n=1)


# ---------------------------------------------------------------------------
# ablation protocol


class _AblationTask:
    name = "stub-task"
    metric = "dice"

    def experiment(self, offset):
        def run(seed):
            return offset + 0.01 * seed

        return run


def test_ablation_matrix_ranks_and_bridges():
    schemes = {"lo": 0.2, "hi": 0.8, "mid": 0.5}
    result = ablation_matrix(schemes, _AblationTask(), n=4, base_seed=0)
    assert set(result.rows) == {"lo", "mid", "hi"}
    names = [name for name, _ in result.ordered()]
    assert names == ["hi", "mid", "lo"]
    assert result.top_pair.pair == ("hi", "mid")
    assert result.bottom_pair.pair == ("mid", "lo")
    # equal spreads, distinct means: both bridges are strongly significant
    assert result.top_pair.result.p < 0.05
    assert result.bottom_pair.result.t > 0
    assert result.rows["hi"].mean == pytest.approx(0.8 + 0.015)


def test_ablation_matrix_needs_two_schemes():
    with pytest.raises(ValueError, match="at least 2"):
        ablation_matrix({"only": 0.5}, _AblationTask(), n=2)


# ---------------------------------------------------------------------------
# annotation-budget sweep


class _SweepTask:
    name = "stub-task"
    metric = "dice"

    def budget_experiment(self, init, fraction):
        base = 0.6 if init == "genesis" else 0.5

        def run(seed):
            value = base + 0.3 * fraction + 0.001 * seed
            k = max(1, int(round(fraction * 10)))
            ids = [f"s{seed}-{i}" for i in range(k)]
            return value, ids

        return run


def test_annotation_sweep_layout_and_nesting():
    table = annotation_sweep([0.5, 0.1, 0.2], _SweepTask(), n=3, base_seed=0)
    assert table.fractions == [0.1, 0.2, 0.5]
    assert table.inits == ["scratch", "genesis"]
    # the reference comes from an implicit full-label run
    assert set(table.cells) == {(f, i) for f in (0.1, 0.2, 0.5, 1.0)
                                for i in ("scratch", "genesis")}
    assert table.reference["genesis"].mean == pytest.approx(0.9 + 0.001)
    for init in table.inits:
        for seed in range(3):
            small = table.cells[(0.1, init)].train_ids[seed]
            mid = table.cells[(0.2, init)].train_ids[seed]
            large = table.cells[(0.5, init)].train_ids[seed]
            assert set(small) <= set(mid) <= set(large)

    rows = table.rows()
    assert len(rows) == 2 * 3
    expected_keys = {
        "fraction", "init", "n", "mean", "sd", "ci95",
        "reference_mean", "shortfall", "shortfall_envelope",
    }
    for row in rows:
        assert set(row) == expected_keys
        assert row["shortfall"] == pytest.approx(
            row["reference_mean"] - row["mean"], abs=1e-12
        )
    for init in table.inits:
        mine = [r for r in rows if r["init"] == init]
        assert [r["fraction"] for r in mine] == [0.1, 0.2, 0.5]
        envelopes = [r["shortfall_envelope"] for r in mine]
        assert all(b <= a + 1e-12 for a, b in zip(envelopes, envelopes[1:]))


def test_annotation_sweep_keeps_explicit_full_fraction():
    table = annotation_sweep([0.5, 1.0], _SweepTask(), n=2)
    assert table.fractions == [0.5, 1.0]
    assert [r["fraction"] for r in table.rows() if r["init"] == "genesis"] == [0.5, 1.0]
    full = [r for r in table.rows() if r["fraction"] == 1.0]
    assert all(r["shortfall"] == pytest.approx(0.0, abs=1e-12) for r in full)


def test_annotation_sweep_validates_inputs():
    task = _SweepTask()
    with pytest.raises(ValueError, match="fractions"):
        annotation_sweep([], task)
    with pytest.raises(ValueError, match="fractions"):
        annotation_sweep([0.0, 0.5], task)
    with pytest.raises(ValueError, match="fractions"):
        annotation_sweep([0.5, 1.5], task)
    with pytest.raises(ValueError, match="distinct"):
        annotation_sweep([0.5, 0.5], task)
    with pytest.raises(ValueError, match="trials"):
        annotation_sweep([0.5], task, n=1)
