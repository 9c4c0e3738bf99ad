"""Evaluation metrics and multi-trial experiment protocols.

Metrics are implemented directly: AUC by tie-aware rank counting, overlap by
set arithmetic, and the two-sample t-test with pooled variance and an
incomplete-beta tail.  Protocols aggregate seeded trials into mean, sample
standard deviation, and normal-approximation confidence intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special


def _ranks_with_ties(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank range."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) identity.

    Ties between a positive and a negative score count one half.  Requires
    both classes to be present.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _ranks_with_ties(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two boolean masks; two empty masks count as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / total


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks give 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return inter / union


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    significant: bool
    degenerate: bool = False


def ttest_independent(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> TTestResult:
    """Two-sided independent two-sample t-test with pooled variance.

    The p-value is the regularized incomplete beta I_{v/(v+t^2)}(v/2, 1/2).
    Zero pooled variance is degenerate: p=1 for equal means, p=0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise ValueError("each sample needs at least two observations")
    dof = n + m - 2
    pooled = ((n - 1) * a.var(ddof=1) + (m - 1) * b.var(ddof=1)) / dof
    delta = float(a.mean() - b.mean())
    if pooled == 0.0:
        if delta == 0.0:
            return TTestResult(0.0, 1.0, dof, False, degenerate=True)
        t = math.inf if delta > 0 else -math.inf
        return TTestResult(t, 0.0, dof, True, degenerate=True)
    t = delta / math.sqrt(pooled * (1.0 / n + 1.0 / m))
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTestResult(float(t), p, dof, p < alpha)


@dataclass
class TrialResult:
    """Aggregate of n seeded trials of one method on one task."""

    method: str
    task: str
    metric: str
    values: list[float]

    def __post_init__(self) -> None:
        if len(self.values) < 2:
            raise ValueError("a trial aggregate needs at least 2 values")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def sd(self) -> float:
        return float(np.std(self.values, ddof=1))

    @property
    def ci95(self) -> float:
        """Half-width of the normal-approximation 95% interval."""
        return 1.96 * self.sd / math.sqrt(self.n)


def run_trials(
    experiment: Callable[[int], float],
    n: int = 10,
    base_seed: int = 0,
    method: str = "",
    task: str = "",
    metric: str = "",
) -> TrialResult:
    """Run the experiment with seeds base_seed .. base_seed+n-1 and aggregate."""
    if n < 2:
        raise ValueError("need at least 2 trials")
    values = [float(experiment(base_seed + i)) for i in range(n)]
    return TrialResult(method, task, metric, values)


@dataclass
class SignificanceEntry:
    pair: tuple[str, str]
    result: TTestResult


@dataclass
class AblationResult:
    """Per-scheme trial aggregates plus top-two and bottom-two comparisons."""

    rows: dict[str, TrialResult]
    top_pair: SignificanceEntry | None = None
    bottom_pair: SignificanceEntry | None = None

    def ordered(self) -> list[tuple[str, TrialResult]]:
        return sorted(self.rows.items(), key=lambda kv: kv[1].mean, reverse=True)


def ablation_matrix(
    schemes: Mapping[str, object],
    task,
    n: int = 10,
    base_seed: int = 0,
) -> AblationResult:
    """Train under each corruption scheme and compare the extremes.

    ``task.experiment(scheme)`` must return a seed -> metric callable running
    one end-to-end trial (pretrain under the scheme, then fine-tune).  The
    two best and two worst schemes by mean get significance bridges.
    """
    if len(schemes) < 2:
        raise ValueError("an ablation needs at least 2 schemes")
    rows: dict[str, TrialResult] = {}
    for name, scheme in schemes.items():
        rows[name] = run_trials(
            task.experiment(scheme), n, base_seed, method=name, task=task.name, metric=task.metric
        )
    result = AblationResult(rows)
    ranked = result.ordered()
    (top1, r1), (top2, r2) = ranked[0], ranked[1]
    result.top_pair = SignificanceEntry((top1, top2), ttest_independent(r1.values, r2.values))
    (bot1, rb1), (bot2, rb2) = ranked[-1], ranked[-2]
    result.bottom_pair = SignificanceEntry((bot2, bot1), ttest_independent(rb2.values, rb1.values))
    return result


@dataclass
class SweepCell:
    fraction: float
    init: str
    trials: TrialResult
    train_ids: dict[int, list[str]] = field(default_factory=dict)


@dataclass
class SweepTable:
    """Annotation-budget sweep: performance per (label fraction, init scheme).

    ``reference`` holds the full-data aggregates per init.  ``rows()`` lists
    fractions in increasing order with shortfall (reference mean minus cell
    mean) and a running-minimum shortfall envelope, which is monotone
    nonincreasing by construction.
    """

    fractions: list[float]
    inits: list[str]
    cells: dict[tuple[float, str], SweepCell]
    reference: dict[str, TrialResult]
    task: str = ""
    metric: str = ""

    def rows(self) -> list[dict]:
        out = []
        for init in self.inits:
            envelope = math.inf
            for f in self.fractions:
                cell = self.cells[(f, init)]
                ref_mean = self.reference[init].mean
                shortfall = ref_mean - cell.trials.mean
                envelope = min(envelope, shortfall)
                out.append(
                    {
                        "fraction": f,
                        "init": init,
                        "n": cell.trials.n,
                        "mean": cell.trials.mean,
                        "sd": cell.trials.sd,
                        "ci95": cell.trials.ci95,
                        "reference_mean": ref_mean,
                        "shortfall": shortfall,
                        "shortfall_envelope": envelope,
                    }
                )
        return out


def annotation_sweep(
    fractions: Sequence[float],
    task,
    inits: Sequence[str] = ("scratch", "genesis"),
    n: int = 10,
    base_seed: int = 0,
) -> SweepTable:
    """Fine-tune at growing label budgets under each initialization.

    ``task.budget_experiment(init, fraction)`` must return a seed -> (metric,
    train_ids) callable.  Label subsets are nested per seed because the
    underlying subsampling permutes once per seed and takes prefixes.  The
    full-data runs (fraction 1.0) provide the reference lines.
    """
    fractions = sorted(float(f) for f in fractions)
    if not fractions or fractions[0] <= 0.0 or fractions[-1] > 1.0:
        raise ValueError("fractions must lie in (0, 1]")
    if len(set(fractions)) != len(fractions):
        raise ValueError("fractions must be distinct")
    if n < 2:
        raise ValueError("need at least 2 trials")
    all_fracs = fractions if fractions[-1] == 1.0 else fractions + [1.0]
    cells: dict[tuple[float, str], SweepCell] = {}
    reference: dict[str, TrialResult] = {}
    for init in inits:
        for f in all_fracs:
            runner = task.budget_experiment(init, f)
            values: list[float] = []
            ids: dict[int, list[str]] = {}
            for i in range(n):
                seed = base_seed + i
                value, train_ids = runner(seed)
                values.append(float(value))
                ids[seed] = list(train_ids)
            trials = TrialResult(init, task.name, task.metric, values)
            cells[(f, init)] = SweepCell(f, init, trials, ids)
        reference[init] = cells[(1.0, init)].trials
    return SweepTable(
        fractions=fractions,
        inits=list(inits),
        cells=cells,
        reference=reference,
        task=task.name,
        metric=task.metric,
    )
