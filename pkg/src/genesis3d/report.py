"""Delimited result tables and the figures rendered alongside them.

Every figure the report step produces is backed by a plain-text data file
with series, x, y, and ci columns, so numbers can be checked without
opening the image.  Rendering uses the file-only matplotlib backend.
"""

from __future__ import annotations

import csv
import os
from typing import Iterable, Mapping, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evalstat import SignificanceEntry, SweepTable, TrialResult  # noqa: E402
from .trainer import TrainLog  # noqa: E402

TRIALS_HEADER = ["method", "task", "metric", "n", "mean", "sd", "ci95", "values"]
SWEEP_HEADER = [
    "init", "fraction", "n", "mean", "sd", "ci95",
    "reference_mean", "shortfall", "shortfall_envelope",
]
SWEEP_IDS_HEADER = ["init", "fraction", "seed", "sample_id"]
SIGNIFICANCE_HEADER = ["kind", "method_a", "method_b", "t", "p", "dof", "significant"]
PLOT_DATA_HEADER = ["series", "x", "y", "ci"]


def write_trials_csv(path: str, rows: Sequence[TrialResult]) -> None:
    """One row per method aggregate; raw per-trial values ride along."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIALS_HEADER)
        for r in rows:
            w.writerow(
                [r.method, r.task, r.metric, r.n, repr(r.mean), repr(r.sd), repr(r.ci95),
                 ";".join(repr(v) for v in r.values)]
            )


def read_trials_csv(path: str) -> list[TrialResult]:
    out: list[TrialResult] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRIALS_HEADER:
            raise ValueError(f"unexpected trials header in {path}: {header}")
        for row in reader:
            values = [float(v) for v in row[7].split(";")]
            out.append(TrialResult(row[0], row[1], row[2], values))
    return out


def write_significance_csv(path: str, entries: Mapping[str, SignificanceEntry]) -> None:
    """Pairwise test results keyed by comparison kind (top / bottom)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SIGNIFICANCE_HEADER)
        for kind, entry in entries.items():
            r = entry.result
            w.writerow(
                [kind, entry.pair[0], entry.pair[1], repr(r.t), repr(r.p), r.dof,
                 str(r.significant).lower()]
            )


def read_significance_csv(path: str) -> list[dict]:
    out: list[dict] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SIGNIFICANCE_HEADER:
            raise ValueError(f"unexpected significance header in {path}: {header}")
        for row in reader:
            out.append(
                {
                    "kind": row[0],
                    "pair": (row[1], row[2]),
                    "t": float(row[3]),
                    "p": float(row[4]),
                    "dof": int(row[5]),
                    "significant": row[6] == "true",
                }
            )
    return out


def write_sweep_csv(path: str, table: SweepTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in table.rows():
            w.writerow(
                [row["init"], repr(row["fraction"]), row["n"], repr(row["mean"]),
                 repr(row["sd"]), repr(row["ci95"]), repr(row["reference_mean"]),
                 repr(row["shortfall"]), repr(row["shortfall_envelope"])]
            )


def read_sweep_csv(path: str) -> list[dict]:
    out: list[dict] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_HEADER:
            raise ValueError(f"unexpected sweep header in {path}: {header}")
        for row in reader:
            out.append(
                {
                    "init": row[0],
                    "fraction": float(row[1]),
                    "n": int(row[2]),
                    "mean": float(row[3]),
                    "sd": float(row[4]),
                    "ci95": float(row[5]),
                    "reference_mean": float(row[6]),
                    "shortfall": float(row[7]),
                    "shortfall_envelope": float(row[8]),
                }
            )
    return out


def write_sweep_ids_csv(path: str, table: SweepTable) -> None:
    """Which training samples each (init, fraction, seed) cell actually used."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_IDS_HEADER)
        for init in table.inits:
            for f in table.fractions:
                cell = table.cells[(f, init)]
                for seed in sorted(cell.train_ids):
                    for sid in cell.train_ids[seed]:
                        w.writerow([init, repr(f), seed, sid])


def read_sweep_ids_csv(path: str) -> dict[tuple[str, float, int], list[str]]:
    out: dict[tuple[str, float, int], list[str]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_IDS_HEADER:
            raise ValueError(f"unexpected sweep-ids header in {path}: {header}")
        for row in reader:
            out.setdefault((row[0], float(row[1]), int(row[2])), []).append(row[3])
    return out


def write_plot_data(path: str, series: Mapping[str, tuple[Iterable, Iterable, Iterable]]) -> None:
    """Text twin of a figure: one row per plotted point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_DATA_HEADER)
        for name, (xs, ys, cis) in series.items():
            for x, y, ci in zip(xs, ys, cis):
                w.writerow([name, repr(float(x)), repr(float(y)), repr(float(ci))])


# ---------------------------------------------------------------------------
# grayscale image files


def write_pgm(path: str, image) -> None:
    """Binary 8-bit grayscale (P5); rows are the first array axis."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-d uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise ValueError(f"{path}: unsupported PGM header")
        w, h = int(dims[0]), int(dims[1])
        payload = fh.read(w * h)
        if len(payload) != w * h:
            raise ValueError(f"{path}: truncated PGM payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# figures


def plot_ablation(path: str, rows: Sequence[TrialResult],
                  significance: Sequence[dict] = ()) -> None:
    """Mean metric per corruption scheme with 95% bars and test bridges."""
    ordered = sorted(rows, key=lambda r: r.mean, reverse=True)
    names = [r.method for r in ordered]
    means = [r.mean for r in ordered]
    cis = [r.ci95 for r in ordered]
    fig, ax = plt.subplots(figsize=(1.4 * max(5, len(names)), 4.2))
    ax.bar(range(len(names)), means, yerr=cis, capsize=4, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel(f"{ordered[0].metric} (mean of {ordered[0].n} trials, 95% CI)")
    ax.set_title(f"corruption schemes on {ordered[0].task}")
    top = max(m + c for m, c in zip(means, cis))
    pad = 0.04 * max(top, 1e-9)
    index = {n: i for i, n in enumerate(names)}
    level = top + pad
    for entry in significance:
        a, b = entry["pair"]
        if a not in index or b not in index:
            continue
        xa, xb = index[a], index[b]
        ax.plot([xa, xa, xb, xb], [level, level + pad / 2, level + pad / 2, level],
                color="black", linewidth=1.0)
        ax.text((xa + xb) / 2, level + pad * 0.6, f"p={entry['p']:.3g}",
                ha="center", va="bottom", fontsize=8)
        level += 2.2 * pad
    ax.set_ylim(0, level + pad)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(path: str, rows: Sequence[dict]) -> None:
    """Metric against label budget, one curve per init, full-data reference."""
    inits = sorted({r["init"] for r in rows})
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, init in enumerate(inits):
        mine = sorted((r for r in rows if r["init"] == init), key=lambda r: r["fraction"])
        xs = [r["fraction"] for r in mine]
        ys = [r["mean"] for r in mine]
        cis = [r["ci95"] for r in mine]
        color = colors[i % len(colors)]
        ax.errorbar(xs, ys, yerr=cis, marker="o", capsize=3, label=init, color=color)
        ax.axhline(mine[0]["reference_mean"], linestyle="--", linewidth=1.0,
                   color=color, alpha=0.6)
    ax.set_xlabel("labeled fraction of training crops")
    ax.set_ylabel("test metric (mean, 95% CI)")
    ax.set_title("annotation budget sweep (dashed: full-data reference)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(path: str, logs: Mapping[str, TrainLog]) -> None:
    """Loss and validation metric curves, one line per log."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    for name, log in logs.items():
        epochs = [r.epoch for r in log.rows]
        losses = [r.train_loss for r in log.rows]
        metrics = [r.val_metric for r in log.rows]
        ax1.plot(epochs, losses, marker=".", label=name)
        ax2.plot(epochs, metrics, marker=".", label=name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation metric")
    ax1.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# directory-level rendering


def render_report(run_dir: str) -> list[str]:
    """Render figures and plot-data twins for whatever results run_dir holds.

    Looks for ablation.csv (plus significance.csv), sweep.csv, and logs/*.csv;
    raises FileNotFoundError when none are present.
    """
    written: list[str] = []
    ablation_path = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(ablation_path):
        rows = read_trials_csv(ablation_path)
        sig_path = os.path.join(run_dir, "significance.csv")
        significance = read_significance_csv(sig_path) if os.path.exists(sig_path) else []
        fig_path = os.path.join(run_dir, "ablation.png")
        plot_ablation(fig_path, rows, significance)
        data_path = os.path.join(run_dir, "ablation_plotdata.csv")
        ordered = sorted(rows, key=lambda r: r.mean, reverse=True)
        write_plot_data(
            data_path,
            {r.method: ([i], [r.mean], [r.ci95]) for i, r in enumerate(ordered)},
        )
        written += [fig_path, data_path]

    sweep_path = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep_path):
        rows = read_sweep_csv(sweep_path)
        fig_path = os.path.join(run_dir, "sweep.png")
        plot_sweep(fig_path, rows)
        series: dict[str, tuple[list, list, list]] = {}
        for init in sorted({r["init"] for r in rows}):
            mine = sorted((r for r in rows if r["init"] == init), key=lambda r: r["fraction"])
            series[init] = (
                [r["fraction"] for r in mine],
                [r["mean"] for r in mine],
                [r["ci95"] for r in mine],
            )
        data_path = os.path.join(run_dir, "sweep_plotdata.csv")
        write_plot_data(data_path, series)
        written += [fig_path, data_path]

    logs_dir = os.path.join(run_dir, "logs")
    log_files = []
    if os.path.isdir(logs_dir):
        log_files = sorted(
            f for f in os.listdir(logs_dir) if f.endswith(".csv")
        )
    if log_files:
        logs = {
            os.path.splitext(f)[0]: TrainLog.from_csv(os.path.join(logs_dir, f))
            for f in log_files
        }
        fig_path = os.path.join(run_dir, "training.png")
        plot_training(fig_path, logs)
        data_path = os.path.join(run_dir, "training_plotdata.csv")
        write_plot_data(
            data_path,
            {
                name: (
                    [r.epoch for r in log.rows],
                    [r.val_metric for r in log.rows],
                    [0.0] * len(log.rows),
                )
                for name, log in logs.items()
            },
        )
        written += [fig_path, data_path]

    if not written:
        raise FileNotFoundError(f"no report inputs found in {run_dir}")
    return written
