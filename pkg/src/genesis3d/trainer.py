"""Proxy (restoration) pretraining and target-task fine-tuning.

The proxy loop trains the restoration U-Net with plain SGD and a
reduce-on-plateau schedule; fine-tuning uses Adam with early stopping and
always returns the best-validation model.  Batch preparation is seeded per
(epoch, batch) so the consumed sequence is identical regardless of how many
worker threads prepare it.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .evalstat import auc, dice
from .model import Checkpoint, UNetConfig, build_restoration_unet, checkpoint_from_graph
from .sampler import SamplerConfig, SubVolume, crop_subvolumes
from .tensornet import ComputeGraph, Tensor
from .transforms import SchedulerConfig, apply_pipeline, schedule
from .volume import Volume


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch training history; ``monitor`` says whether lower or higher is better."""

    rows: list[LogRow] = field(default_factory=list)
    monitor: str = "min"

    def val_history(self) -> list[float]:
        return [r.val_metric for r in self.rows]

    @property
    def best_epoch(self) -> int:
        if not self.rows:
            raise ValueError("empty training log")
        vals = self.val_history()
        best = min(vals) if self.monitor == "min" else max(vals)
        return self.rows[vals.index(best)].epoch

    @property
    def best_metric(self) -> float:
        vals = self.val_history()
        return min(vals) if self.monitor == "min" else max(vals)

    def signature(self) -> list[tuple[int, str, str, str]]:
        """Deterministic columns only; wall seconds are excluded.

        Floats are compared through repr so the nan placeholder in the
        epoch-0 row compares equal to itself.
        """
        return [(r.epoch, repr(r.train_loss), repr(r.val_metric), repr(r.lr)) for r in self.rows]

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_metric,lr,seconds\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.val_metric!r},{r.lr!r},{r.seconds!r}\n")

    @classmethod
    def from_csv(cls, path: str, monitor: str = "min") -> "TrainLog":
        rows = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "epoch,train_loss,val_metric,lr,seconds":
                raise ValueError(f"{path}: unexpected header {header!r}")
            for line in fh:
                if not line.strip():
                    continue
                e, tl, vm, lr, sec = line.strip().split(",")
                rows.append(LogRow(int(e), float(tl), float(vm), float(lr), float(sec)))
        return cls(rows, monitor)


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    transpose: bool = True
    rotate: bool = True
    noise_sigma: float = 0.01

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class ProxyTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    crops_per_volume: int = 8
    val_fraction: float = 0.1
    lr0: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-4
    seed: int = 0
    threads: int = 1
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 2 or self.crops_per_volume < 1:
            raise ValueError("need epochs >= 1, batch_size >= 2, crops_per_volume >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lr0 <= 0 or not 0.0 < self.plateau_factor < 1.0 or self.min_lr <= 0:
            raise ValueError("bad learning-rate hyperparameters")
        if self.plateau_patience < 1 or self.threads < 1:
            raise ValueError("plateau_patience and threads must be >= 1")


@dataclass(frozen=True)
class TargetTrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 20
    label_fraction: float = 1.0
    seed: int = 0
    threads: int = 1
    loss: str = "bce"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.loss not in ("bce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.early_stop_patience < 1 or self.threads < 1:
            raise ValueError("early_stop_patience and threads must be >= 1")
        if self.lr <= 0 or not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1 or self.adam_eps <= 0:
            raise ValueError("bad Adam hyperparameters")


# ---------------------------------------------------------------------------
# losses and optimizer steps


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    d = tn.sub(pred, target)
    return tn.tmean(tn.mul(d, d))


def bce_loss(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    # squeeze predictions away from {0, 1} so the logs stay finite
    p = tn.add(tn.mul(pred, 1.0 - 2.0 * eps), eps)
    pos = tn.mul(target, tn.log(p))
    neg = tn.mul(1.0 - target, tn.log(1.0 - p))
    return -tn.tmean(tn.add(pos, neg))


def sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


class AdamState:
    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: list[Tensor], state: AdamState, cfg: TargetTrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**state.t)
        v_hat = v / (1.0 - b2**state.t)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def plateau_lr(val_history: list[float], cfg: ProxyTrainConfig) -> float:
    """Replay the reduce-on-plateau rule over a validation history.

    The rate halves (by ``plateau_factor``) whenever the best value has not
    improved for ``plateau_patience`` consecutive epochs, never dropping
    below ``min_lr``; the stall counter resets after each cut.
    """
    lr = cfg.lr0
    best = math.inf
    since = 0
    for v in val_history:
        if v < best:
            best = v
            since = 0
        else:
            since += 1
            if since >= cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, cfg.min_lr)
                since = 0
    return lr


# ---------------------------------------------------------------------------
# augmentation


def augment_sample(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Random flips, transposition, right-angle in-plane rotation, and noise.

    Geometric operations apply identically to the mask; the Gaussian noise
    (clamped back to [0, 1]) applies to the image only.  Transposition and
    odd rotations are skipped when the in-plane extents differ.
    """
    img = image
    if cfg.flip:
        for ax in range(3):
            if rng.random() < 0.5:
                img = np.flip(img, axis=ax)
                mask = np.flip(mask, axis=ax) if mask is not None else None
    square = img.shape[0] == img.shape[1]
    if cfg.transpose and square and rng.random() < 0.5:
        img = np.swapaxes(img, 0, 1)
        mask = np.swapaxes(mask, 0, 1) if mask is not None else None
    if cfg.rotate:
        k = int(rng.integers(0, 4)) if square else int(rng.integers(0, 2)) * 2
        if k:
            img = np.rot90(img, k=k, axes=(0, 1))
            mask = np.rot90(mask, k=k, axes=(0, 1)) if mask is not None else None
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)
    img = np.ascontiguousarray(img, dtype=np.float32)
    mask = np.ascontiguousarray(mask) if mask is not None else None
    return img, mask


# ---------------------------------------------------------------------------
# seeded, order-preserving batch preparation


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _restoration_pairs(
    crops: list[SubVolume], idxs: np.ndarray, sched: SchedulerConfig, seed_key: tuple
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    xs, ys = [], []
    for i in idxs:
        sv = crops[int(i)]
        spec = schedule(sched, rng)
        corrupted, _ = apply_pipeline(sv, spec)
        xs.append(corrupted.data)
        ys.append(sv.data)
    x = np.stack(xs)[:, None, :, :, :].astype(np.float32)
    y = np.stack(ys)[:, None, :, :, :].astype(np.float32)
    return x, y


def _batched_indices(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot be batch-normalized in TRAIN mode
    return [b for b in batches if len(b) >= 2]


@dataclass
class PretrainResult:
    net: ComputeGraph
    checkpoint: Checkpoint
    log: TrainLog


def pretrain(
    volumes: list[Volume],
    unet_cfg: UNetConfig,
    cfg: ProxyTrainConfig,
    net: ComputeGraph | None = None,
) -> PretrainResult:
    """Self-supervised restoration training over unit-domain volumes.

    Volumes are split into train/validation sets, informative crops are
    drawn, and each epoch corrupts the training crops afresh while the
    validation pairs stay fixed.  Returns the best-validation model.
    """
    if len(volumes) < 2:
        raise ValueError("pretraining needs at least 2 volumes (train plus validation)")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    if net is None:
        net = build_restoration_unet(unet_cfg, tn.InitScheme(tn.InitKind.MSRA, cfg.seed))
    n_val = max(1, round(cfg.val_fraction * len(volumes)))
    order = rng.permutation(len(volumes))
    val_vols = [volumes[i] for i in order[:n_val]]
    train_vols = [volumes[i] for i in order[n_val:]]

    train_crops: list[SubVolume] = []
    for vol in train_vols:
        train_crops.extend(crop_subvolumes(vol, cfg.crops_per_volume, cfg.sampler, rng).crops)
    val_crops: list[SubVolume] = []
    for vol in val_vols:
        val_crops.extend(crop_subvolumes(vol, cfg.crops_per_volume, cfg.sampler, rng).crops)
    if len(train_crops) < cfg.batch_size or not val_crops:
        raise ValueError(
            f"too few informative crops (train {len(train_crops)}, val {len(val_crops)})"
        )

    val_x, val_y = _restoration_pairs(
        val_crops, np.arange(len(val_crops)), cfg.scheduler, (cfg.seed, 1)
    )

    def val_mse() -> float:
        net.eval()
        total = 0.0
        with tn.no_grad():
            for i in range(0, len(val_x), cfg.batch_size):
                xb = Tensor(val_x[i : i + cfg.batch_size])
                yb = Tensor(val_y[i : i + cfg.batch_size])
                total += mse_loss(net(xb), yb).item() * xb.data.shape[0]
        net.train()
        return total / len(val_x)

    log = TrainLog(monitor="min")
    t0 = time.perf_counter()
    baseline = val_mse()
    log.rows.append(LogRow(0, float("nan"), baseline, cfg.lr0, time.perf_counter() - t0))
    best = baseline
    best_state = net.state()
    best_epoch = 0
    lr = cfg.lr0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, epoch)))
        batches = _batched_indices(
            len(train_crops), cfg.batch_size, epoch_rng.permutation(len(train_crops))
        )
        prep = lambda ib: _restoration_pairs(  # noqa: E731
            train_crops, ib[1], cfg.scheduler, (cfg.seed, 3, epoch, ib[0])
        )
        losses = []
        for xb, yb in _map_ordered(prep, list(enumerate(batches)), cfg.threads):
            net.zero_grad()
            loss = mse_loss(net(Tensor(xb)), Tensor(yb))
            tn.backward(loss)
            sgd_step(net.trainable_parameters(), lr)
            losses.append(loss.item())
        metric = val_mse()
        log.rows.append(
            LogRow(epoch, float(np.mean(losses)), metric, lr, time.perf_counter() - t0)
        )
        if metric < best:
            best = metric
            best_state = net.state()
            best_epoch = epoch
        lr = plateau_lr(log.val_history(), cfg)

    net.load_state(best_state)
    meta = {
        "kind": "proxy",
        "seed": str(cfg.seed),
        "epochs": str(cfg.epochs),
        "best_epoch": str(best_epoch),
        "best_val_mse": repr(best),
        "base_channels": str(unet_cfg.base_channels),
        "depth": str(unet_cfg.depth),
        "pool_z": str(unet_cfg.pool_z).lower(),
        "scheduler": scheduler_echo(cfg.scheduler),
    }
    return PretrainResult(net, checkpoint_from_graph(net, meta), log)


def scheduler_echo(s: SchedulerConfig) -> str:
    return (
        f"p_nonlinear={s.p_nonlinear};p_shuffle={s.p_shuffle};"
        f"p_cutout={s.p_cutout};p_inner={s.p_inner}"
    )


# ---------------------------------------------------------------------------
# fine-tuning


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ceil(fraction * n) entries of a seed-determined permutation.

    The permutation depends only on (n, seed), so subsets at growing
    fractions are nested under the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = int(math.ceil(fraction * n))
    perm = np.random.default_rng(np.random.SeedSequence((seed, n))).permutation(n)
    return perm[:k]


@dataclass
class FinetuneResult:
    net: ComputeGraph
    log: TrainLog
    train_ids: list[str]
    best_val: float
    test_metric: float


def _stack_batch(
    xs: np.ndarray, ys: np.ndarray, idxs: np.ndarray, cfg: TargetTrainConfig, seed_key: tuple,
    segmentation: bool,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    bx, by = [], []
    for i in idxs:
        img = xs[int(i), 0]
        msk = ys[int(i), 0] if segmentation else None
        img, msk = augment_sample(img, rng, cfg.augment, msk)
        bx.append(img)
        by.append(msk if segmentation else ys[int(i)])
    x = np.stack(bx)[:, None, :, :, :].astype(np.float32)
    if segmentation:
        y = np.stack(by)[:, None, :, :, :].astype(np.float32)
    else:
        y = np.asarray(by, dtype=np.float32).reshape(len(idxs), -1)
    return x, y


def _eval_metric(net: ComputeGraph, xs: np.ndarray, ys: np.ndarray, segmentation: bool,
                 batch_size: int) -> float:
    net.eval()
    preds = []
    with tn.no_grad():
        for i in range(0, len(xs), batch_size):
            preds.append(net(Tensor(xs[i : i + batch_size])).data)
    net.train()
    pred = np.concatenate(preds)
    if segmentation:
        scores = [
            dice(pred[i, 0] >= 0.5, ys[i, 0] >= 0.5) for i in range(len(xs))
        ]
        return float(np.mean(scores))
    return auc(pred.reshape(-1), ys.reshape(-1) >= 0.5)


def finetune(dataset, net: ComputeGraph, cfg: TargetTrainConfig) -> FinetuneResult:
    """Supervised training with Adam and early stopping on validation metric.

    ``dataset`` provides x/y train, val, and test splits plus string sample
    ids (see the tasks module).  Monitors Dice at threshold 0.5 for
    segmentation and AUC for classification; returns the best-validation
    model and its test metric.
    """
    segmentation = dataset.kind == "segmentation"
    idx = subsample_indices(len(dataset.x_train), cfg.label_fraction, cfg.seed)
    train_ids = [dataset.ids_train[int(i)] for i in idx]
    xs = dataset.x_train[idx]
    ys = dataset.y_train[idx]
    loss_fn = bce_loss if cfg.loss == "bce" else mse_loss
    params = net.trainable_parameters()
    adam = AdamState(params)
    log = TrainLog(monitor="max")

    t0 = time.perf_counter()
    best = _eval_metric(net, dataset.x_val, dataset.y_val, segmentation, cfg.batch_size)
    log.rows.append(LogRow(0, float("nan"), best, cfg.lr, time.perf_counter() - t0))
    best_state = net.state()
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 4, epoch)))
        batches = _batched_indices(len(xs), cfg.batch_size, epoch_rng.permutation(len(xs)))
        prep = lambda ib: _stack_batch(  # noqa: E731
            xs, ys, ib[1], cfg, (cfg.seed, 5, epoch, ib[0]), segmentation
        )
        losses = []
        for xb, yb in _map_ordered(prep, list(enumerate(batches)), cfg.threads):
            net.zero_grad()
            pred = net(Tensor(xb))
            loss = loss_fn(pred, Tensor(yb))
            tn.backward(loss)
            adam_step(params, adam, cfg)
            losses.append(loss.item())
        metric = _eval_metric(net, dataset.x_val, dataset.y_val, segmentation, cfg.batch_size)
        log.rows.append(
            LogRow(epoch, float(np.mean(losses)), metric, cfg.lr, time.perf_counter() - t0)
        )
        if metric > best:
            best = metric
            best_state = net.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    net.load_state(best_state)
    test = _eval_metric(net, dataset.x_test, dataset.y_test, segmentation, cfg.batch_size)
    return FinetuneResult(net, log, train_ids, best, test)


def epochs_to_threshold(log: TrainLog, threshold: float) -> float:
    """First epoch whose validation metric meets the threshold, else +inf."""
    for row in log.rows:
        if row.val_metric >= threshold:
            return float(row.epoch)
    return math.inf
