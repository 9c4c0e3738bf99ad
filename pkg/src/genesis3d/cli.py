"""Command line entry point.

Subcommands cover the whole workflow: synthesize or ingest volumes, preview
the corruption outcomes, pretrain on restoration, fine-tune on a labeled
task, run the scheme ablation and the annotation-budget sweep, and render
the report figures.  Exit codes: 1 for configuration problems, 2 for I/O
and file-format problems, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import report
from .config import ConfigError, RunConfig, load_config
from .evalstat import ablation_matrix, annotation_sweep
from .model import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .sampler import SubVolume
from .tasks import PhantomTask, pretraining_volumes
from .trainer import finetune, pretrain
from .transforms import (
    ALL_OUTCOMES,
    CutoutMode,
    TransformSpec,
    apply_pipeline,
    record_to_text,
)
from .volume import (
    IntensityDomain,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom,
    normalize_ct,
    read_mvol,
    read_nifti1,
    write_mvol,
)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems through our exit scheme."""

    def error(self, message: str):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="genesis", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="dotted-key config file")
        p.add_argument("--seed", type=int, default=0, help="base random seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--out", required=True, help="output directory")
        return p

    add("phantom", "generate synthetic phantom volumes")
    p = add("ingest", "convert external volumes to normalized unit-range files")
    p.add_argument("inputs", nargs="+", help="NIfTI-1 (.nii/.nii.gz) or .mvol files")
    p = add("preview", "render every corruption outcome for one volume")
    p.add_argument("input", help="volume to preview (.mvol)")
    p = add("pretrain", "self-supervised restoration pretraining")
    p.add_argument("inputs", nargs="*", help="training volumes (.mvol); default: phantoms")
    p = add("finetune", "supervised training on the phantom target task")
    p.add_argument("checkpoint", nargs="?", default=None,
                   help="pretrained weights (.mgen); omit to train from scratch")
    add("ablation", "compare corruption schemes over repeated trials")
    add("sweep", "vary the labeled fraction for scratch and pretrained inits")
    add("report", "render figures for results already in the output directory")
    return parser


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _load_volume(path: str, cfg: RunConfig) -> Volume:
    low = path.lower()
    if low.endswith((".nii", ".nii.gz")):
        vol = read_nifti1(path)
    elif low.endswith(".mvol"):
        vol = read_mvol(path)
    else:
        raise VolumeFormatError(f"{path}: unsupported extension (expected .nii, .nii.gz, .mvol)")
    if vol.domain is IntensityDomain.HOUNSFIELD:
        clip = (cfg.get("ingest.clip_low", -1000.0), cfg.get("ingest.clip_high", 1000.0))
        vol = normalize_ct(vol, clip)
    return vol


def _phantom_spec(cfg: RunConfig, seed: int) -> PhantomSpec:
    base = PhantomSpec()
    return PhantomSpec(
        dims=cfg.get("phantom.dims", base.dims),
        n_ellipsoids=cfg.get("phantom.n_ellipsoids", base.n_ellipsoids),
        texture_scale=cfg.get("phantom.texture_scale", base.texture_scale),
        background_level=cfg.get("phantom.background_level", base.background_level),
        seed=seed,
    )


def _task(args, cfg: RunConfig) -> PhantomTask:
    return PhantomTask(
        kind=cfg.task_kind(),
        data_cfg=cfg.task_config(args.seed),
        unet_cfg=cfg.unet_config(),
        pretrain_epochs=cfg.get("proxy.epochs", 10),
        pretrain_volumes_n=cfg.get("phantom.count", 8),
        pretrain_seed=args.seed,
        finetune_epochs=cfg.get("target.epochs", 12),
        threads=args.threads,
    )


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_phantom(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    count = cfg.get("phantom.count", 4)
    if count < 1:
        raise ConfigError("phantom.count must be >= 1")
    for i in range(count):
        vol = generate_phantom(_phantom_spec(cfg, args.seed + i))
        path = os.path.join(args.out, f"phantom_{args.seed + i:04d}.mvol")
        write_mvol(path, vol)
        print(f"wrote {path}")
    return 0


def _cmd_ingest(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    for src in args.inputs:
        vol = _load_volume(src, cfg)
        stem = os.path.basename(src)
        if stem.endswith(".gz"):
            stem = stem[:-3]
        stem = os.path.splitext(stem)[0]
        path = os.path.join(args.out, f"{stem}.mvol")
        write_mvol(path, vol)
        print(f"wrote {path}")
    return 0


def _outcome_name(outcome: tuple[bool, bool, CutoutMode]) -> str:
    nl, sh, mode = outcome
    parts = []
    if nl:
        parts.append("nonlinear")
    if sh:
        parts.append("shuffle")
    if mode is CutoutMode.INNER:
        parts.append("inpaint")
    elif mode is CutoutMode.OUTER:
        parts.append("outpaint")
    return "+".join(parts) if parts else "identity"


def _tile(data: np.ndarray) -> np.ndarray:
    """Central z slice as an 8-bit image with y as rows."""
    sl = data[:, :, data.shape[2] // 2]
    return np.clip(np.round(sl.T * 255.0), 0, 255).astype(np.uint8)


def _cmd_preview(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    vol = _load_volume(args.input, cfg)
    crop_shape = tuple(min(c, d) for c, d in zip(cfg.sampler_config().crop_shape, vol.dims))
    origin = tuple((d - c) // 2 for c, d in zip(crop_shape, vol.dims))
    region = vol.data[
        origin[0] : origin[0] + crop_shape[0],
        origin[1] : origin[1] + crop_shape[1],
        origin[2] : origin[2] + crop_shape[2],
    ]
    sv = SubVolume(region.copy(), origin, vol.source_id)
    scheduler = cfg.scheduler_config()
    seed_rng = np.random.default_rng(np.random.SeedSequence((args.seed, 9)))

    tiles = [("original", _tile(sv.data))]
    names = []
    for i, outcome in enumerate(ALL_OUTCOMES):
        nl, sh, mode = outcome
        spec = TransformSpec(nl, sh, mode, scheduler, int(seed_rng.integers(0, 2**63)))
        corrupted, filled = apply_pipeline(sv, spec)
        name = _outcome_name(outcome)
        names.append(name)
        tiles.append((name, _tile(corrupted.data)))
        rec_path = os.path.join(args.out, f"record_{i:02d}_{name}.txt")
        with open(rec_path, "w", encoding="utf-8") as fh:
            fh.write(record_to_text(filled))
    montage = np.concatenate([img for _, img in tiles], axis=1)
    pgm_path = os.path.join(args.out, "preview.pgm")
    report.write_pgm(pgm_path, montage)
    index_path = os.path.join(args.out, "preview_tiles.txt")
    with open(index_path, "w", encoding="utf-8") as fh:
        for k, (name, _) in enumerate(tiles):
            fh.write(f"{k}\t{name}\n")
    print(f"wrote {pgm_path}")
    print(f"wrote {index_path}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    _ensure_dir(os.path.join(args.out, "logs"))
    if args.inputs:
        volumes = [_load_volume(p, cfg) for p in args.inputs]
    else:
        count = cfg.get("phantom.count", 8)
        base = PhantomSpec()
        volumes = pretraining_volumes(count, cfg.get("phantom.dims", base.dims), args.seed)
    proxy_cfg = cfg.proxy_config(args.seed, args.threads)
    result = pretrain(volumes, cfg.unet_config(), proxy_cfg)
    ckpt_path = os.path.join(args.out, "checkpoint.mgen")
    save_checkpoint(ckpt_path, result.checkpoint)
    log_path = os.path.join(args.out, "logs", "pretrain.csv")
    result.log.to_csv(log_path)
    print(f"wrote {ckpt_path}")
    print(f"wrote {log_path}")
    print(f"best_val_mse = {result.log.best_metric!r}")
    return 0


def _cmd_finetune(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    _ensure_dir(os.path.join(args.out, "logs"))
    task = _task(args, cfg)
    if args.checkpoint is not None:
        source = load_checkpoint(args.checkpoint)
        init = "genesis"
    else:
        source = None
        init = "scratch"
    net = task.build_net(source, args.seed)
    target_cfg = cfg.target_config(args.seed, args.threads)
    result = finetune(task.dataset(), net, target_cfg)
    log_path = os.path.join(args.out, "logs", f"finetune_{init}.csv")
    result.log.to_csv(log_path)
    summary_path = os.path.join(args.out, f"finetune_{init}.txt")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(f"task = {task.name}\n")
        fh.write(f"metric = {task.metric}\n")
        fh.write(f"init = {init}\n")
        fh.write(f"label_fraction = {target_cfg.label_fraction!r}\n")
        fh.write(f"train_samples = {len(result.train_ids)}\n")
        fh.write(f"best_val = {result.best_val!r}\n")
        fh.write(f"test_metric = {result.test_metric!r}\n")
    print(f"wrote {log_path}")
    print(f"wrote {summary_path}")
    print(f"test_{task.metric} = {result.test_metric!r}")
    return 0


def _cmd_ablation(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    task = _task(args, cfg)
    schemes = cfg.ablation_schemes()
    trials = cfg.get("ablation.trials", 3)
    if trials < 2:
        raise ConfigError("ablation.trials must be >= 2")
    result = ablation_matrix(schemes, task, trials, args.seed)
    trials_path = os.path.join(args.out, "ablation.csv")
    report.write_trials_csv(trials_path, list(result.rows.values()))
    sig_path = os.path.join(args.out, "significance.csv")
    report.write_significance_csv(
        sig_path, {"top": result.top_pair, "bottom": result.bottom_pair}
    )
    print(f"wrote {trials_path}")
    print(f"wrote {sig_path}")
    for name, row in result.ordered():
        print(f"{name}: mean={row.mean:.4f} sd={row.sd:.4f} ci95={row.ci95:.4f}")
    return 0


def _cmd_sweep(args, cfg: RunConfig) -> int:
    _ensure_dir(args.out)
    task = _task(args, cfg)
    trials = cfg.get("sweep.trials", 3)
    if trials < 2:
        raise ConfigError("sweep.trials must be >= 2")
    table = annotation_sweep(
        cfg.sweep_fractions(), task, cfg.sweep_inits(), trials, args.seed
    )
    sweep_path = os.path.join(args.out, "sweep.csv")
    report.write_sweep_csv(sweep_path, table)
    ids_path = os.path.join(args.out, "sweep_ids.csv")
    report.write_sweep_ids_csv(ids_path, table)
    print(f"wrote {sweep_path}")
    print(f"wrote {ids_path}")
    return 0


def _cmd_report(args, cfg: RunConfig) -> int:
    for path in report.render_report(args.out):
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "ingest": _cmd_ingest,
    "preview": _cmd_preview,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "ablation": _cmd_ablation,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required (see genesis --help)")
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (OSError, VolumeFormatError, CheckpointError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
