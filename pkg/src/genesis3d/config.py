"""Run configuration from dotted-key text files.

The format is one ``section.key = value`` assignment per line with ``#``
comments.  Every key must appear in the schema below; unknown keys are an
error so typos fail loudly before any work starts.  Values are validated by
constructing the real configuration objects, so range checks live in one
place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .model import UNetConfig
from .sampler import SamplerConfig
from .tasks import TaskConfig, scheme_presets
from .trainer import AugmentConfig, ProxyTrainConfig, TargetTrainConfig
from .transforms import SchedulerConfig


class ConfigError(ValueError):
    """Unknown key, malformed line, or out-of-range value."""


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low not in ("true", "false"):
        raise ValueError(f"expected true or false, got {s!r}")
    return low == "true"


def _parse_int3(s: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated ints, got {s!r}")
    return (int(parts[0]), int(parts[1]), int(parts[2]))


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p.strip()) for p in s.split(",") if p.strip())


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


SCHEMA: dict[str, Callable[[str], object]] = {
    "phantom.count": int,
    "phantom.dims": _parse_int3,
    "phantom.n_ellipsoids": int,
    "phantom.texture_scale": float,
    "phantom.background_level": float,
    "sampler.crop_shape": _parse_int3,
    "sampler.air_value_max": float,
    "sampler.tissue_value_min": float,
    "sampler.reject_fraction": float,
    "sampler.max_attempts": int,
    "scheduler.p_nonlinear": float,
    "scheduler.p_shuffle": float,
    "scheduler.p_cutout": float,
    "scheduler.p_inner": float,
    "scheduler.lut_resolution": int,
    "scheduler.strict_monotone": _parse_bool,
    "scheduler.shuffle_windows": int,
    "scheduler.shuffle_max_extent": _parse_int3,
    "scheduler.cutout_max_windows": int,
    "scheduler.cutout_max_fraction": float,
    "model.base_channels": int,
    "model.depth": int,
    "model.pool_z": _parse_bool,
    "proxy.epochs": int,
    "proxy.batch_size": int,
    "proxy.crops_per_volume": int,
    "proxy.val_fraction": float,
    "proxy.lr0": float,
    "proxy.plateau_factor": float,
    "proxy.plateau_patience": int,
    "proxy.min_lr": float,
    "target.epochs": int,
    "target.batch_size": int,
    "target.lr": float,
    "target.beta1": float,
    "target.beta2": float,
    "target.adam_eps": float,
    "target.early_stop_patience": int,
    "target.label_fraction": float,
    "target.loss": str,
    "target.init": str,
    "target.checkpoint": str,
    "augment.flip": _parse_bool,
    "augment.transpose": _parse_bool,
    "augment.rotate": _parse_bool,
    "augment.noise_sigma": float,
    "task.kind": str,
    "task.train_volumes": int,
    "task.val_volumes": int,
    "task.test_volumes": int,
    "task.crops_per_volume": int,
    "task.blob_level": float,
    "ingest.clip_low": float,
    "ingest.clip_high": float,
    "ablation.schemes": _parse_strs,
    "ablation.trials": int,
    "sweep.fractions": _parse_floats,
    "sweep.inits": _parse_strs,
    "sweep.trials": int,
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    """Parse and validate assignments; returns converted values keyed by name."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config(path: str | None) -> "RunConfig":
    if path is None:
        return RunConfig({})
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return RunConfig(parse_config_text(text, origin=path))


@dataclass
class RunConfig:
    """Typed access to a parsed configuration, with defaults baked in.

    Builder methods construct the real dataclasses, so their range checks
    run here; a ConfigError is raised before any computation begins.
    """

    values: dict[str, object] = field(default_factory=dict)

    def get(self, key: str, default):
        if key not in SCHEMA:
            raise KeyError(f"key {key!r} missing from schema")
        return self.values.get(key, default)

    def _build(self, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def scheduler_config(self) -> SchedulerConfig:
        base = SchedulerConfig()
        return self._build(
            SchedulerConfig,
            p_nonlinear=self.get("scheduler.p_nonlinear", base.p_nonlinear),
            p_shuffle=self.get("scheduler.p_shuffle", base.p_shuffle),
            p_cutout=self.get("scheduler.p_cutout", base.p_cutout),
            p_inner=self.get("scheduler.p_inner", base.p_inner),
            lut_resolution=self.get("scheduler.lut_resolution", base.lut_resolution),
            strict_monotone=self.get("scheduler.strict_monotone", base.strict_monotone),
            shuffle_windows=self.get("scheduler.shuffle_windows", base.shuffle_windows),
            shuffle_max_extent=self.get("scheduler.shuffle_max_extent", base.shuffle_max_extent),
            cutout_max_windows=self.get("scheduler.cutout_max_windows", base.cutout_max_windows),
            cutout_max_fraction=self.get(
                "scheduler.cutout_max_fraction", base.cutout_max_fraction
            ),
        )

    def sampler_config(self) -> SamplerConfig:
        base = SamplerConfig()
        return self._build(
            SamplerConfig,
            crop_shape=self.get("sampler.crop_shape", (32, 32, 16)),
            air_value_max=self.get("sampler.air_value_max", base.air_value_max),
            tissue_value_min=self.get("sampler.tissue_value_min", base.tissue_value_min),
            reject_fraction=self.get("sampler.reject_fraction", base.reject_fraction),
            max_attempts=self.get("sampler.max_attempts", base.max_attempts),
        )

    def unet_config(self) -> UNetConfig:
        toy = UNetConfig.toy()
        return self._build(
            UNetConfig,
            base_channels=self.get("model.base_channels", toy.base_channels),
            depth=self.get("model.depth", toy.depth),
            pool_z=self.get("model.pool_z", toy.pool_z),
        )

    def augment_config(self) -> AugmentConfig:
        base = AugmentConfig()
        return self._build(
            AugmentConfig,
            flip=self.get("augment.flip", base.flip),
            transpose=self.get("augment.transpose", base.transpose),
            rotate=self.get("augment.rotate", base.rotate),
            noise_sigma=self.get("augment.noise_sigma", base.noise_sigma),
        )

    def proxy_config(self, seed: int, threads: int) -> ProxyTrainConfig:
        base = ProxyTrainConfig()
        return self._build(
            ProxyTrainConfig,
            epochs=self.get("proxy.epochs", 10),
            batch_size=self.get("proxy.batch_size", base.batch_size),
            crops_per_volume=self.get("proxy.crops_per_volume", 6),
            val_fraction=self.get("proxy.val_fraction", 0.15),
            lr0=self.get("proxy.lr0", base.lr0),
            plateau_factor=self.get("proxy.plateau_factor", base.plateau_factor),
            plateau_patience=self.get("proxy.plateau_patience", base.plateau_patience),
            min_lr=self.get("proxy.min_lr", base.min_lr),
            seed=seed,
            threads=threads,
            scheduler=self.scheduler_config(),
            sampler=self.sampler_config(),
        )

    def target_config(self, seed: int, threads: int) -> TargetTrainConfig:
        base = TargetTrainConfig()
        return self._build(
            TargetTrainConfig,
            epochs=self.get("target.epochs", 12),
            batch_size=self.get("target.batch_size", base.batch_size),
            lr=self.get("target.lr", base.lr),
            beta1=self.get("target.beta1", base.beta1),
            beta2=self.get("target.beta2", base.beta2),
            adam_eps=self.get("target.adam_eps", base.adam_eps),
            early_stop_patience=self.get("target.early_stop_patience", 6),
            label_fraction=self.get("target.label_fraction", base.label_fraction),
            seed=seed,
            threads=threads,
            loss=self.get("target.loss", base.loss),
            augment=self.augment_config(),
        )

    def task_config(self, seed: int) -> TaskConfig:
        base = TaskConfig()
        crop = self.get("sampler.crop_shape", base.crop_shape)
        return self._build(
            TaskConfig,
            crop_shape=crop,
            train_volumes=self.get("task.train_volumes", base.train_volumes),
            val_volumes=self.get("task.val_volumes", base.val_volumes),
            test_volumes=self.get("task.test_volumes", base.test_volumes),
            crops_per_volume=self.get("task.crops_per_volume", base.crops_per_volume),
            phantom_dims=self.get("phantom.dims", base.phantom_dims),
            blob_level=self.get("task.blob_level", base.blob_level),
            seed=seed,
        )

    def task_kind(self) -> str:
        kind = self.get("task.kind", "segmentation")
        if kind not in ("segmentation", "classification"):
            raise ConfigError(f"task.kind must be segmentation or classification, got {kind!r}")
        return kind

    def ablation_schemes(self) -> dict[str, SchedulerConfig]:
        presets = scheme_presets()
        names = self.get("ablation.schemes", tuple(presets))
        unknown = [n for n in names if n not in presets]
        if unknown:
            raise ConfigError(
                f"unknown ablation schemes {unknown}; choose from {sorted(presets)}"
            )
        if len(names) < 2:
            raise ConfigError("ablation.schemes needs at least 2 entries")
        return {n: presets[n] for n in names}

    def sweep_fractions(self) -> tuple[float, ...]:
        fractions = self.get("sweep.fractions", (0.25, 0.5, 1.0))
        for f in fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"sweep fraction {f} outside (0, 1]")
        if len(set(fractions)) != len(fractions) or not fractions:
            raise ConfigError("sweep.fractions must be distinct and non-empty")
        return fractions

    def sweep_inits(self) -> tuple[str, ...]:
        inits = self.get("sweep.inits", ("scratch", "genesis"))
        for init in inits:
            if init not in ("scratch", "genesis"):
                raise ConfigError(f"unknown init {init!r}; choose scratch or genesis")
        if not inits:
            raise ConfigError("sweep.inits must be non-empty")
        return inits
