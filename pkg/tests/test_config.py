"""Tests for the dotted-key run configuration."""

import pytest

from genesis3d.config import ConfigError, RunConfig, load_config, parse_config_text


FULL_EXAMPLE = """
# phantom geometry
phantom.count = 3
phantom.dims = 24, 24, 12
sampler.crop_shape = 16,16,8
scheduler.p_nonlinear = 0.8   # trailing comment
scheduler.strict_monotone = true
proxy.epochs = 4
target.loss = mse
augment.flip = false
ablation.schemes = identity, combined
sweep.fractions = 0.25, 0.5, 1.0
sweep.inits = scratch
"""


def test_parse_full_example():
    values = parse_config_text(FULL_EXAMPLE)
    assert values["phantom.count"] == 3
    assert values["phantom.dims"] == (24, 24, 12)
    assert values["sampler.crop_shape"] == (16, 16, 8)
    assert values["scheduler.p_nonlinear"] == 0.8
    assert values["scheduler.strict_monotone"] is True
    assert values["target.loss"] == "mse"
    assert values["augment.flip"] is False
    assert values["ablation.schemes"] == ("identity", "combined")
    assert values["sweep.fractions"] == (0.25, 0.5, 1.0)
    assert values["sweep.inits"] == ("scratch",)


def test_parse_rejects_unknown_key():
    with pytest.raises(ConfigError, match=r"<config>:1: unknown key 'phantom.size'"):
        parse_config_text("phantom.size = 3")


def test_parse_rejects_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text("proxy.epochs = 2\nproxy.epochs = 3")


def test_parse_rejects_missing_assignment():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("proxy.epochs 4")


def test_parse_reports_bad_values_with_location():
    with pytest.raises(ConfigError, match=r":2: bad value for proxy.epochs"):
        parse_config_text("# ok\nproxy.epochs = many")
    with pytest.raises(ConfigError, match="three comma-separated ints"):
        parse_config_text("phantom.dims = 24, 24")
    with pytest.raises(ConfigError, match="true or false"):
        parse_config_text("augment.flip = yes")


def test_load_config_none_gives_defaults():
    cfg = load_config(None)
    assert cfg.values == {}
    assert cfg.get("proxy.epochs", 10) == 10


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("proxy.epochs = 7\n")
    cfg = load_config(str(path))
    assert cfg.get("proxy.epochs", 10) == 7


def test_get_guards_against_foreign_keys():
    cfg = RunConfig({})
    with pytest.raises(KeyError, match="missing from schema"):
        cfg.get("not.a.key", 1)


def test_builders_apply_overrides():
    cfg = RunConfig(parse_config_text(FULL_EXAMPLE))
    sched = cfg.scheduler_config()
    assert sched.p_nonlinear == 0.8
    assert sched.strict_monotone is True
    sampler = cfg.sampler_config()
    assert sampler.crop_shape == (16, 16, 8)
    unet = cfg.unet_config()
    assert unet.base_channels == 4 and unet.depth == 2
    proxy = cfg.proxy_config(seed=5, threads=2)
    assert proxy.epochs == 4 and proxy.seed == 5 and proxy.threads == 2
    assert proxy.scheduler.p_nonlinear == 0.8
    target = cfg.target_config(seed=1, threads=1)
    assert target.loss == "mse"
    assert target.augment.flip is False
    task = cfg.task_config(seed=9)
    assert task.crop_shape == (16, 16, 8)
    assert task.phantom_dims == (24, 24, 12)
    assert task.seed == 9


def test_builders_translate_range_errors():
    cfg = RunConfig({"proxy.epochs": 0})
    with pytest.raises(ConfigError, match="epochs"):
        cfg.proxy_config(seed=0, threads=1)
    cfg = RunConfig({"target.lr": -1.0})
    with pytest.raises(ConfigError, match="Adam"):
        cfg.target_config(seed=0, threads=1)


def test_task_kind_validation():
    assert RunConfig({}).task_kind() == "segmentation"
    assert RunConfig({"task.kind": "classification"}).task_kind() == "classification"
    with pytest.raises(ConfigError, match="task.kind"):
        RunConfig({"task.kind": "detection"}).task_kind()


def test_ablation_schemes_selection():
    cfg = RunConfig({"ablation.schemes": ("identity", "combined")})
    schemes = cfg.ablation_schemes()
    assert list(schemes) == ["identity", "combined"]
    assert schemes["identity"].p_nonlinear == 0.0
    with pytest.raises(ConfigError, match="unknown ablation schemes"):
        RunConfig({"ablation.schemes": ("identity", "mystery")}).ablation_schemes()
    with pytest.raises(ConfigError, match="at least 2"):
        RunConfig({"ablation.schemes": ("identity",)}).ablation_schemes()


def test_sweep_validation():
    assert RunConfig({}).sweep_fractions() == (0.25, 0.5, 1.0)
    with pytest.raises(ConfigError, match="outside"):
        RunConfig({"sweep.fractions": (0.0, 0.5)}).sweep_fractions()
    with pytest.raises(ConfigError, match="distinct"):
        RunConfig({"sweep.fractions": (0.5, 0.5)}).sweep_fractions()
    assert RunConfig({}).sweep_inits() == ("scratch", "genesis")
    with pytest.raises(ConfigError, match="unknown init"):
        RunConfig({"sweep.inits": ("finetuned",)}).sweep_inits()
