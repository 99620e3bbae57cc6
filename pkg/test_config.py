"""Tests for config files, overrides and validation."""

import pytest

from config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    config_hash,
    dump_config,
    get_default_config,
    load_config,
    output_root,
)


def test_defaults_are_valid():
    config = get_default_config()
    assert config.variant == "ssgan"
    assert (config.alpha, config.beta, config.batch_size, config.n_rot_base) == (0.2, 1.0, 64, 16)


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# robustness cell\nvariant = uncond\nregularizer = gradient_penalty\nlambda = 10\n"
                    "d_steps = 1\nprobe_eval = false\n", encoding="utf-8")
    config = load_config(str(path))
    assert config.variant == "uncond"
    assert config.gp_lambda == 10.0
    assert config.d_steps == 1
    assert config.probe_eval is False


def test_flag_overrides_win(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\n", encoding="utf-8")
    assert load_config(str(path), {"seed": 7}).seed == 7


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("learning_speed = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.key == "learning_speed"


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


@pytest.mark.parametrize("overrides,key", [
    ({"n_rot_base": "65"}, "n_rot_base"),
    ({"variant": "bigan"}, "variant"),
    ({"regularizer": "gradient_penalty"}, "gp_lambda"),
    ({"fid_samples": "500"}, "fid_samples"),
    ({"adam_beta1": "1.0"}, "adam_beta1"),
    ({"d_steps": "two"}, "d_steps"),
])
def test_validation_names_the_key(overrides, key):
    with pytest.raises(ConfigError) as info:
        apply_overrides(TrainConfig(), overrides)
    assert info.value.key == key


def test_dump_round_trip(tmp_path):
    config = apply_overrides(TrainConfig(), {"lambda": "1.0", "regularizer": "gradient_penalty", "lr": "0.0001"})
    path = tmp_path / "snapshot.cfg"
    path.write_text(dump_config(config), encoding="utf-8")
    assert load_config(str(path)) == config
    assert "lambda = 1.0" in dump_config(config)


def test_config_hash_tracks_values():
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))


def test_output_root(monkeypatch):
    monkeypatch.setenv("SSGAN_OUT", "/tmp/ssgan-runs")
    assert str(output_root()) == "/tmp/ssgan-runs"
    assert str(output_root("elsewhere")) == "elsewhere"
