import pytest

from exposhift import config
from exposhift.config import ConfigError, load_config, parse_config


def test_defaults_and_overrides():
    cfg = parse_config({"model": {"como_dim": 4}, "train": {"lr": 0.01}, "loss": {"lambda2": 0.0}})
    assert cfg.model.como_dim == 4 and cfg.train.lr == 0.01 and cfg.loss.lambda2 == 0.0
    assert cfg.model.deform_mode == "full"
    assert parse_config(None).train.iterations == 10000


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="loss.lamda1"):
        parse_config({"loss": {"lamda1": 1.0}})
    with pytest.raises(ConfigError, match="'modle'"):
        parse_config({"modle": {}})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config({"model": {"deform_mode": "bogus"}})
    with pytest.raises(ConfigError):
        parse_config({"train": "fast"})
    with pytest.raises(ValueError):
        parse_config({"synthetic": {"degradation": {"gamma_over": [0.5, 1.2]}}})


def test_load_from_path_and_env(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  iterations: 3\n")
    assert load_config(path).train.iterations == 3
    monkeypatch.setenv(config.CONFIG_ENV, str(path))
    assert load_config().train.iterations == 3
    monkeypatch.delenv(config.CONFIG_ENV)
    with pytest.raises(ConfigError):
        load_config()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_synthetic_datasets():
    cfg = parse_config({"synthetic": {"count": 3, "size": 16, "val_count": 2, "degradation": {"noise_sigma": 0.0}}})
    train, val = config.build_datasets(cfg)
    assert len(train) == 3 and len(val) == 2
    a, _ = train.load(0)
    b, _ = val.load(0)
    assert a.shape == (3, 16, 16) and not (a == b).all()
