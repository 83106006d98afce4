import json

import pytest

from punet.config import RunConfig, load_config, parse_override
from punet.errors import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.n_raters == 6 and cfg.unet().input_size == (64, 64)
    assert cfg.rater_dilations == [-2, -1, 0, 0, 1, 2]
    assert (cfg.n_train, cfg.n_test) == (64, 16)


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "bogus": 2}))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, {"nope": 1})


def test_overrides_and_env(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_source": 8}))
    cfg = load_config(p, {"n_test": 4})
    assert (cfg.n_source, cfg.n_test) == (8, 4)
    monkeypatch.setenv("PUNET_SEED", "42")
    assert load_config(None).seed == 42
    assert load_config(None, {"seed": 3}).seed == 3


def test_invalid_values():
    for bad in ({"insertion": "left"}, {"strategy": "all"}, {"mode": "x"}, {"rater_jitter": [1.0]}, {"n_train": 0}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        RunConfig(input_size=[60, 60])


def test_parse_override():
    assert parse_override("seed=3") == ("seed", 3)
    assert parse_override("channel_mults=[1,2,2,4]") == ("channel_mults", [1, 2, 2, 4])
    assert parse_override("strategy=mix") == ("strategy", "mix")
    with pytest.raises(ConfigError):
        parse_override("seed")


def test_write_resolved(tmp_path):
    cfg = RunConfig(seed=5)
    path = cfg.write(tmp_path)
    assert path.name == "config.resolved.json"
    assert RunConfig.from_dict(json.loads(path.read_text())) == cfg


def test_schedules():
    cfg = RunConfig()
    assert cfg.pretrain_schedule().base_lr == cfg.pretrain_lr
    assert cfg.finetune_schedule().epochs == cfg.finetune_epochs
