import json

import pytest

from dintr.config import RunConfig, config_from_dict, load_config
from dintr.schedule import ConfigError


def test_defaults_are_valid_and_documented():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.engine.T == 50 and cfg.engine.lr == 3e-5 and cfg.extraction.beta == 4
    assert cfg.extraction.window_fraction == 0.8 and cfg.extraction.seg_threshold == 0.5
    assert cfg.tracker.sigma == 1.5 and cfg.noise_schedule().T == 50


def test_round_trip(tmp_path):
    cfg = config_from_dict({"engine": {"T": 7, "lr": 1}, "tracker": {"warm_start": True}, "seed": 4})
    assert cfg.engine.lr == 1.0 and isinstance(cfg.engine.lr, float)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_json()))
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("data,path", [
    ({"engine": {"steps": 3}}, "engine.steps"),
    ({"colour": 1}, "colour"),
    ({"tracker": {"sigma": "wide"}}, "tracker.sigma"),
    ({"engine": {"T": True}}, "engine.T"),
    ({"engine": {"operator": "magic"}}, "engine.operator"),
    ({"extraction": {"seg_threshold": 1.5}}, "extraction.seg_threshold"),
    ({"schedule": {"beta_end": 2.0}}, "beta_end"),
])
def test_bad_configs_name_the_key(data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        config_from_dict(data)


def test_require_reports_missing_path():
    with pytest.raises(ConfigError, match=r"paths\.seq"):
        RunConfig().require("paths.seq")


def test_seed_override():
    cfg = config_from_dict({"engine": {"seed": 3}})
    assert cfg.effective_seed == 3
    cfg.seed = 9
    assert cfg.effective_seed == 9


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{engine: ")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    assert load_config(None) == RunConfig()
