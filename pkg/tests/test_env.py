import json

import pytest

import run
from scripts.env import ConfigError, load_config, parse_seeds


def _write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults_are_valid():
    h = load_config(environ={})
    assert h.mode == "single"
    assert h.seeds == list(range(20))
    assert h.preset is None


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="epsilonn"):
        load_config(_write(tmp_path, {"epsilonn": 1.0}), environ={})
    with pytest.raises(ConfigError, match="escape.foo"):
        load_config(_write(tmp_path, {"escape": {"foo": 1}}), environ={})


def test_nested_blocks_merge(tmp_path):
    h = load_config(_write(tmp_path, {"escape": {"trials": 10}}), environ={})
    assert h.escape["trials"] == 10
    assert h.escape["eta"] == 0.1


@pytest.mark.parametrize("data", [
    {"seeds": []},
    {"seeds": [1, 1]},
    {"mode": "train"},
    {"objective": "rosenbrock"},
    {"mode": "sweep"},
    {"grid": {"lr": [1, 2]}},
    {"n": 0},
    {"epsilon": -1.0},
    {"omega": 1.5},
    {"drift_rewind_mode": "never"},
    {"c1": "laplace"},
    {"x0": "somewhere"},
    {"overrides": {"b1": 0}},
    {"overrides": {"b2": 12.5}},
    {"overrides": {"mu": 0.5}},
    {"overrides": {"chi": "small"}},
    {"overrides": {"eta": 0.1}},
])
def test_invalid_configs(tmp_path, data):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data), environ={})


def test_seed_environment_fallback(tmp_path):
    assert load_config(environ={"SOSPKIT_SEED": "42"}).seeds == [42]
    assert load_config(_write(tmp_path, {"seeds": [3]}), environ={"SOSPKIT_SEED": "42"}).seeds == [3]
    assert load_config(overrides=dict(seeds=[5]), environ={"SOSPKIT_SEED": "42"}).seeds == [5]
    with pytest.raises(ConfigError):
        load_config(environ={"SOSPKIT_SEED": "x"})


def test_preset_applies_escape_constants():
    h = load_config(preset="paper-defaults", environ={})
    assert h.preset == "paper-defaults"
    assert h.overrides == {"chi": 0.01, "mu": None, "kappa": 0.1, "Gamma": 10, "Q": 3, "b1": None, "b2": None}
    with pytest.raises(ConfigError):
        load_config(preset="fast", environ={})


def test_parse_seeds():
    assert parse_seeds("0, 1,2") == [0, 1, 2]
    assert parse_seeds("") == []
    with pytest.raises(ConfigError):
        parse_seeds("a,b")


def test_cli_config_errors_exit_2(tmp_path, capsys):
    out = str(tmp_path / "out")
    assert run.main(["run", "--config", _write(tmp_path, {"bogus": 1}), "--out", out]) == 2
    assert run.main(["run", "--seeds", "", "--out", out]) == 2
    assert run.main(["run", "--config", _write(tmp_path, {"mode": "sweep", "grid": {"n": [10]}}), "--out", out]) == 2
    assert run.main(["run", "--config", str(tmp_path / "missing.json"), "--out", out]) == 2
    assert "config error" in capsys.readouterr().err
