from __future__ import annotations

import json

import pytest

from costeps.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config


def test_defaults_match_reference_setup():
    cfg = ExperimentConfig()
    assert (cfg.model.layers, cfg.model.dim, cfg.model.grid) == (12, 128, (8, 5, 5))
    assert cfg.schedule.n_steps == 20 and cfg.task.size == 5 and cfg.task.frames == 8


def test_unknown_key_names_dotted_path():
    with pytest.raises(ConfigError) as err:
        parse_config({"mode": "eval", "train": {"stpes": 3}})
    assert err.value.key == "train.stpes"


def test_type_errors_name_key():
    with pytest.raises(ConfigError) as err:
        parse_config({"model": {"layers": "twelve"}})
    assert err.value.key == "model.layers"
    with pytest.raises(ConfigError) as err:
        parse_config({"mode": "fly"})
    assert err.value.key == "mode"
    with pytest.raises(ConfigError):
        parse_config({"model": {"dim": 30, "heads": 4}})


def test_roundtrip_and_hash(tmp_path):
    cfg = parse_config({"mode": "train", "train": {"steps": 5}, "model": {"layers": 2}})
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert again == cfg and again.hash() == cfg.hash()
    moved = parse_config({**json.loads(dump_config(cfg)), "out_dir": "elsewhere"})
    assert moved.hash() == cfg.hash()
    assert parse_config({"mode": "train", "train": {"steps": 6}}).hash() != cfg.hash()


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)
