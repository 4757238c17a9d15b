"""
Tests for run configuration parsing and validation.
"""

from pathlib import Path

import orjson
import pytest

from rdrec.config import RunConfig, TaskRatio, build_config, parse_config, parse_override
from rdrec.exceptions import ConfigError


def test_defaults():
    cfg = build_config({})
    assert cfg.trainer.ratios.as_tuple() == (1, 1, 1, 3)
    assert cfg.evaluate.ks == [1, 5, 10]
    assert cfg.paths.quads == cfg.paths.work_dir / "quads.jsonl"
    assert cfg.distill.kind == "mock"


@pytest.mark.parametrize("value", ["1:1:1:3", [1, 1, 1, 3], {"eg": 1, "rg": 1, "sr": 1, "tr": 3}])
def test_ratio_forms(value):
    assert TaskRatio.model_validate(value).as_tuple() == (1, 1, 1, 3)


@pytest.mark.parametrize("value", ["1:1:3", "1:a:1:3", "0:1:1:3"])
def test_bad_ratios(value):
    with pytest.raises(ConfigError):
        build_config({"trainer": {"ratios": value}})


def test_top_level_ratios_are_hoisted():
    cfg = build_config({"ratios": "2:1:1:4"})
    assert str(cfg.trainer.ratios) == "2:1:1:4"


def test_unknown_key_is_reported_with_its_path():
    with pytest.raises(ConfigError) as e:
        build_config({"trainer": {"learning_rate": 0.1}})
    assert "trainer.learning_rate" in str(e.value)
    assert e.value.exit_code == 2


def test_overrides_then_updates():
    cfg = build_config(
        {"seed": 1},
        overrides=["trainer.batch_size=8", "distill.model=llama"],
        updates={"trainer.batch_size": 16, "seed": None},
    )
    assert cfg.trainer.batch_size == 16
    assert cfg.distill.model == "llama"
    assert cfg.seed == 1


def test_parse_override():
    assert parse_override("beam.beam_width=5") == ("beam.beam_width", 5)
    assert parse_override("distill.model=gpt") == ("distill.model", "gpt")
    assert parse_override("evaluate.ks=[5,10]") == ("evaluate.ks", [5, 10])
    with pytest.raises(ConfigError):
        parse_override("beam.beam_width")


@pytest.mark.parametrize("preset, lr", [("beauty", 5e-4), ("sports", 1e-3), ("toys", 5e-4)])
def test_dataset_preset_learning_rate(preset, lr):
    assert build_config({"trainer": {"dataset_preset": preset}}).trainer.lr == lr


def test_explicit_lr_beats_preset():
    cfg = build_config({"trainer": {"dataset_preset": "sports", "lr": 2e-4}})
    assert cfg.trainer.lr == 2e-4


def test_http_backend_needs_endpoint():
    with pytest.raises(ConfigError):
        build_config({"distill": {"kind": "http"}})
    with pytest.raises(ConfigError):
        build_config({"distill": {"kind": "http", "endpoint": "ftp://host/x"}})
    cfg = build_config({"distill": {"kind": "http", "endpoint": "http://localhost:8000/generate"}})
    assert cfg.distill.endpoint.endswith("/generate")


def test_ks_are_sorted_and_positive():
    assert build_config({"evaluate": {"ks": [10, 5, 5]}}).evaluate.ks == [5, 10]
    with pytest.raises(ConfigError):
        build_config({"evaluate": {"ks": [0, 10]}})
    with pytest.raises(ConfigError):
        build_config({"evaluate": {"ks": []}})


def test_heads_must_divide_model_width():
    with pytest.raises(ConfigError):
        build_config({"model": {"d_model": 30, "n_heads": 4}})


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_bytes(orjson.dumps({"seed": 7, "beam": {"beam_width": 5}}))
    cfg = parse_config(path, overrides=["beam.max_len=12"])
    assert (cfg.seed, cfg.beam.beam_width, cfg.beam.max_len) == (7, 5, 12)


def test_parse_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{seed: 1")
    with pytest.raises(ConfigError):
        parse_config(bad)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        parse_config(listed)


def test_echo_is_plain_json():
    cfg = build_config({"ratios": [1, 1, 1, 3]})
    echoed = cfg.echo()
    assert orjson.loads(orjson.dumps(echoed)) == echoed
    assert RunConfig.model_validate(echoed).echo() == echoed


def test_bundled_config_is_valid():
    cfg = parse_config(Path(__file__).parent / "configs" / "synthetic.json")
    assert cfg.trainer.n_negatives == 9
    assert cfg.trainer.ratios.as_tuple() == (1, 1, 1, 3)
