"""Run-config JSON parsing: defaults, strict key checking, auto resolution."""

import json

import pytest

from kwspot.config import (
    RunConfig,
    load_run_config,
    parse_run_config,
    resolve_min_duration,
)
from kwspot.dataio import ManifestEntry
from kwspot.errors import InvalidConfig


def test_empty_document_yields_defaults():
    cfg = parse_run_config({})
    assert cfg.features.sample_rate == 16000
    assert cfg.backbone.kind == "dstcn"
    assert cfg.train.loss.kind == "max_pooling"
    assert cfg.train.epochs == 80
    assert cfg.keywords is None
    assert cfg.min_duration_auto is False


def test_sections_parse_and_round_trip():
    doc = {
        "features": {"sample_rate": 8000, "num_mels": 20},
        "backbone": {"kind": "gdstcn", "hidden_channels": 32, "num_layers": 3,
                     "kernel_size": 4, "dilations": [1, 2, 4], "groups": 4},
        "loss": {"kind": "vad_mean", "vad_mean_interval": 7},
        "train": {"epochs": 5, "batch_size": 16, "seed": 3,
                  "speed_factors": [0.95, 1.0, 1.05],
                  "masks": {"num_time_masks": 1, "time_mask_max": 10,
                            "num_freq_masks": 0, "freq_mask_max": 0}},
        "keywords": ["hey", "ok"],
    }
    cfg = parse_run_config(doc)
    assert cfg.features.num_mels == 20
    assert cfg.backbone.dilations == (1, 2, 4)
    assert cfg.train.loss.kind == "vad_mean"
    assert cfg.train.loss.vad_mean_interval == 7
    assert cfg.train.speed_factors == (0.95, 1.0, 1.05)
    assert cfg.train.masks.num_time_masks == 1
    assert cfg.keywords == ("hey", "ok")
    again = parse_run_config(cfg.to_dict())
    assert again == cfg


@pytest.mark.parametrize(
    "doc,fragment",
    [
        ({"featuers": {}}, "featuers"),
        ({"features": {"sample_rte": 8000}}, "sample_rte"),
        ({"backbone": {"chans": 3}}, "chans"),
        ({"loss": {"margin": 1}}, "margin"),
        ({"train": {"learning_rate": 0.1}}, "learning_rate"),
        ({"train": {"masks": {"rows": 2}}}, "rows"),
    ],
)
def test_unknown_keys_are_hard_errors(doc, fragment):
    with pytest.raises(InvalidConfig, match=fragment):
        parse_run_config(doc)


def test_keyword_validation():
    with pytest.raises(InvalidConfig):
        parse_run_config({"keywords": ["a", "a"]})
    with pytest.raises(InvalidConfig):
        parse_run_config({"keywords": ["a", ""]})
    with pytest.raises(InvalidConfig):
        parse_run_config({"keywords": "a"})


def test_section_must_be_mapping():
    with pytest.raises(InvalidConfig):
        parse_run_config({"features": [1, 2]})
    with pytest.raises(InvalidConfig):
        parse_run_config([])


def test_min_duration_auto():
    cfg = parse_run_config({"loss": {"min_duration_frames": "auto"}})
    assert cfg.min_duration_auto is True
    assert cfg.train.loss.min_duration_frames == 0
    # to_dict re-emits the sentinel so saved configs stay faithful
    assert cfg.to_dict()["loss"]["min_duration_frames"] == "auto"

    entries = [ManifestEntry(key="a", wav="x", label=0, duration_frames=100)]
    resolved = resolve_min_duration(cfg, entries)
    assert resolved.min_duration_auto is False
    assert resolved.train.loss.min_duration_frames == 50


def test_resolve_is_noop_for_explicit_value():
    cfg = parse_run_config({"loss": {"min_duration_frames": 7}})
    assert resolve_min_duration(cfg, []) is cfg


def test_load_run_config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"train": {"epochs": 2}}))
    assert load_run_config(str(p)).train.epochs == 2
    with pytest.raises(InvalidConfig, match="valid JSON"):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        load_run_config(str(bad))
    with pytest.raises(InvalidConfig):
        load_run_config(str(tmp_path / "missing.json"))


def test_default_construction_matches_empty_parse():
    assert RunConfig() == parse_run_config({})
