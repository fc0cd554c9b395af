import json

import pytest

from planecalib.config import PipelineConfig, apply_overrides, config_from_dict, load_config, merge_config, parse_override
from planecalib.errors import SchemaError


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.joint.alpha == 1.0
    assert cfg.joint.distance_threshold == 0.1
    assert cfg.joint.rebuild_every == 3
    assert cfg.joint.max_iterations == 100
    assert cfg.joint.degeneracy_ratio == 1e-3
    assert cfg.metrics.stride == 4
    assert cfg.threads == 1


def test_partial_document_merges_into_defaults():
    cfg = config_from_dict({"joint": {"alpha": 2, "rebuild_every": 0}, "lidar": {"icp": {"max_iterations": 7}}})
    assert cfg.joint.alpha == 2.0 and isinstance(cfg.joint.alpha, float)
    assert cfg.joint.rebuild_every == 0
    assert cfg.lidar.icp.max_iterations == 7
    assert cfg.joint.distance_threshold == 0.1


def test_all_problems_reported():
    with pytest.raises(SchemaError) as info:
        config_from_dict({"format_version": 9, "joint": {"alpha": "big", "nope": 1}, "visual": 3})
    text = " ".join(info.value.violations)
    assert len(info.value.violations) == 4
    for key in ("format_version", "joint.alpha", "joint.nope", "visual"):
        assert key in text


def test_bool_and_int_are_not_interchangeable():
    with pytest.raises(SchemaError):
        config_from_dict({"joint": {"rebuild_every": True}})
    with pytest.raises(SchemaError):
        config_from_dict({"joint": {"auto_alpha": 1}})


def test_overrides():
    assert parse_override("joint.alpha=2.5") == {"joint": {"alpha": 2.5}}
    assert parse_override("name=abc") == {"name": "abc"}
    cfg = apply_overrides(PipelineConfig(), ["joint.alpha=0.5", "init.max_rounds=3", "lidar.refine=false"])
    assert cfg.joint.alpha == 0.5 and cfg.init.max_rounds == 3 and cfg.lidar.refine is False
    with pytest.raises(ValueError):
        parse_override("joint.alpha")
    with pytest.raises(SchemaError):
        apply_overrides(PipelineConfig(), ["joint.bogus=1"])


def test_round_trip_through_json(tmp_path):
    cfg = apply_overrides(PipelineConfig(), ["joint.alpha=0.25", "metrics.stride=2"])
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_layering_order():
    cfg = config_from_dict({"joint": {"alpha": 2.0, "distance_threshold": 0.2}})
    merge_config(cfg, {"joint": {"alpha": 3.0}})
    apply_overrides(cfg, ["joint.distance_threshold=0.05"])
    assert (cfg.joint.alpha, cfg.joint.distance_threshold) == (3.0, 0.05)
