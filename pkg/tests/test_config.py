import json

import pytest

from glab.config import DEFAULTS, apply_overrides, load_config, render_defaults
from glab.errors import InvalidConfig, IoError


def test_defaults_are_deep_copied():
    a = load_config()
    a["training"]["epochs"] = 999
    assert load_config()["training"]["epochs"] == DEFAULTS["training"]["epochs"]


def test_file_merges_over_defaults(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"training": {"epochs": 3}, "guidance": {"method": "tpg"}}))
    cfg = load_config(path)
    assert cfg["training"]["epochs"] == 3
    assert cfg["training"]["lr"] == DEFAULTS["training"]["lr"]
    assert cfg["guidance"]["method"] == "tpg"


def test_unknown_keys_rejected_with_path(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"training": {"epoch": 3}}))
    with pytest.raises(InvalidConfig, match="training.epoch"):
        load_config(path)
    path.write_text(json.dumps({"trainign": {}}))
    with pytest.raises(InvalidConfig, match="trainign"):
        load_config(path)
    path.write_text(json.dumps({"training": 3}))
    with pytest.raises(InvalidConfig):
        load_config(path)
    path.write_text("[1, 2]")
    with pytest.raises(InvalidConfig):
        load_config(path)


def test_malformed_file_errors(tmp_path):
    with pytest.raises(IoError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(IoError):
        load_config(bad)


def test_overrides_coerce_by_default_type():
    cfg = load_config()
    apply_overrides(cfg, [
        "training.epochs=5",
        "training.lr=0.01",
        "analysis.conditional=false",
        "guidance.gamma=2.5",
        "sampling.cond=3",
        "dataset.kind=bump_images",
    ])
    assert cfg["training"]["epochs"] == 5
    assert cfg["training"]["lr"] == 0.01
    assert cfg["analysis"]["conditional"] is False
    assert cfg["guidance"]["gamma"] == 2.5
    assert cfg["sampling"]["cond"] == 3
    assert cfg["dataset"]["kind"] == "bump_images"


def test_overrides_null_and_layers():
    cfg = load_config()
    apply_overrides(cfg, ["guidance.gamma=null", "guidance.layers=[2,3]"])
    assert cfg["guidance"]["gamma"] is None
    assert cfg["guidance"]["layers"] == [2, 3]


def test_override_validation():
    cfg = load_config()
    with pytest.raises(InvalidConfig):
        apply_overrides(cfg, ["training.epochs"])
    with pytest.raises(InvalidConfig):
        apply_overrides(cfg, ["nope.epochs=1"])
    with pytest.raises(InvalidConfig):
        apply_overrides(cfg, ["training.nope=1"])
    with pytest.raises(InvalidConfig):
        apply_overrides(cfg, ["training.epochs=five"])
    with pytest.raises(InvalidConfig):
        apply_overrides(cfg, ["analysis.conditional=maybe"])


def test_render_defaults_covers_every_key():
    text = render_defaults()
    for section, values in DEFAULTS.items():
        for name in values:
            assert f"{section}.{name} = " in text
