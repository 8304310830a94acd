import json

import pytest

from dadt import config
from dadt.config import ConfigError, RunConfig, from_json, load


def test_defaults():
    rc = load(None)
    assert rc == RunConfig()
    assert rc.train.mode == "dadt" and rc.train.loss.lambda_c == 1.0
    assert rc.eval.iou_thresholds == {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}


def test_partial_sections_filled():
    rc = from_json({"train": {"epochs": 3}, "loss": {"lambda_o": 0.25},
                    "eval": {"iou_thresholds": {"vehicle": 0.5}}})
    assert rc.train.epochs == 3 and rc.train.batch_size == 1
    assert rc.train.loss.lambda_o == 0.25 and rc.train.loss.lambda_c == 1.0
    assert rc.eval.iou_thresholds == {"vehicle": 0.5, "pedestrian": 0.5, "cyclist": 0.5}
    assert rc.train.iou_thresholds == {0: 0.5, 1: 0.5, 2: 0.5}
    assert rc.explicit == {"train.epochs", "loss.lambda_o", "eval.iou_thresholds"}


@pytest.mark.parametrize("doc", [
    {"trian": {}},
    {"train": {"epoch": 3}},
    {"loss": {"lambda": 1.0}},
    {"grid": {"cells": 1.0}},
    {"eval": {"iou_thresholds": {"truck": 0.5}}},
    {"schema_version": 2},
    {"train": {"mode": "fast"}},
    {"train": []},
    [],
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        from_json(doc)


def test_resolved_config_round_trip(tmp_path):
    rc = from_json({"train": {"epochs": 4, "seed": 9}, "paths": {"data": "d"}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(rc.to_json()))
    again = load(path)
    assert again.train == rc.train and again.eval == rc.eval and again.paths == rc.paths
    assert rc.to_json()["schema_version"] == config.SCHEMA_VERSION


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load(tmp_path / "c.json")
