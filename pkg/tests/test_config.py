import json

import pytest

from anomem.config import ExperimentConfig
from anomem.errors import ValidationError


def test_defaults_mirror_reference_settings():
    cfg = ExperimentConfig().validate()
    assert cfg.memory.beta == 2.0
    assert cfg.loss.tau == 0.1 and cfg.loss.lambda_v == 0.05 and cfg.loss.margin == 2.0
    assert cfg.loss.ratios == [0.3, 1.0]
    assert cfg.scale_weights().lambdas == (1.0, 2.0)
    assert cfg.optim.momentum == 0.9 and cfg.optim.weight_decay == 5e-4
    assert cfg.optim.lr_max == 0.05 and cfg.optim.lr_min == 0.0 and cfg.optim.batch_size == 128
    assert cfg.mode == "one-class" and not cfg.use_projection_head


def test_json_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(**{"loss.lambda_v": 0.0, "seed": 4})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = ExperimentConfig.load(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert ExperimentConfig().hash() != cfg.hash()


def test_partial_config_fills_defaults():
    cfg = ExperimentConfig.from_dict({"memory": {"sizes": [8, 4]}, "seed": 3})
    assert cfg.memory.sizes == [8, 4] and cfg.memory.beta == 2.0 and cfg.seed == 3


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"memory": {"sizes": [8, 4], "extra": 0}},
        {"memory": {"sizes": [8]}},
        {"memory": {"beta": 0}},
        {"loss": {"tau": "0.1"}},
        {"optim": {"epochs": 1.5}},
        {"mode": "ssad"},
        {"protocol": {"gamma": 1.0}},
        {"use_projection_head": True},
        {"loss": {"variance_mode": "dims"}},
        {"scales": [2]},
        {"normalize_before_memory": 1},
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(raw)


def test_load_rejects_malformed_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        ExperimentConfig.load(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ValidationError):
        ExperimentConfig.load(path)


def test_replace_unknown_key():
    with pytest.raises(ValidationError):
        ExperimentConfig().replace(**{"loss.nope": 1})
