import json

import numpy as np
import pytest

from bcct.config import ConfigError, TrainConfig, config_from_dict, load_config


def test_empty_object_gives_all_defaults(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{}")
    cfg = load_config(p)
    assert cfg == TrainConfig()
    assert cfg.delta == 0.8
    assert cfg.lambda_mask == 1.0
    assert cfg.full_bce is False


def test_single_override(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{"delta": 0.7}')
    assert load_config(p).delta == 0.7


def test_unknown_key_named(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{"detla": 0.8}')
    with pytest.raises(ConfigError, match="detla"):
        load_config(p)


def test_type_mismatch_names_key_and_type():
    with pytest.raises(ConfigError, match="batch_size.*integer"):
        config_from_dict({"batch_size": "many"})
    with pytest.raises(ConfigError, match="lambda_mask.*number"):
        config_from_dict({"lambda_mask": "x"})
    with pytest.raises(ConfigError, match="full_bce.*boolean"):
        config_from_dict({"full_bce": 1})
    with pytest.raises(ConfigError, match="seed.*integer"):
        config_from_dict({"seed": True})


def test_round_trip_through_file_form(tmp_path):
    cfg = TrainConfig(seed=7, delta=0.75, lambda_mask=0.5, aug_color=False,
                      precision="f64", eval_tau=0.9)
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    assert load_config(p) == cfg
    assert config_from_dict(json.loads(cfg.to_json())) == cfg


def test_validation_bounds():
    for bad in [{"delta": 0.0}, {"delta": 1.5}, {"lambda_mask": -1.0},
                {"lr_backbone": 0.0}, {"lr_decay_factor": 0.0},
                {"lr_decay_factor": 1.5}, {"pretrain_epochs": 0},
                {"batch_size": 0}, {"precision": "f16"},
                {"grad_reduce": "median"}, {"eval_tau": 0.0},
                {"bc_warmup_epochs": -1}]:
        with pytest.raises(ConfigError):
            config_from_dict(bad)


def test_dtype_and_tau_accessors():
    assert TrainConfig(precision="f32").dtype == np.float32
    assert TrainConfig(precision="f64").dtype == np.float64
    assert TrainConfig(delta=0.7).tau == 0.7
    assert TrainConfig(delta=0.7, eval_tau=0.9).tau == 0.9


def test_invalid_json_reported(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)
    p2 = tmp_path / "list.json"
    p2.write_text("[1,2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(p2)
