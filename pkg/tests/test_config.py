import json

import pytest

from sbca.agent import TrainConfig
from sbca.config import SEED_ENV, ExperimentConfig, load_config
from sbca.errors import ParameterError, SchemaError


def test_defaults_mirror_train_config():
    cfg = ExperimentConfig()
    assert cfg.train_config() == TrainConfig()


def test_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1, "lr": 0.001, "variants": ["SB"]}))
    cfg = load_config(path, env={})
    assert (cfg.seed, cfg.lr, cfg.variants) == (1, 0.001, ("SB",))
    assert load_config(path, env={SEED_ENV: "7"}).seed == 7
    assert load_config(path, env={SEED_ENV: "7"}, seed=9).seed == 9
    assert load_config(path, env={}, seed=None).seed == 1


def test_bad_documents(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_config(path, env={})
    path.write_text("[1, 2]")
    with pytest.raises(SchemaError):
        load_config(path, env={})
    path.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(SchemaError, match="learning_rate"):
        load_config(path, env={})
    with pytest.raises(ParameterError):
        load_config(env={SEED_ENV: "abc"})


def test_validation():
    with pytest.raises(ParameterError):
        ExperimentConfig(variants=("SB", "XX"))
    with pytest.raises(ParameterError):
        ExperimentConfig(groups={"g": []})
    with pytest.raises(ParameterError):
        ExperimentConfig(kappa=-1.0)


def test_digest_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.digest() == b.digest()
    assert a.with_overrides(seed=1).digest() != a.digest()
    assert json.loads(json.dumps(a.to_dict()))["boundaries"] == list(a.boundaries)
