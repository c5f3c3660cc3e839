from __future__ import annotations

import io
import json
import logging
from pathlib import Path

import pytest

from mixedprefix.config import (
    REFERENCE_BATCH_SIZE,
    REFERENCE_KV_DIM,
    REFERENCE_LEARNING_RATE,
    REFERENCE_N_LAYERS,
    REFERENCE_PREFIX_EMBED_DIM,
    REFERENCE_PREFIX_MLP_HIDDEN,
    REFERENCE_VALUES_PER_FEATURE,
    get_settings,
    reset_settings,
)
from mixedprefix.errors import ConfigError
from mixedprefix.harness.config import ExperimentConfig, JsonlCorpus
from mixedprefix.lm import AdamWConfig, LmConfig, TrainingBudget
from mixedprefix.prefix import MetHyperparams, PrefixConfig
from mixedprefix.utils.logging import get_logger, setup_logging

from conftest import CONFIGS


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = ExperimentConfig.load(path)
    assert cfg.name
    assert cfg.schema_features


def test_runtime_fields_stay_out_of_the_hash(tmp_path, smoke_config):
    other = smoke_config.with_overrides(out=tmp_path / "elsewhere", workers=4)
    assert other.config_hash() == smoke_config.config_hash()
    assert "out_dir" not in other.result_dict() and "workers" not in other.result_dict()
    assert other.run_dir().name == smoke_config.run_dir().name


def test_run_dir_is_shared_across_seeds(smoke_config):
    a = smoke_config.with_overrides(seed=0)
    b = smoke_config.with_overrides(seed=3)
    assert a.run_dir() == b.run_dir()
    assert a.config_hash() != b.config_hash()
    assert b.seeds == [3]


def test_changing_a_hyperparameter_changes_the_run(smoke_config):
    changed = smoke_config.with_overrides(hyper={"epsilon": 0.3, "beta": 0.01})
    assert changed.run_dir() != smoke_config.run_dir()


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\"name\": ", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(bad)
    assert info.value.payload["path"] == str(bad)


@pytest.mark.parametrize(
    "patch",
    [
        {"strategies": ["met", "met"]},
        {"strategies": ["lora"]},
        {"seeds": []},
        {"hyper": {"epsilon": 1.5}},
        {"features": ["topic"]},
        {"unknown_field": 1},
    ],
)
def test_invalid_fields_are_reported(tmp_path, patch):
    data = json.loads((CONFIGS / "smoke.json").read_text(encoding="utf-8")) | patch
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert info.value.payload["errors"]
    assert info.value.to_dict()["ok"] is False


def test_jsonl_corpus_features():
    cfg = ExperimentConfig(corpus=JsonlCorpus(path=Path("c.jsonl"), features=["a", "b"]), features=["b"])
    assert cfg.corpus_features == ["a", "b"]
    assert cfg.schema_features == ["b"]


def test_settings_come_from_the_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MIXEDPREFIX_WORKERS", "3")
    reset_settings()
    assert get_settings().MIXEDPREFIX_WORKERS == 3
    assert get_settings().MIXEDPREFIX_OUT_DIR == tmp_path / "runs"
    assert ExperimentConfig().workers == 3


def test_save_and_load_round_trip(tmp_path, smoke_config):
    path = smoke_config.save(tmp_path / "saved.json")
    assert ExperimentConfig.load(path) == smoke_config


def test_json_logging_carries_extra_fields():
    stream = io.StringIO()
    setup_logging("DEBUG", json_output=True, stream=stream)
    try:
        get_logger("mixedprefix.test").info("hello %s", "world", extra={"seed": 3})
        record = json.loads(stream.getvalue().strip().splitlines()[-1])
        assert record["message"] == "hello world"
        assert record["name"] == "mixedprefix.test"
        assert record["extra"] == {"seed": 3}
    finally:
        logging.getLogger().handlers.clear()


def test_reference_scale_values_are_valid_configurations():
    lm = LmConfig(d_model=REFERENCE_KV_DIM, n_layers=REFERENCE_N_LAYERS, n_heads=16)
    prefix = PrefixConfig(embed_dim=REFERENCE_PREFIX_EMBED_DIM, hidden=REFERENCE_PREFIX_MLP_HIDDEN)
    budget = TrainingBudget(batch_size=REFERENCE_BATCH_SIZE)
    optimizer = AdamWConfig(lr=REFERENCE_LEARNING_RATE)
    cfg = ExperimentConfig(lm=lm, prefix=prefix, budget=budget, optimizer=optimizer)
    assert cfg.lm.head_dim == 64
    assert cfg.capacity == REFERENCE_VALUES_PER_FEATURE
    assert cfg.hyper == MetHyperparams(epsilon=0.1, beta=0.01)
