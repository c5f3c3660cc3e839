from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.config import reset_settings
from mixedprefix.corpus.tokenizer import SPECIALS, Tokenizer
from mixedprefix.harness.config import ExperimentConfig
from mixedprefix.lm.model import LmConfig, LmModel
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.strategies import EncodedExample

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

WORDS = ["a", "b", "c", "d", "e", "f"]


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("MIXEDPREFIX_OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("MIXEDPREFIX_WORKERS", raising=False)
    monkeypatch.delenv("MIXEDPREFIX_NONLINEARITY", raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def tokenizer() -> Tokenizer:
    return Tokenizer([*SPECIALS, *WORDS])


@pytest.fixture
def lm_config(tokenizer) -> LmConfig:
    return LmConfig(vocab_size=len(tokenizer), d_model=8, n_layers=1, n_heads=2, max_seq=16)


@pytest.fixture
def backbone(lm_config) -> LmModel:
    return LmModel.init(lm_config, RngStream(0, "test-backbone")).freeze()


@pytest.fixture
def schema() -> FeatureSchema:
    s = FeatureSchema(["domain"], capacity=4)
    s.register([{"domain": "d0"}, {"domain": "d1"}, {"domain": "d2"}])
    return s.freeze()


@pytest.fixture
def two_feature_schema() -> FeatureSchema:
    s = FeatureSchema(["category", "product"], capacity=4)
    s.register(
        [
            {"category": "c0", "product": "p0"},
            {"category": "c1", "product": "p1"},
            {"category": "c0", "product": "p2"},
            {"category": "c1", "product": "p3"},
        ]
    )
    return s.freeze()


def make_examples(tokenizer: Tokenizer, n: int, values: list[str], seed: int = 0, feature: str = "domain") -> list[EncodedExample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        words = [WORDS[int(k)] for k in rng.integers(0, len(WORDS), int(rng.integers(1, 6)))]
        out.append(EncodedExample(tuple(tokenizer.encode_sentence(words)), {feature: values[i % len(values)]}))
    return out


@pytest.fixture
def examples(tokenizer) -> list[EncodedExample]:
    return make_examples(tokenizer, 12, ["d0", "d1", "d2"])


@pytest.fixture
def smoke_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig.load(CONFIGS / "smoke.json").with_overrides(out=tmp_path / "runs")
