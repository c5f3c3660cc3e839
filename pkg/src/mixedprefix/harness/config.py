"""
mixedprefix.harness.config

Experiment configuration: one JSON file describes a whole run. Everything
that can change a reported number lives here, so a run is a function of
this file and its seed list.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixedprefix.config import get_settings
from mixedprefix.corpus.ingest import MissingPolicy
from mixedprefix.corpus.split import SplitSpec
from mixedprefix.corpus.synth import SourceSpec
from mixedprefix.errors import ConfigError
from mixedprefix.lm.model import LmConfig
from mixedprefix.lm.optim import AdamWConfig
from mixedprefix.lm.training import TrainingBudget
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import DEFAULT_CAPACITY
from mixedprefix.strategies.base import StrategyKind
from mixedprefix.utils.files import read_json, write_json

# Fields that never change a reported number; kept out of the hash and of metrics.json.
_RUNTIME_FIELDS = {"out_dir", "workers"}


class SyntheticCorpus(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["synthetic"] = "synthetic"
    source: SourceSpec = Field(default_factory=SourceSpec)


class JsonlCorpus(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["jsonl"] = "jsonl"
    path: Path
    features: list[str]
    missing: MissingPolicy = "error"
    vocab_size: Optional[int] = Field(default=None, gt=4)
    min_count: int = Field(default=1, ge=1)


CorpusSpec = Annotated[Union[SyntheticCorpus, JsonlCorpus], Field(discriminator="kind")]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "experiment"
    corpus: CorpusSpec = Field(default_factory=SyntheticCorpus)
    # Feature order, coarsest first; defaults to the corpus' own order.
    features: Optional[list[str]] = None
    capacity: int = Field(default=DEFAULT_CAPACITY, ge=1)
    split: SplitSpec = Field(default_factory=SplitSpec)
    strategies: list[StrategyKind] = Field(default_factory=lambda: ["met", "prefix-no-pool", "prefix-complete-pool"])
    hyper: MetHyperparams = Field(default_factory=MetHyperparams)
    prefix: PrefixConfig = Field(default_factory=PrefixConfig)
    lm: LmConfig = Field(default_factory=LmConfig)
    optimizer: AdamWConfig = Field(default_factory=AdamWConfig)
    budget: TrainingBudget = Field(default_factory=TrainingBudget)
    pretrain_optimizer: AdamWConfig = Field(default_factory=AdamWConfig)
    pretrain_budget: TrainingBudget = Field(default_factory=TrainingBudget)
    pretrain_corpus: Literal["base", "train"] = "base"
    backbone_checkpoint: Optional[Path] = None
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    eval_batch_size: int = Field(default=64, ge=1)
    workers: int = Field(default_factory=lambda: get_settings().MIXEDPREFIX_WORKERS, ge=1)
    out_dir: Path = Field(default_factory=lambda: get_settings().MIXEDPREFIX_OUT_DIR)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError(f"duplicate strategies in {self.strategies}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"duplicate seeds in {self.seeds}")
        if self.features is not None:
            missing = [f for f in self.features if f not in self.corpus_features]
            if missing:
                raise ValueError(f"features {missing} are not in the corpus")
        return self

    @property
    def corpus_features(self) -> list[str]:
        if isinstance(self.corpus, SyntheticCorpus):
            return [f.name for f in self.corpus.source.features]
        return list(self.corpus.features)

    @property
    def schema_features(self) -> list[str]:
        return list(self.features) if self.features is not None else self.corpus_features

    def result_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude=_RUNTIME_FIELDS)

    def config_hash(self) -> str:
        blob = json.dumps(self.result_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        """Output directory; shared by every seed subset of the same config."""
        blob = json.dumps(self.model_dump(mode="json", exclude=_RUNTIME_FIELDS | {"seeds"}), sort_keys=True)
        digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()
        return Path(self.out_dir) / f"{self.name}-{digest[:12]}"

    def with_overrides(
        self,
        seed: Optional[int] = None,
        out: Optional[Path] = None,
        workers: Optional[int] = None,
        **fields: Any,
    ) -> "ExperimentConfig":
        update: Dict[str, Any] = dict(fields)
        if seed is not None:
            update["seeds"] = [seed]
        if out is not None:
            update["out_dir"] = Path(out)
        if workers is not None:
            update["workers"] = workers
        return self.validated(self.model_dump() | update)

    @classmethod
    def validated(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            errors = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]} for e in exc.errors()]
            raise ConfigError(f"invalid experiment config ({len(errors)} errors)", {"errors": errors}) from None

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist", {"path": str(path)})
        try:
            data = read_json(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc.msg} at line {exc.lineno}", {"path": str(path)}) from None
        return cls.validated(data)

    def save(self, path: Path) -> Path:
        return write_json(Path(path), self.model_dump(mode="json"))
