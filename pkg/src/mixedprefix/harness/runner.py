"""
mixedprefix.harness.runner

One experiment = for every seed: build the corpus and its splits, pretrain
(or load) the backbone, then train and evaluate every configured strategy
on test-seen and test-unseen. Results are written to the run directory:

    config.json      the config as given
    metrics.json     every reported number; a function of (config, seeds) only
    results.csv      the same numbers, one row per (seed, strategy, partition, context)
    timings.json     wall-clock metadata
    seed<N>/         schema.json, tokenizer.json, oracle.csv, backbone.ckpt, <strategy>.ckpt

If any stage fails, metrics.json holds what finished, `status` is "failed",
and FAILED.json names the stage and the error.
"""

from __future__ import annotations

import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Protocol, Sequence

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.config import get_settings
from mixedprefix.corpus.ingest import ingest_jsonl
from mixedprefix.corpus.split import split
from mixedprefix.corpus.synth import SynthResult, synth_generate
from mixedprefix.corpus.tokenizer import SPECIALS, Tokenizer, build_vocab
from mixedprefix.corpus.types import Corpus
from mixedprefix.errors import ConfigError, MixedPrefixError
from mixedprefix.harness.config import ExperimentConfig, SyntheticCorpus
from mixedprefix.harness.evaluation import RESULT_COLUMNS, PartitionResult, evaluate, score_examples
from mixedprefix.lm.model import LmModel
from mixedprefix.lm.optim import AdamW
from mixedprefix.lm.pretrain import pretrain_backbone
from mixedprefix.lm.training import TrainingResult, fit
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.strategies import AdaptationStrategy, EncodedExample, conditional_tokens, make_strategy, train_step
from mixedprefix.utils.files import write_csv, write_json
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.harness")

EVAL_PARTITIONS = ("test-seen", "test-unseen")
REFERENCE_STRATEGY = "met"


# ------------------------------------------------------------
# Data
# ------------------------------------------------------------


@dataclass
class SeedData:
    seed: int
    corpus: Corpus
    parts: Dict[str, Corpus]
    tokenizer: Tokenizer
    schemas: Dict[tuple[str, ...], FeatureSchema]
    features: list[str]
    pretrain_words: list[tuple[str, ...]]
    word_limit: int
    synth: Optional[SynthResult] = None

    @property
    def schema(self) -> FeatureSchema:
        return self.schemas[tuple(self.features)]

    @property
    def oracle(self) -> Dict[str, float]:
        if self.synth is None:
            return {}
        return {row.context: row.entropy for row in self.synth.oracle}

    def examples(self, partition: str, features: Optional[Sequence[str]] = None) -> list[EncodedExample]:
        feats = list(features) if features is not None else self.features
        return [
            EncodedExample(
                tuple(self.tokenizer.encode_sentence(ex.words[: self.word_limit])),
                {f: ex.features.get(f) for f in feats},
            )
            for ex in self.parts[partition]
        ]

    def labels(self, partition: str) -> list[str]:
        return [ex.context_label(self.corpus.features) for ex in self.parts[partition]]

    def sequences(self, words: Sequence[Sequence[str]]) -> list[list[int]]:
        return [self.tokenizer.encode_sentence(w[: self.word_limit]) for w in words]


def load_corpus(config: ExperimentConfig, seed: int, sentences_per_context: Optional[int] = None) -> tuple[Corpus, Optional[SynthResult]]:
    if isinstance(config.corpus, SyntheticCorpus):
        result = synth_generate(config.corpus.source, seed, sentences_per_context)
        return result.corpus, result
    spec = config.corpus
    if not spec.path.exists():
        raise ConfigError(f"corpus file {spec.path} does not exist", {"path": str(spec.path)})
    return ingest_jsonl(spec.path, spec.features, spec.missing), None


def _build_tokenizer(config: ExperimentConfig, train: Corpus, pretrain: Sequence[Sequence[str]], synth: Optional[SynthResult]) -> Tokenizer:
    if synth is not None:
        return Tokenizer([*SPECIALS, *synth.source.words()])
    spec = config.corpus
    return build_vocab([*(ex.words for ex in train), *pretrain], spec.vocab_size, spec.min_count)


def prepare_seed(
    config: ExperimentConfig,
    seed: int,
    feature_sets: Optional[Sequence[Sequence[str]]] = None,
    sentences_per_context: Optional[int] = None,
) -> SeedData:
    """
    Corpus, splits, tokenizer and frozen schemas for one seed. Each entry of
    `feature_sets` gets its own schema over the training split; the first is
    the primary one.
    """
    corpus, synth = load_corpus(config, seed, sentences_per_context)
    parts = split(corpus, config.split, seed)
    sets = [list(f) for f in (feature_sets or [config.schema_features])]

    schemas: Dict[tuple[str, ...], FeatureSchema] = {}
    for feats in sets:
        schema = FeatureSchema(feats, config.capacity)
        schema.register([ex.features for ex in parts["train"]])
        schemas[tuple(feats)] = schema.freeze()

    if config.pretrain_corpus == "base" and synth is not None and synth.base_corpus is not None:
        pretrain_words = [ex.words for ex in synth.base_corpus]
    else:
        if config.pretrain_corpus == "base":
            log.warning("no base corpus available; pretraining on the training split")
        pretrain_words = [ex.words for ex in parts["train"]]

    tokenizer = _build_tokenizer(config, parts["train"], pretrain_words, synth)
    if "conditional-finetune" in config.strategies:
        for schema in schemas.values():
            tokenizer.add_tokens(conditional_tokens(schema))

    # Room for <bos>, <eos> and the longest context rendering (prefix slots or conditional tokens).
    widest = max(max(s.n_slots, 2 * len(s.features)) for s in schemas.values())
    word_limit = config.lm.max_seq - 1 - widest
    if word_limit < 1:
        raise ConfigError(f"max_seq={config.lm.max_seq} leaves no room for words", {"widest_context": widest})
    longest = max((len(ex.words) for ex in corpus), default=0)
    if longest > word_limit:
        log.warning("sentences longer than %d words are truncated (longest has %d)", word_limit, longest)
    return SeedData(seed, corpus, parts, tokenizer, schemas, sets[0], pretrain_words, word_limit, synth)


# ------------------------------------------------------------
# Backbone and strategies
# ------------------------------------------------------------


def prepare_backbone(config: ExperimentConfig, data: SeedData, seed_dir: Optional[Path] = None) -> tuple[LmModel, Dict[str, Any]]:
    if config.backbone_checkpoint is not None:
        model = LmModel.from_checkpoint(config.backbone_checkpoint)
        if model.config.vocab_size != len(data.tokenizer):
            raise ConfigError(
                "backbone checkpoint vocabulary does not match the tokenizer",
                {"checkpoint": model.config.vocab_size, "tokenizer": len(data.tokenizer)},
            )
        return model.freeze(), {"loaded_from": str(config.backbone_checkpoint)}

    rng = RngStream(data.seed, "backbone")
    model = LmModel.init(config.lm.with_vocab(len(data.tokenizer)), rng.child("init"), get_settings().MIXEDPREFIX_NONLINEARITY)
    val = data.sequences([ex.words for ex in data.parts["val"]])
    result = pretrain_backbone(
        model,
        data.sequences(data.pretrain_words),
        val,
        config.pretrain_optimizer,
        config.pretrain_budget,
        rng.child("train"),
        seed_dir / "backbone.ckpt" if seed_dir is not None else None,
        config.eval_batch_size,
    )
    return result.model, result.summary()


def train_strategy(
    strategy: AdaptationStrategy,
    train: Sequence[EncodedExample],
    val: Sequence[EncodedExample],
    config: ExperimentConfig,
    seed: int,
    label: Optional[str] = None,
) -> TrainingResult:
    """Adapt `strategy` with AdamW under the config's budget, early-stopping on validation NLL."""
    rng = RngStream(seed, "adapt")
    opt = AdamW(strategy.trainable(), config.optimizer)

    def step(rows: list[int], n: int) -> Optional[float]:
        batch = strategy.collate([train[r] for r in rows])
        return train_step(strategy, batch, opt, rng.child(f"step{n}"), n).loss

    def val_nll() -> float:
        scores = score_examples(strategy, val, config.eval_batch_size, config.workers)
        return float(scores.nll.sum() / scores.tokens.sum())

    return fit(len(train), step, strategy.trainable(), config.budget, rng.child("order"), val_nll if val else None, label or strategy.kind)


def build_strategy(
    config: ExperimentConfig,
    data: SeedData,
    kind: str,
    backbone: LmModel,
    features: Optional[Sequence[str]] = None,
    hyper: Optional[MetHyperparams] = None,
    prefix_config: Optional[PrefixConfig] = None,
) -> AdaptationStrategy:
    schema = data.schemas[tuple(features)] if features is not None else data.schema
    return make_strategy(
        kind,
        backbone,
        schema,
        data.tokenizer,
        hyper or config.hyper,
        prefix_config or config.prefix,
        RngStream(data.seed, "adapt"),
    )


def evaluate_strategy(
    config: ExperimentConfig,
    data: SeedData,
    strategy: AdaptationStrategy,
    features: Optional[Sequence[str]] = None,
    variant: str = "",
) -> list[PartitionResult]:
    return [
        evaluate(
            strategy,
            data.examples(partition, features),
            data.labels(partition),
            partition,
            data.seed,
            config.eval_batch_size,
            config.workers,
            data.oracle,
            variant,
        )
        for partition in EVAL_PARTITIONS
    ]


# ------------------------------------------------------------
# Report
# ------------------------------------------------------------


def error_dict(exc: BaseException) -> Dict[str, Any]:
    if isinstance(exc, MixedPrefixError):
        return exc.to_dict()
    return {"ok": False, "error": type(exc).__name__, "message": str(exc), "payload": {}}


def _key(result: PartitionResult) -> str:
    return f"{result.strategy}[{result.variant}]" if result.variant else result.strategy


def seed_summary(results: Sequence[PartitionResult], reference: str = REFERENCE_STRATEGY) -> Dict[str, Any]:
    """
    Per partition: median and mean log perplexity over seeds for every
    strategy, and for every other strategy the number of seeds in which
    `reference` scored strictly lower.
    """
    out: Dict[str, Any] = {}
    for partition in sorted({r.partition for r in results}):
        by_key: Dict[str, Dict[int, float]] = {}
        for r in results:
            if r.partition == partition and r.log_ppl is not None:
                by_key.setdefault(_key(r), {})[r.seed] = r.log_ppl
        medians = {k: statistics.median(v.values()) for k, v in sorted(by_key.items())}
        means = {k: statistics.fmean(v.values()) for k, v in sorted(by_key.items())}
        wins: Dict[str, Dict[str, int]] = {}
        ref = by_key.get(reference)
        if ref:
            for k, v in sorted(by_key.items()):
                if k == reference:
                    continue
                paired = [s for s in v if s in ref]
                wins[k] = {"wins": sum(ref[s] < v[s] for s in paired), "seeds": len(paired)}
        out[partition] = {"median": medians, "mean": means, f"{reference}_wins": wins}
    return out


@dataclass
class EvalReport:
    config_hash: str
    config: Dict[str, Any]
    results: list[PartitionResult] = field(default_factory=list)
    training: list[Dict[str, Any]] = field(default_factory=list)
    pretraining: Dict[str, Any] = field(default_factory=dict)
    oracle: Dict[str, list[Dict[str, Any]]] = field(default_factory=dict)
    parameters: Dict[str, int] = field(default_factory=dict)
    status: str = "ok"
    failure: Optional[Dict[str, Any]] = None

    def get(self, strategy: str, partition: str, seed: int, variant: str = "") -> PartitionResult:
        for r in self.results:
            if (r.strategy, r.partition, r.seed, r.variant) == (strategy, partition, seed, variant):
                return r
        raise KeyError((strategy, partition, seed, variant))

    def summary(self) -> Dict[str, Any]:
        return seed_summary(self.results)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "failure": self.failure,
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": sorted({r.seed for r in self.results}),
            "results": [r.to_dict() for r in self.results],
            "summary": self.summary(),
            "training": self.training,
            "pretraining": self.pretraining,
            "parameters": self.parameters,
            "oracle": self.oracle,
        }

    def table_rows(self) -> list[Dict[str, Any]]:
        return [row for r in self.results for row in r.table_rows()]

    def write(self, run_dir: Path) -> None:
        write_json(run_dir / "metrics.json", self.to_dict())
        write_csv(run_dir / "results.csv", RESULT_COLUMNS, self.table_rows())


class Timings:
    def __init__(self) -> None:
        self.started = datetime.now(timezone.utc)
        self.stages: Dict[str, float] = {}
        self._t0 = time.perf_counter()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = time.perf_counter() - t0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "started": self.started.isoformat(timespec="seconds"),
            "total_seconds": time.perf_counter() - self._t0,
            "stages": self.stages,
        }


class Persistable(Protocol):
    status: str
    failure: Optional[Dict[str, Any]]

    def write(self, run_dir: Path) -> None: ...


@contextmanager
def failure_marker(report: Persistable, run_dir: Path, timings: Timings, stage: list[str]) -> Iterator[None]:
    """Persist partial results and FAILED.json if the body raises; timings are written either way."""
    try:
        yield
    except Exception as exc:
        report.status = "failed"
        report.failure = {"stage": stage[0], **error_dict(exc)}
        log.error("run failed at stage %s: %s", stage[0], exc)
        report.write(run_dir)
        write_json(run_dir / "FAILED.json", report.failure)
        raise
    finally:
        write_json(run_dir / "timings.json", timings.to_dict())


def _oracle_rows(data: SeedData) -> list[Dict[str, Any]]:
    return [row.to_dict() for row in data.synth.oracle] if data.synth is not None else []


def save_seed_artifacts(data: SeedData, seed_dir: Path) -> None:
    seed_dir.mkdir(parents=True, exist_ok=True)
    data.schema.save(seed_dir / "schema.json")
    data.tokenizer.save(seed_dir / "tokenizer.json")
    rows = _oracle_rows(data)
    if rows:
        write_csv(seed_dir / "oracle.csv", list(rows[0]), rows)


def run_experiment(config: ExperimentConfig) -> EvalReport:
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    report = EvalReport(config.config_hash(), config.result_dict())
    timings = Timings()
    stage = ["setup"]
    log.info("experiment %s -> %s (seeds=%s, strategies=%s)", config.name, run_dir, config.seeds, config.strategies)

    with failure_marker(report, run_dir, timings, stage):
        for seed in config.seeds:
            seed_dir = run_dir / f"seed{seed}"
            stage[0] = f"seed{seed}/data"
            with timings.stage(stage[0]):
                data = prepare_seed(config, seed)
                save_seed_artifacts(data, seed_dir)
            report.oracle[str(seed)] = _oracle_rows(data)

            stage[0] = f"seed{seed}/backbone"
            with timings.stage(stage[0]):
                backbone, pre = prepare_backbone(config, data, seed_dir)
            report.pretraining[str(seed)] = pre

            train = data.examples("train")
            val = data.examples("val")
            for kind in config.strategies:
                stage[0] = f"seed{seed}/{kind}"
                with timings.stage(stage[0]):
                    strategy = build_strategy(config, data, kind, backbone)
                    training = train_strategy(strategy, train, val, config, seed)
                    strategy.save(seed_dir / f"{kind}.ckpt", {"seed": seed, "config_hash": report.config_hash})
                    report.training.append({"seed": seed, "strategy": kind, **training.to_dict()})
                    report.parameters[kind] = strategy.parameter_count()
                    report.results.extend(evaluate_strategy(config, data, strategy))
        stage[0] = "report"
        report.write(run_dir)
    log.info("experiment %s finished: %s", config.name, report.summary())
    return report


def load_run_strategy(run_dir: Path, seed: int, kind: str) -> tuple[AdaptationStrategy, SeedData, ExperimentConfig]:
    """Rebuild a trained strategy and its seed data from a finished run directory."""
    run_dir = Path(run_dir)
    config = ExperimentConfig.load(run_dir / "config.json")
    seed_dir = run_dir / f"seed{seed}"
    ckpt = seed_dir / f"{kind}.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no trained '{kind}' for seed {seed} in {run_dir}", {"checkpoint": str(ckpt)})
    data = prepare_seed(config, seed)
    data.tokenizer = Tokenizer.load(seed_dir / "tokenizer.json")
    data.schemas[tuple(data.features)] = FeatureSchema.load(seed_dir / "schema.json")
    backbone_path = config.backbone_checkpoint or seed_dir / "backbone.ckpt"
    backbone = LmModel.from_checkpoint(backbone_path)
    strategy = build_strategy(config, data, kind, backbone)
    strategy.load_state(ckpt)
    return strategy, data, config
