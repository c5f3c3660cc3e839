"""
mixedprefix.strategies

`make_strategy` builds one of the six adaptation strategies over a
pretrained backbone; `train_step` applies one optimizer update to its
trainable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.tokenizer import Tokenizer
from mixedprefix.errors import ConfigError, EmptyTargetsError
from mixedprefix.lm.batching import Batch
from mixedprefix.lm.model import LmModel
from mixedprefix.lm.optim import AdamW
from mixedprefix.lm.training import ensure_finite
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.strategies.base import (
    KINDS,
    PREFIX_KINDS,
    AdaptationStrategy,
    EncodedExample,
    GenerationInputs,
    LossAndGrads,
    StrategyKind,
)
from mixedprefix.strategies.conditional import ConditionalFinetune, conditional_tokens
from mixedprefix.strategies.finetune import FinetuneCompletePool, FinetuneNoPool
from mixedprefix.strategies.prefix import PrefixStrategy
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.strategies")


def make_strategy(
    kind: str,
    backbone: Union[LmModel, Path],
    schema: FeatureSchema,
    tokenizer: Tokenizer,
    hyper: Optional[MetHyperparams] = None,
    prefix_config: Optional[PrefixConfig] = None,
    rng: Optional[RngStream] = None,
) -> AdaptationStrategy:
    if kind not in KINDS:
        raise ConfigError(f"unknown strategy kind '{kind}'", {"kind": kind, "known": list(KINDS)})
    if not isinstance(backbone, LmModel):
        backbone = LmModel.from_checkpoint(Path(backbone))
    backbone.freeze()
    if kind in PREFIX_KINDS:
        return PrefixStrategy(
            kind,
            backbone,
            schema,
            tokenizer,
            hyper or MetHyperparams(),
            prefix_config or PrefixConfig(),
            rng or RngStream(0, kind),
        )
    if kind == "finetune-complete-pool":
        return FinetuneCompletePool(backbone, schema, tokenizer)
    if kind == "finetune-no-pool":
        return FinetuneNoPool(backbone, schema, tokenizer)
    return ConditionalFinetune(backbone, schema, tokenizer)


@dataclass
class StepOutcome:
    loss: Optional[float]
    parts: Dict[str, float] = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return self.loss is None


def train_step(strategy: AdaptationStrategy, batch: Batch, optimizer: AdamW, rng: RngStream, step: int = 0) -> StepOutcome:
    """
    One AdamW update of the strategy's trainable tensors. A batch without
    targets leaves every parameter untouched; a non-finite loss raises
    TrainingDiverged before anything is updated.
    """
    try:
        result: LossAndGrads = strategy.loss_and_grads(batch, rng)
    except EmptyTargetsError:
        log.debug("step %d: batch has no targets, skipped", step)
        return StepOutcome(None)
    ensure_finite(result.loss, step, strategy.trainable())
    optimizer.step(result.grads)
    return StepOutcome(result.loss, result.parts)


__all__ = [
    "KINDS",
    "PREFIX_KINDS",
    "AdaptationStrategy",
    "ConditionalFinetune",
    "EncodedExample",
    "FinetuneCompletePool",
    "FinetuneNoPool",
    "GenerationInputs",
    "PrefixStrategy",
    "StepOutcome",
    "StrategyKind",
    "conditional_tokens",
    "make_strategy",
    "train_step",
]
