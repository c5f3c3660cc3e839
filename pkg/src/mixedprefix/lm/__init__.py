from mixedprefix.lm.batching import Batch, collate, iter_minibatches
from mixedprefix.lm.generate import generate
from mixedprefix.lm.model import (
    LmConfig,
    LmModel,
    LmOutput,
    PrefixActivations,
    attention_mask,
    lm_forward,
    nll_per_token,
    sequence_nll,
)
from mixedprefix.lm.optim import AdamW, AdamWConfig
from mixedprefix.lm.pretrain import PretrainResult, pretrain_backbone
from mixedprefix.lm.scoring import mean_nll, score_batch
from mixedprefix.lm.training import TrainingBudget, TrainingResult, fit

__all__ = [
    "AdamW",
    "AdamWConfig",
    "Batch",
    "LmConfig",
    "LmModel",
    "LmOutput",
    "PrefixActivations",
    "PretrainResult",
    "TrainingBudget",
    "TrainingResult",
    "attention_mask",
    "collate",
    "fit",
    "generate",
    "iter_minibatches",
    "lm_forward",
    "mean_nll",
    "nll_per_token",
    "pretrain_backbone",
    "score_batch",
    "sequence_nll",
]
