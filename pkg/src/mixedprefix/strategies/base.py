"""
mixedprefix.strategies.base

Common surface of every adaptation strategy: which tensors train, how a
batch of (sentence, context) examples becomes model inputs, how a batch is
scored, and how a context is turned into something generation can run.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Sequence

import numpy as np

from mixedprefix.autodiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mixedprefix.autodiff.graph import Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.tokenizer import Tokenizer
from mixedprefix.errors import CheckpointError
from mixedprefix.lm.batching import Batch, collate
from mixedprefix.lm.model import LmModel, PrefixActivations
from mixedprefix.prefix.schema import FeatureSchema

StrategyKind = Literal[
    "met",
    "prefix-no-pool",
    "prefix-complete-pool",
    "finetune-no-pool",
    "finetune-complete-pool",
    "conditional-finetune",
]
KINDS: tuple[str, ...] = (
    "met",
    "prefix-no-pool",
    "prefix-complete-pool",
    "finetune-no-pool",
    "finetune-complete-pool",
    "conditional-finetune",
)
PREFIX_KINDS = ("met", "prefix-no-pool", "prefix-complete-pool")


@dataclass(frozen=True)
class EncodedExample:
    """A sentence as `[BOS, w1, ..., wn, EOS]` with its raw context."""

    ids: tuple[int, ...]
    context: Mapping[str, Optional[str]]


@dataclass
class LossAndGrads:
    loss: float
    grads: Dict[str, np.ndarray]
    parts: Dict[str, float]


@dataclass
class GenerationInputs:
    model: LmModel
    prefix: Optional[PrefixActivations]
    prompt: list[int]


class AdaptationStrategy(ABC):
    kind: str = ""

    def __init__(self, backbone: LmModel, schema: FeatureSchema, tokenizer: Tokenizer):
        self.backbone = backbone
        self.schema = schema
        self.tokenizer = tokenizer

    def __repr__(self) -> str:
        return f"{type(self).__name__}(kind={self.kind}, trainable={self.parameter_count()})"

    # --- parameters ---------------------------------------------------------------

    @abstractmethod
    def trainable(self) -> Dict[str, Tensor]:
        """Named tensors the optimizer updates."""

    def parameter_count(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def metadata(self) -> Dict[str, Any]:
        return {"strategy": self.kind}

    def save(self, path: Path, metadata: Optional[Mapping[str, Any]] = None) -> Path:
        meta = {**self.metadata(), "schema": self.schema.to_dict(), **dict(metadata or {})}
        return save_checkpoint(
            Path(path),
            {f"strategy/{k}": t for k, t in self.trainable().items()},
            meta,
            nonlinearity=self.backbone.nonlinearity,
        )

    def load_state(self, ckpt: Checkpoint | Path) -> None:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.metadata.get("strategy") != self.kind:
            raise CheckpointError(
                f"checkpoint holds a '{ckpt.metadata.get('strategy')}' strategy, expected '{self.kind}'"
            )
        state = ckpt.namespace("strategy")
        params = self.trainable()
        missing = set(params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks strategy tensors: {sorted(missing)[:5]}")
        for name, t in params.items():
            t.data[...] = state[name]

    # --- inputs -------------------------------------------------------------------

    def render(self, example: EncodedExample) -> tuple[list[int], int]:
        """Token sequence fed to the model and the number of leading targets excluded from the loss."""
        return list(example.ids), 0

    def collate(self, examples: Sequence[EncodedExample]) -> Batch:
        rendered = [self.render(ex) for ex in examples]
        return collate(
            [r[0] for r in rendered],
            [ex.context for ex in examples],
            pad_id=self.tokenizer.pad_id,
            loss_from=[r[1] for r in rendered],
        )

    # --- training / scoring ---------------------------------------------------------

    @abstractmethod
    def loss_and_grads(self, batch: Batch, rng: RngStream) -> LossAndGrads:
        """Training-mode loss and gradients for the trainable tensors. Raises EmptyTargetsError."""

    @abstractmethod
    def score(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode per-row summed NLL and target counts."""

    @abstractmethod
    def generation_inputs(self, context: Mapping[str, Optional[str]], prompt: Sequence[int]) -> GenerationInputs:
        """Model, prefix and (possibly rendered) prompt for generating under a context."""

    def prompt_offset(self, context: Mapping[str, Optional[str]]) -> int:
        """Tokens the strategy prepends to a prompt; stripped from generations."""
        return 0
