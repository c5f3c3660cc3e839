from __future__ import annotations

from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np

from mixedprefix.autodiff.graph import Graph, Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.tokenizer import Tokenizer
from mixedprefix.errors import EmptyTargetsError
from mixedprefix.lm.batching import Batch
from mixedprefix.lm.model import LmModel, lm_forward, nll_per_token, sequence_nll
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.strategies.base import AdaptationStrategy, GenerationInputs, LossAndGrads
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.strategies.finetune")


def _model_loss(model: LmModel, batch: Batch, rng: RngStream) -> tuple[float, Dict[str, np.ndarray], int]:
    g = Graph()
    out = lm_forward(model, g, batch.inputs, None, rng)
    loss = nll_per_token(out.logits, batch.targets)
    grads = g.backward(loss, wrt=model.params)
    return float(loss.value), grads, batch.n_targets


def _score(model: LmModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    g = Graph(grad_enabled=False)
    return sequence_nll(lm_forward(model, g, batch.inputs).logits.value, batch.targets)


class FinetuneCompletePool(AdaptationStrategy):
    """One copy of the backbone, every tensor trainable, contexts ignored."""

    kind = "finetune-complete-pool"

    def __init__(self, backbone: LmModel, schema: FeatureSchema, tokenizer: Tokenizer):
        super().__init__(backbone, schema, tokenizer)
        self.model = backbone.clone().unfreeze()

    def trainable(self) -> Dict[str, Tensor]:
        return self.model.params

    def loss_and_grads(self, batch: Batch, rng: RngStream) -> LossAndGrads:
        loss, grads, _ = _model_loss(self.model, batch, rng.child("dropout"))
        return LossAndGrads(loss, grads, {"nll": loss})

    def score(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        return _score(self.model, batch)

    def generation_inputs(self, context: Mapping[str, Optional[str]], prompt: Sequence[int]) -> GenerationInputs:
        return GenerationInputs(self.model, None, list(prompt))


class FinetuneNoPool(AdaptationStrategy):
    """
    One full backbone copy per value of the primary feature. A copy only
    sees (and is only updated on) rows of its own value; rows with an
    unknown primary value are scored by the untouched backbone.
    """

    kind = "finetune-no-pool"

    def __init__(self, backbone: LmModel, schema: FeatureSchema, tokenizer: Tokenizer):
        super().__init__(backbone, schema, tokenizer)
        if not schema.features:
            raise ValueError("finetune-no-pool needs at least one feature")
        self.group_feature = schema.features[0]
        self.models: Dict[str, LmModel] = {
            value: backbone.clone().unfreeze() for value in schema.values(self.group_feature)
        }

    def trainable(self) -> Dict[str, Tensor]:
        return {f"{value}/{name}": t for value, m in self.models.items() for name, t in m.params.items()}

    def metadata(self) -> Dict[str, Any]:
        return {"strategy": self.kind, "group_feature": self.group_feature, "groups": sorted(self.models)}

    def model_for(self, context: Mapping[str, Optional[str]]) -> LmModel:
        return self.models.get(context.get(self.group_feature) or "", self.backbone)

    def _groups(self, batch: Batch) -> Dict[Optional[str], list[int]]:
        groups: Dict[Optional[str], list[int]] = {}
        for row, ctx in enumerate(batch.contexts):
            value = ctx.get(self.group_feature)
            groups.setdefault(value if value in self.models else None, []).append(row)
        return groups

    def loss_and_grads(self, batch: Batch, rng: RngStream) -> LossAndGrads:
        total, count = 0.0, 0
        grads: Dict[str, np.ndarray] = {}
        for value, rows in sorted(self._groups(batch).items(), key=lambda kv: str(kv[0])):
            if value is None:
                log.debug("skipping %d rows without a trained group", len(rows))
                continue
            sub = batch.subset(rows)
            if sub.n_targets == 0:
                continue
            loss, g, n = _model_loss(self.models[value], sub, rng.child(f"dropout/{value}"))
            total += loss * n
            count += n
            grads.update({f"{value}/{name}": arr for name, arr in g.items()})
        if count == 0:
            raise EmptyTargetsError("batch holds no targets for any trained group")
        mean = total / count
        return LossAndGrads(mean, grads, {"nll": mean})

    def score(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        sums = np.zeros(len(batch))
        counts = np.zeros(len(batch), dtype=np.int64)
        for value, rows in self._groups(batch).items():
            model = self.models[value] if value is not None else self.backbone
            s, c = _score(model, batch.subset(rows))
            sums[rows] = s
            counts[rows] = c
        return sums, counts

    def generation_inputs(self, context: Mapping[str, Optional[str]], prompt: Sequence[int]) -> GenerationInputs:
        return GenerationInputs(self.model_for(context), None, list(prompt))
