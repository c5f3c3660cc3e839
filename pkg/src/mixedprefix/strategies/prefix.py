from __future__ import annotations

from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np

from mixedprefix.autodiff.graph import Graph, Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.tokenizer import Tokenizer
from mixedprefix.errors import ContractViolation
from mixedprefix.lm.batching import Batch
from mixedprefix.lm.model import LmModel, lm_forward, sequence_nll
from mixedprefix.prefix.bank import PrefixParams, build_prefix, met_objective, prefix_activations
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import ContextKey, FeatureSchema, encode_context
from mixedprefix.strategies.base import AdaptationStrategy, GenerationInputs, LossAndGrads


class PrefixStrategy(AdaptationStrategy):
    """
    Prefix-tuning over a frozen backbone.

    `met` trains with star dropout and the pull toward h*. `prefix-no-pool`
    is the same machinery with ε = β = 0, so star rows are never trained and
    unseen values fall to an untouched random prefix. `prefix-complete-pool`
    resolves every context to the all-star key.
    """

    def __init__(
        self,
        kind: str,
        backbone: LmModel,
        schema: FeatureSchema,
        tokenizer: Tokenizer,
        hyper: MetHyperparams,
        prefix_config: PrefixConfig,
        rng: RngStream,
    ):
        super().__init__(backbone, schema, tokenizer)
        if not backbone.frozen:
            raise ContractViolation(f"{kind} needs a frozen backbone")
        self.kind = kind
        if kind == "met":
            self.hyper = hyper
        else:
            self.hyper = hyper.model_copy(update={"epsilon": 0.0, "beta": 0.0})
        self.prefix_config = prefix_config
        self.params = PrefixParams.init(schema, backbone.config, prefix_config, rng.child("prefix"), backbone.nonlinearity)

    def trainable(self) -> Dict[str, Tensor]:
        return self.params.tensors

    def metadata(self) -> Dict[str, Any]:
        return {
            "strategy": self.kind,
            "hyper": self.hyper.model_dump(),
            "prefix_config": self.prefix_config.model_dump(),
        }

    def keys_for(self, contexts: Sequence[Mapping[str, Optional[str]]], mode: str = "eval", rng: Optional[RngStream] = None) -> list[ContextKey]:
        if self.kind == "prefix-complete-pool":
            return [self.schema.all_star_key() for _ in contexts]
        return [encode_context(self.schema, ctx, mode, self.hyper, rng) for ctx in contexts]

    def loss_and_grads(self, batch: Batch, rng: RngStream) -> LossAndGrads:
        keys = self.keys_for(batch.contexts, "train", rng.child("star-dropout"))
        g = Graph()
        obj = met_objective(g, self.backbone, self.params, self.hyper, batch, keys, self.schema.star_ids(), rng.child("dropout"))
        grads = g.backward(obj.loss, wrt=self.params.tensors)
        parts = {"nll": float(obj.nll.value)}
        if obj.regularizer is not None:
            parts["regularizer"] = float(obj.regularizer.value)
        return LossAndGrads(float(obj.loss.value), {k: grads[k] for k in self.params.tensors}, parts)

    def score(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        g = Graph(grad_enabled=False)
        pf = build_prefix(g, self.params, self.keys_for(batch.contexts))
        out = lm_forward(self.backbone, g, batch.inputs, pf.activations)
        return sequence_nll(out.logits.value, batch.targets)

    def generation_inputs(self, context: Mapping[str, Optional[str]], prompt: Sequence[int]) -> GenerationInputs:
        key = self.keys_for([context])[0]
        return GenerationInputs(self.backbone, prefix_activations(self.params, key), list(prompt))
