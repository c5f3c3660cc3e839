from __future__ import annotations

from typing import Mapping, Optional, Sequence

from mixedprefix.corpus.tokenizer import Tokenizer
from mixedprefix.errors import ConfigError
from mixedprefix.lm.model import LmModel
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.strategies.base import EncodedExample, GenerationInputs
from mixedprefix.strategies.finetune import FinetuneCompletePool

UNKNOWN_VALUE = "?"


def marker_token(feature: str) -> str:
    return f"<{feature}>"


def value_token(feature: str, value: Optional[str]) -> str:
    return f"<{feature}={UNKNOWN_VALUE if value is None else value}>"


def conditional_tokens(schema: FeatureSchema) -> list[str]:
    """Every token the conditional rendering can emit: a marker, each value and the unknown value per feature."""
    out: list[str] = []
    for feature in schema.features:
        out.append(marker_token(feature))
        out.extend(value_token(feature, v) for v in schema.values(feature))
        out.append(value_token(feature, None))
    return out


class ConditionalFinetune(FinetuneCompletePool):
    """
    Full fine-tuning with the context written into the input: after <bos>,
    each declared feature contributes `<feature>` and `<feature=value>`.
    Values outside the schema render as `<feature=?>`. Predictions of the
    rendered tokens are excluded from the loss, so scores count the same
    targets as every other strategy.
    """

    kind = "conditional-finetune"

    def __init__(self, backbone: LmModel, schema: FeatureSchema, tokenizer: Tokenizer):
        missing = [t for t in conditional_tokens(schema) if t not in tokenizer]
        if missing:
            raise ConfigError("tokenizer lacks the context tokens of conditional-finetune", {"missing": missing[:10]})
        super().__init__(backbone, schema, tokenizer)

    def context_ids(self, context: Mapping[str, Optional[str]]) -> list[int]:
        ids: list[int] = []
        for feature in self.schema.features:
            value = context.get(feature)
            if value is not None and not self.schema.is_known(feature, value):
                value = None
            ids.append(self.tokenizer.stoi[marker_token(feature)])
            ids.append(self.tokenizer.stoi[value_token(feature, value)])
        return ids

    def prompt_offset(self, context: Mapping[str, Optional[str]]) -> int:
        return 2 * len(self.schema.features)

    def render(self, example: EncodedExample) -> tuple[list[int], int]:
        ctx = self.context_ids(example.context)
        ids = list(example.ids)
        return [ids[0], *ctx, *ids[1:]], len(ctx)

    def generation_inputs(self, context: Mapping[str, Optional[str]], prompt: Sequence[int]) -> GenerationInputs:
        prompt = list(prompt)
        return GenerationInputs(self.model, None, [prompt[0], *self.context_ids(context), *prompt[1:]])
