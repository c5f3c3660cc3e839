"""
mixedprefix.prefix.schema

Feature schema and context keys.

Slot 0 is the corpus level; slots 1..k follow the declared feature order,
coarsest first. Every slot owns a contiguous block of `capacity + 1` prefix
token ids: the block's first id is the slot's star token, the remaining ids
are its values in registration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Sequence

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.config import REFERENCE_VALUES_PER_FEATURE
from mixedprefix.errors import ConfigError, UnknownFeatureValueError, VocabularyOverflowError
from mixedprefix.prefix.hyper import MetHyperparams
from mixedprefix.utils.files import read_json, write_json
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.prefix")

CORPUS_FEATURE = "corpus"
STAR = "*"
DEFAULT_CAPACITY = REFERENCE_VALUES_PER_FEATURE

Mode = Literal["train", "eval"]


class FeatureSchema:
    def __init__(
        self,
        features: Sequence[str],
        capacity: int = DEFAULT_CAPACITY,
        corpus_value: str = CORPUS_FEATURE,
    ):
        features = list(features)
        if CORPUS_FEATURE in features:
            raise ConfigError(f"'{CORPUS_FEATURE}' is reserved for the corpus-level slot")
        if len(set(features)) != len(features):
            raise ConfigError(f"duplicate feature names in {features}")
        if capacity < 1:
            raise ConfigError("feature capacity must be at least 1")
        self.slots: list[str] = [CORPUS_FEATURE, *features]
        self.capacity = capacity
        self.corpus_value = corpus_value
        self.frozen = False
        self._values: Dict[str, list[str]] = {f: [] for f in self.slots}
        self._index: Dict[str, Dict[str, int]] = {f: {} for f in self.slots}
        self.add_value(CORPUS_FEATURE, corpus_value)

    def __repr__(self) -> str:
        sizes = {f: len(v) for f, v in self._values.items()}
        return f"FeatureSchema(slots={self.slots}, values={sizes}, frozen={self.frozen})"

    @property
    def features(self) -> list[str]:
        """Declared features, without the corpus slot."""
        return self.slots[1:]

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def n_ids(self) -> int:
        return self.n_slots * (self.capacity + 1)

    def slot_of(self, feature: str) -> int:
        try:
            return self.slots.index(feature)
        except ValueError:
            raise UnknownFeatureValueError(f"feature '{feature}' is not in the schema", {"feature": feature}) from None

    def star_id(self, slot: int) -> int:
        return slot * (self.capacity + 1)

    def star_ids(self) -> list[int]:
        return [self.star_id(i) for i in range(self.n_slots)]

    def values(self, feature: str) -> list[str]:
        return list(self._values[feature])

    def add_value(self, feature: str, value: str) -> int:
        slot = self.slot_of(feature)
        known = self._index[feature].get(value)
        if known is not None:
            return self.star_id(slot) + 1 + known
        if len(self._values[feature]) >= self.capacity:
            raise VocabularyOverflowError(feature, self.capacity, value)
        self._index[feature][value] = len(self._values[feature])
        self._values[feature].append(value)
        return self.star_id(slot) + len(self._values[feature])

    def register(self, contexts: Sequence[Mapping[str, Optional[str]]]) -> "FeatureSchema":
        for ctx in contexts:
            for feature in self.features:
                value = ctx.get(feature)
                if value is not None:
                    self.add_value(feature, value)
        return self

    def freeze(self) -> "FeatureSchema":
        self.frozen = True
        return self

    def value_id(self, feature: str, value: Optional[str]) -> Optional[int]:
        if value is None:
            return None
        slot = self.slot_of(feature)
        pos = self._index[feature].get(value)
        return None if pos is None else self.star_id(slot) + 1 + pos

    def require_value(self, feature: str, value: str) -> int:
        vid = self.value_id(feature, value)
        if vid is None:
            raise UnknownFeatureValueError(
                f"value '{value}' is not known for feature '{feature}'", {"feature": feature, "value": value}
            )
        return vid

    def describe_id(self, token_id: int) -> tuple[str, str]:
        slot, offset = divmod(int(token_id), self.capacity + 1)
        feature = self.slots[slot]
        return feature, STAR if offset == 0 else self._values[feature][offset - 1]

    def is_known(self, feature: str, value: Optional[str]) -> bool:
        return self.value_id(feature, value) is not None

    def all_star_key(self) -> "ContextKey":
        n = self.n_slots
        return ContextKey(tuple(self.star_ids()), (False,) * n, (False,) * n)

    # --- serialization -------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {
            "features": self.features,
            "slots": self.slots,
            "capacity": self.capacity,
            "corpus_value": self.corpus_value,
            "frozen": self.frozen,
            "values": {f: list(v) for f, v in self._values.items()},
            "star_ids": {f: self.star_id(i) for i, f in enumerate(self.slots)},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeatureSchema":
        schema = cls(data["features"], data.get("capacity", DEFAULT_CAPACITY), data.get("corpus_value", CORPUS_FEATURE))
        for feature, values in data.get("values", {}).items():
            for v in values:
                schema.add_value(feature, v)
        schema.frozen = bool(data.get("frozen", False))
        return schema

    def save(self, path: Path) -> Path:
        return write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "FeatureSchema":
        return cls.from_dict(read_json(Path(path)))


@dataclass(frozen=True)
class ContextKey:
    """Resolved prefix token id per slot, with per-slot seen and dropped flags."""

    ids: tuple[int, ...]
    seen: tuple[bool, ...]
    dropped: tuple[bool, ...]

    def is_all_star(self, schema: FeatureSchema) -> bool:
        return list(self.ids) == schema.star_ids()


def encode_context(
    schema: FeatureSchema,
    raw: Mapping[str, Optional[str]],
    mode: Mode = "eval",
    hyper: Optional[MetHyperparams] = None,
    rng: Optional[RngStream] = None,
) -> ContextKey:
    """
    Resolve raw feature values to prefix token ids.

    Unknown values map to the slot's star id in both modes. While the schema
    is not frozen, train-mode encoding registers new values (and may
    overflow). In train mode each slot is replaced by its star id with
    probability `hyper.epsilon`: independently per slot, or all slots
    together when `hyper.dropout_mode` is "all-or-none".
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    epsilon = hyper.epsilon if hyper is not None else 0.0
    dropout_mode = hyper.dropout_mode if hyper is not None else "per-slot"
    n = schema.n_slots
    ids: list[int] = []
    seen: list[bool] = []
    for slot, feature in enumerate(schema.slots):
        value = schema.corpus_value if slot == 0 else raw.get(feature)
        vid = schema.value_id(feature, value)
        if vid is None and value is not None and mode == "train" and not schema.frozen:
            vid = schema.add_value(feature, value)
        seen.append(vid is not None)
        ids.append(vid if vid is not None else schema.star_id(slot))

    dropped = [False] * n
    if mode == "train" and epsilon > 0.0:
        if rng is None:
            raise ValueError("train-mode encoding with epsilon > 0 needs an RngStream")
        if dropout_mode == "all-or-none":
            dropped = [bool(rng.bernoulli(epsilon))] * n
        elif dropout_mode == "per-slot":
            dropped = [bool(d) for d in rng.bernoulli(epsilon, n)]
        else:
            raise ConfigError(f"unknown dropout mode '{dropout_mode}'")
        ids = [schema.star_id(i) if d else t for i, (t, d) in enumerate(zip(ids, dropped))]
    return ContextKey(tuple(ids), tuple(seen), tuple(dropped))
