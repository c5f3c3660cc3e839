from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence


@dataclass(frozen=True)
class Example:
    words: tuple[str, ...]
    features: Mapping[str, Optional[str]]
    unseen: bool = False

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def context_label(self, features: Sequence[str]) -> str:
        return context_label({f: self.features.get(f) for f in features})


def context_label(features: Mapping[str, Optional[str]]) -> str:
    """Stable text label for a context, e.g. `domain=d3|topic=t1`."""
    return "|".join(f"{k}={'*' if v is None else v}" for k, v in features.items())


@dataclass
class Corpus:
    examples: list[Example]
    features: list[str]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def values(self, feature: str) -> list[str]:
        """Distinct values of `feature` in first-appearance order."""
        seen: Dict[str, None] = {}
        for ex in self.examples:
            v = ex.features.get(feature)
            if v is not None:
                seen.setdefault(v)
        return list(seen)

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in indices], list(self.features), dict(self.provenance))

    def n_tokens(self) -> int:
        return sum(len(ex.words) for ex in self.examples)
