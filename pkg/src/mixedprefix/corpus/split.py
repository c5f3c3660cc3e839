from __future__ import annotations

import math
from typing import Dict, Sequence

from pydantic import BaseModel, ConfigDict, Field

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.types import Corpus
from mixedprefix.errors import SplitError
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.corpus.split")

PARTITIONS = ("train", "val", "test-seen", "test-unseen")


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train: float = Field(default=0.8, ge=0.0, le=1.0)
    val: float = Field(default=0.1, ge=0.0, le=1.0)
    test: float = Field(default=0.1, ge=0.0, le=1.0)
    held_out: Dict[str, list[str]] = Field(default_factory=dict)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts summing to n, each within 1 of n * ratio; ties go to the earlier partition."""
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(corpus: Corpus, spec: SplitSpec, seed: int) -> Dict[str, Corpus]:
    """
    Partition into train / val / test-seen / test-unseen. Examples with a
    held-out value (or marked unseen at ingestion) go to test-unseen only;
    the rest are shuffled under `seed` and cut by largest remainder within
    each context, so every context gets its own share. Each partition keeps
    corpus order.
    """
    ratios = [spec.train, spec.val, spec.test]
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"split ratios must sum to 1, got {sum(ratios)}", {"ratios": ratios})
    for feature, values in spec.held_out.items():
        if feature not in corpus.features:
            raise SplitError(f"held-out feature '{feature}' is not in the corpus", {"feature": feature})
        present = set(corpus.values(feature))
        for value in values:
            if value not in present:
                raise SplitError(
                    f"held-out value '{value}' of '{feature}' does not occur in the corpus",
                    {"feature": feature, "value": value},
                )

    def is_unseen(i: int) -> bool:
        ex = corpus.examples[i]
        return ex.unseen or any(ex.features.get(f) in vals for f, vals in spec.held_out.items())

    unseen = [i for i in range(len(corpus)) if is_unseen(i)]
    by_context: Dict[str, list[int]] = {}
    for i in range(len(corpus)):
        if not is_unseen(i):
            by_context.setdefault(corpus.examples[i].context_label(corpus.features), []).append(i)
    parts: Dict[str, list[int]] = {"train": [], "val": [], "test-seen": [], "test-unseen": unseen}
    for label, rows in by_context.items():
        shuffled = [rows[int(k)] for k in RngStream(seed, f"split/{label}").permutation(len(rows))]
        n_train, n_val, _ = largest_remainder(len(rows), ratios)
        parts["train"] += shuffled[:n_train]
        parts["val"] += shuffled[n_train : n_train + n_val]
        parts["test-seen"] += shuffled[n_train + n_val :]
    out = {name: corpus.subset(sorted(parts[name])) for name in PARTITIONS}
    log.info("split sizes: %s", {k: len(v) for k, v in out.items()})
    return out
