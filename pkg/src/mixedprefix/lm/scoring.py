from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from mixedprefix.autodiff.graph import Graph
from mixedprefix.errors import EmptyTargetsError
from mixedprefix.lm.batching import Batch, collate
from mixedprefix.lm.model import LmModel, PrefixActivations, lm_forward, sequence_nll

PrefixBuilder = Callable[[Graph, Batch], Optional[PrefixActivations]]


def score_batch(
    model: LmModel,
    batch: Batch,
    prefix_builder: Optional[PrefixBuilder] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row summed NLL (nats) and target counts, no gradient tape."""
    g = Graph(grad_enabled=False)
    prefix = prefix_builder(g, batch) if prefix_builder is not None else None
    out = lm_forward(model, g, batch.inputs, prefix)
    return sequence_nll(out.logits.value, batch.targets)


def mean_nll(
    model: LmModel,
    sequences: Sequence[Sequence[int]],
    batch_size: int = 64,
    prefix_builder: Optional[PrefixBuilder] = None,
) -> float:
    """Token-weighted mean NLL over full sequences."""
    total, count = 0.0, 0
    for start in range(0, len(sequences), batch_size):
        batch = collate(sequences[start : start + batch_size])
        sums, counts = score_batch(model, batch, prefix_builder)
        total += float(sums.sum())
        count += int(counts.sum())
    if count == 0:
        raise EmptyTargetsError("no targets to score")
    return total / count
