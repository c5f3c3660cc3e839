from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from mixedprefix.autodiff.graph import IGNORE_TARGET
from mixedprefix.autodiff.rng import RngStream


@dataclass
class Batch:
    """
    Next-token batch. `inputs` are right-padded with `pad_id`; `targets`
    are the inputs shifted by one with IGNORE_TARGET on padding (and on any
    position a strategy masks out, such as rendered context tokens).
    """

    inputs: np.ndarray
    targets: np.ndarray
    contexts: list[Mapping[str, str]] = field(default_factory=list)
    index: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_targets(self) -> int:
        return int((self.targets != IGNORE_TARGET).sum())

    def subset(self, rows: Sequence[int]) -> "Batch":
        rows = list(rows)
        return Batch(
            self.inputs[rows],
            self.targets[rows],
            [self.contexts[r] for r in rows] if self.contexts else [],
            [self.index[r] for r in rows] if self.index else [],
        )


def collate(
    sequences: Sequence[Sequence[int]],
    contexts: Optional[Sequence[Mapping[str, str]]] = None,
    index: Optional[Sequence[int]] = None,
    pad_id: int = 0,
    loss_from: Optional[Sequence[int]] = None,
) -> Batch:
    """
    Build a batch from full sequences `[BOS, w1, ..., wn, EOS]`.

    `loss_from[i]` masks targets before that input position of row i.
    """
    if not sequences:
        raise ValueError("collate needs at least one sequence")
    width = max(len(s) for s in sequences) - 1
    if width < 1:
        raise ValueError("sequences must hold at least two tokens")
    B = len(sequences)
    inputs = np.full((B, width), pad_id, dtype=np.int64)
    targets = np.full((B, width), IGNORE_TARGET, dtype=np.int64)
    for i, seq in enumerate(sequences):
        n = len(seq) - 1
        inputs[i, :n] = seq[:-1]
        targets[i, :n] = seq[1:]
        if loss_from is not None and loss_from[i] > 0:
            targets[i, : loss_from[i]] = IGNORE_TARGET
    return Batch(
        inputs,
        targets,
        list(contexts) if contexts is not None else [],
        list(index) if index is not None else list(range(B)),
    )


def iter_minibatches(n: int, batch_size: int, rng: Optional[RngStream] = None) -> Iterator[list[int]]:
    """Row indices per minibatch; shuffled when a stream is given, in order otherwise."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]
