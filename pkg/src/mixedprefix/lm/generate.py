from __future__ import annotations

from typing import Literal, Optional, Sequence

import numpy as np
from scipy.special import softmax

from mixedprefix.autodiff.graph import Graph
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import ShapeError
from mixedprefix.lm.model import LmModel, PrefixActivations, lm_forward

Sampler = Literal["greedy", "temperature"]


def generate(
    model: LmModel,
    prefix: Optional[PrefixActivations],
    prompt: Sequence[int],
    max_len: int,
    sampler: Sampler = "greedy",
    rng: Optional[RngStream] = None,
    temperature: float = 1.0,
    eos_id: Optional[int] = None,
) -> list[int]:
    """
    Extend `prompt` by up to `max_len` tokens. The full sequence is re-run at
    every step. Stops early after emitting `eos_id` or when the context
    window (tokens + prefix slots) is full.
    """
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ShapeError("generate", [(0,)], "prompt must hold at least one token")
    if sampler not in ("greedy", "temperature"):
        raise ValueError(f"unknown sampler '{sampler}'")
    if sampler == "temperature" and rng is None:
        raise ValueError("temperature sampling needs an RngStream")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    P = prefix.prefix_len if prefix is not None else 0

    for _ in range(max_len):
        if len(tokens) + P >= model.config.max_seq:
            break
        g = Graph(grad_enabled=False)
        bound = prefix.rebind(g) if prefix is not None else None
        logits = lm_forward(model, g, np.asarray([tokens]), bound).logits.value[0, -1]
        if sampler == "greedy":
            nxt = int(np.argmax(logits))
        else:
            nxt = rng.categorical(softmax(logits / temperature))
        tokens.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return tokens
