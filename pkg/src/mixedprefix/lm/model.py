"""
mixedprefix.lm.model

Decoder-only transformer over the autodiff graph, with per-layer key/value
prefix injection. Prefix slots are attendable by every token position but
carry no positional embedding and attend to nothing themselves.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp

from mixedprefix.autodiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mixedprefix.autodiff.graph import IGNORE_TARGET, Graph, Node, Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.config import get_settings
from mixedprefix.errors import CheckpointError, EmptyTargetsError, ShapeError
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.lm")

INIT_STD = 0.02
_MASKED = -1e9


class LmConfig(BaseModel):
    """Desk-scale stand-in for the GPT-2 backbone (see mixedprefix.config REFERENCE_* constants)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(default=0, ge=0)
    d_model: int = Field(default=64, gt=0)
    n_layers: int = Field(default=2, gt=0)
    n_heads: int = Field(default=2, gt=0)
    max_seq: int = Field(default=64, gt=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "LmConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_vocab(self, vocab_size: int) -> "LmConfig":
        return self.model_copy(update={"vocab_size": int(vocab_size)})


@dataclass
class PrefixActivations:
    """Per-layer injected key/value tensors, each [batch, prefix_len, d_model]."""

    keys: list[Node]
    values: list[Node]

    @property
    def prefix_len(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    @property
    def batch_size(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    def validate(self, config: LmConfig, batch_size: int) -> None:
        expected = (batch_size, self.prefix_len, config.d_model)
        if len(self.keys) != config.n_layers or len(self.values) != config.n_layers:
            raise ShapeError(
                "prefix",
                [(len(self.keys),), (config.n_layers,)],
                "one key and one value tensor per layer",
            )
        for node in (*self.keys, *self.values):
            if node.shape != expected:
                raise ShapeError("prefix", [node.shape, expected])

    def arrays(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [k.value.copy() for k in self.keys], [v.value.copy() for v in self.values]

    def rebind(self, graph: Graph) -> "PrefixActivations":
        """Same activations as constants on another graph."""
        return PrefixActivations(
            [graph.constant(k.value) for k in self.keys],
            [graph.constant(v.value) for v in self.values],
        )

    @classmethod
    def from_arrays(cls, graph: Graph, keys: Sequence[np.ndarray], values: Sequence[np.ndarray]) -> "PrefixActivations":
        return cls([graph.constant(k) for k in keys], [graph.constant(v) for v in values])


class LmModel:
    """Parameters φ of the backbone plus the frozen flag."""

    def __init__(self, config: LmConfig, params: Dict[str, Tensor], nonlinearity: Optional[str] = None):
        if config.vocab_size <= 0:
            raise ShapeError("lm", [(config.vocab_size,)], "vocab_size must be set")
        self.config = config
        self.params = params
        self.nonlinearity = nonlinearity or get_settings().MIXEDPREFIX_NONLINEARITY
        self._frozen = False

    @classmethod
    def init(cls, config: LmConfig, rng: RngStream, nonlinearity: Optional[str] = None) -> "LmModel":
        D, V = config.d_model, config.vocab_size
        shapes: Dict[str, tuple[int, ...]] = {"tok_emb": (V, D), "pos_emb": (config.max_seq, D)}
        for l in range(config.n_layers):
            p = f"h{l}"
            shapes.update(
                {
                    f"{p}.ln1.g": (D,), f"{p}.ln1.b": (D,),
                    f"{p}.attn.wq": (D, D), f"{p}.attn.bq": (D,),
                    f"{p}.attn.wk": (D, D), f"{p}.attn.bk": (D,),
                    f"{p}.attn.wv": (D, D), f"{p}.attn.bv": (D,),
                    f"{p}.attn.wo": (D, D), f"{p}.attn.bo": (D,),
                    f"{p}.ln2.g": (D,), f"{p}.ln2.b": (D,),
                    f"{p}.mlp.w1": (D, 4 * D), f"{p}.mlp.b1": (4 * D,),
                    f"{p}.mlp.w2": (4 * D, D), f"{p}.mlp.b2": (D,),
                }
            )
        shapes.update({"ln_f.g": (D,), "ln_f.b": (D,), "head.w": (D, V)})

        params: Dict[str, Tensor] = {}
        residual_std = INIT_STD / math.sqrt(2 * config.n_layers)
        for name in shapes:
            shape = shapes[name]
            if name.endswith(".g"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            elif name.endswith((".wo", ".w2")):
                data = rng.child(name).normal(0.0, residual_std, shape)
            else:
                data = rng.child(name).normal(0.0, INIT_STD, shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params, nonlinearity)

    # --- frozen contract -----------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "LmModel":
        self._frozen = True
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "LmModel":
        self._frozen = False
        for t in self.params.values():
            t.requires_grad = True
        return self

    def checksums(self) -> Dict[str, str]:
        return {name: t.checksum() for name, t in self.params.items()}

    # --- state ------------------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks backbone tensors: {sorted(missing)[:5]}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ShapeError("load_state_dict", [state[name].shape, t.shape], name)
            t.data[...] = state[name]

    def clone(self) -> "LmModel":
        twin = LmModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.nonlinearity)
        if self._frozen:
            twin.freeze()
        return twin

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def save(self, path: Path, metadata: Optional[Mapping[str, Any]] = None, storage: str = "float64") -> Path:
        meta = {"lm_config": self.config.model_dump(), **dict(metadata or {})}
        return save_checkpoint(
            path,
            {f"backbone/{k}": v for k, v in self.params.items()},
            meta,
            storage=storage,
            nonlinearity=self.nonlinearity,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Union[Checkpoint, Path]) -> "LmModel":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        config = LmConfig(**ckpt.metadata["lm_config"])
        state = ckpt.namespace("backbone")
        model = cls(
            config,
            {k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()},
            ckpt.nonlinearity,
        )
        settings_nl = get_settings().MIXEDPREFIX_NONLINEARITY
        if ckpt.nonlinearity != settings_nl:
            log.warning("checkpoint nonlinearity %s differs from configured %s; using the checkpoint's", ckpt.nonlinearity, settings_nl)
        return model


# ------------------------------------------------------------
# Forward pass
# ------------------------------------------------------------


@dataclass
class LmOutput:
    logits: Node
    hidden: list[Node]


def _norm(g: Graph, x: Node, params: Mapping[str, Node], name: str) -> Node:
    return g.layer_norm(x) * params[f"{name}.g"] + params[f"{name}.b"]


def _affine(g: Graph, x: Node, w: Node, b: Optional[Node] = None) -> Node:
    y = g.matmul(x, w)
    return y if b is None else y + b


def attention_mask(seq_len: int, prefix_len: int) -> np.ndarray:
    """Additive mask [T, P+T]: prefix columns open, token columns causal."""
    causal = np.triu(np.full((seq_len, seq_len), _MASKED), k=1)
    return np.concatenate([np.zeros((seq_len, prefix_len)), causal], axis=1)


def _attention(g, cfg: LmConfig, params, layer: int, x: Node, prefix: Optional[PrefixActivations], B: int, T: int) -> Node:
    H, hd, D = cfg.n_heads, cfg.head_dim, cfg.d_model
    p = f"h{layer}.attn"

    def heads(node: Node, S: int) -> Node:
        return g.transpose(g.reshape(node, (B, S, H, hd)), (0, 2, 1, 3))

    q = heads(_affine(g, x, params[f"{p}.wq"], params[f"{p}.bq"]), T)
    k = heads(_affine(g, x, params[f"{p}.wk"], params[f"{p}.bk"]), T)
    v = heads(_affine(g, x, params[f"{p}.wv"], params[f"{p}.bv"]), T)
    P = 0
    if prefix is not None and prefix.prefix_len:
        P = prefix.prefix_len
        k = g.concat([heads(prefix.keys[layer], P), k], axis=2)
        v = g.concat([heads(prefix.values[layer], P), v], axis=2)
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    scores = scores + g.constant(attention_mask(T, P))
    out = g.matmul(g.softmax(scores, axis=-1), v)
    out = g.reshape(g.transpose(out, (0, 2, 1, 3)), (B, T, D))
    return _affine(g, out, params[f"{p}.wo"], params[f"{p}.bo"])


def lm_forward(
    model: LmModel,
    graph: Graph,
    tokens: Any,
    prefix: Optional[PrefixActivations] = None,
    rng: Optional[RngStream] = None,
) -> LmOutput:
    """Causal logits [B, T, V] for token ids [B, T], optionally behind injected prefix slots."""
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeError("lm_forward", [ids.shape], "tokens must be [batch, seq] with seq > 0")
    B, T = ids.shape
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError("lm_forward", [ids.shape], f"token id outside vocabulary of {cfg.vocab_size}")
    P = prefix.prefix_len if prefix is not None else 0
    if prefix is not None:
        prefix.validate(cfg, B)
    if T + P > cfg.max_seq:
        raise ShapeError("lm_forward", [ids.shape, (P,)], f"sequence + prefix exceeds max_seq={cfg.max_seq}")

    params = {name: graph.param(t, name) for name, t in model.params.items()}
    x = graph.embedding(params["tok_emb"], ids) + graph.embedding(params["pos_emb"], np.arange(T))
    hidden = [x]
    for l in range(cfg.n_layers):
        a = _attention(graph, cfg, params, l, _norm(graph, x, params, f"h{l}.ln1"), prefix, B, T)
        if cfg.dropout and rng is not None:
            a = graph.dropout(a, cfg.dropout, rng.child(f"h{l}.attn"))
        x = x + a
        h = _affine(graph, _norm(graph, x, params, f"h{l}.ln2"), params[f"h{l}.mlp.w1"], params[f"h{l}.mlp.b1"])
        h = _affine(graph, graph.nonlinearity(h, model.nonlinearity), params[f"h{l}.mlp.w2"], params[f"h{l}.mlp.b2"])
        if cfg.dropout and rng is not None:
            h = graph.dropout(h, cfg.dropout, rng.child(f"h{l}.mlp"))
        x = x + h
        hidden.append(x)
    logits = graph.matmul(_norm(graph, x, params, "ln_f"), params["head.w"])
    return LmOutput(logits, hidden)


# ------------------------------------------------------------
# Likelihood
# ------------------------------------------------------------


def nll_per_token(logits: Union[Node, np.ndarray], targets: Any) -> Union[Node, float]:
    """
    Mean negative log-likelihood in nats over non-padding targets.

    `targets` are aligned with `logits` (already shifted by one); padding is
    IGNORE_TARGET. A graph node yields a differentiable scalar node, a plain
    array yields a float.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if isinstance(logits, Node):
        V = logits.shape[-1]
        g = logits.graph
        return g.cross_entropy(g.reshape(logits, (int(np.prod(logits.shape[:-1])), V)), tgt.reshape(-1))
    sums, counts = sequence_nll(np.asarray(logits, dtype=np.float64), tgt)
    total = int(counts.sum())
    if total == 0:
        raise EmptyTargetsError("nll over targets that are all padding")
    return float(sums.sum() / total)


def sequence_nll(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence summed NLL and target counts for logits [B, T, V] and targets [B, T]."""
    if logits.ndim == 2:
        logits, targets = logits[None], np.asarray(targets)[None]
    mask = targets != IGNORE_TARGET
    safe = np.where(mask, targets, 0)
    logp = logits - logsumexp(logits, axis=-1, keepdims=True)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    nll = -(picked * mask)
    return nll.sum(axis=1), mask.sum(axis=1)
