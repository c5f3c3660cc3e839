"""
mixedprefix.prefix.bank

θ = (W_E, prefix MLP). A context key's token ids are embedded, mapped
through a two-layer MLP and split into per-layer key/value activations
h = MLP(W_E · p) that the backbone attends to.

The MLP is evaluated once per distinct token id in a batch and the results
are gathered back into slots. A star slot inside h^j is therefore the very
same row as the corresponding slot of h*, so their difference is exactly
zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from mixedprefix.autodiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mixedprefix.autodiff.graph import Graph, Node, Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import CheckpointError, ContractViolation, ShapeError
from mixedprefix.lm.batching import Batch
from mixedprefix.lm.model import LmConfig, LmModel, PrefixActivations, lm_forward, nll_per_token
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import STAR, ContextKey, FeatureSchema
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.prefix.bank")


class PrefixParams:
    """Trainable prefix parameters θ, keyed `embed`, `mlp.*` (shared) or `mlp{i}.*` (independent)."""

    def __init__(self, tensors: Dict[str, Tensor], config: PrefixConfig, n_slots: int, n_ids: int, lm_config: LmConfig, nonlinearity: str = "gelu"):
        self.tensors = tensors
        self.config = config
        self.n_slots = n_slots
        self.n_ids = n_ids
        self.lm_config = lm_config
        self.nonlinearity = nonlinearity

    @property
    def out_dim(self) -> int:
        return 2 * self.lm_config.n_layers * self.lm_config.d_model

    @classmethod
    def init(
        cls,
        schema: FeatureSchema,
        lm_config: LmConfig,
        config: Optional[PrefixConfig] = None,
        rng: Optional[RngStream] = None,
        nonlinearity: str = "gelu",
    ) -> "PrefixParams":
        config = config or PrefixConfig()
        rng = rng or RngStream(0, "prefix")
        out_dim = 2 * lm_config.n_layers * lm_config.d_model
        E, H, std = config.embed_dim, config.hidden, config.init_std

        def normal(name: str, shape: tuple[int, ...]) -> Tensor:
            return Tensor(rng.child(name).normal(0.0, std, shape), requires_grad=True, name=name)

        def zeros(name: str, shape: tuple[int, ...]) -> Tensor:
            return Tensor(np.zeros(shape), requires_grad=True, name=name)

        tensors = {"embed": normal("embed", (schema.n_ids, E))}
        heads = ["mlp"] if config.mlp_mode == "shared" else [f"mlp{i}" for i in range(schema.n_slots)]
        for h in heads:
            tensors[f"{h}.w1"] = normal(f"{h}.w1", (E, H))
            tensors[f"{h}.b1"] = zeros(f"{h}.b1", (H,))
            tensors[f"{h}.w2"] = normal(f"{h}.w2", (H, out_dim))
            tensors[f"{h}.b2"] = zeros(f"{h}.b2", (out_dim,))
        return cls(tensors, config, schema.n_slots, schema.n_ids, lm_config, nonlinearity)

    def mlp_name(self, slot: int) -> str:
        return "mlp" if self.config.mlp_mode == "shared" else f"mlp{slot}"

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def clone(self) -> "PrefixParams":
        return PrefixParams(
            {k: t.copy() for k, t in self.tensors.items()},
            self.config,
            self.n_slots,
            self.n_ids,
            self.lm_config,
            self.nonlinearity,
        )

    def save(self, path: Path, schema: FeatureSchema, metadata: Optional[Mapping[str, Any]] = None) -> Path:
        meta = {
            "prefix_config": self.config.model_dump(),
            "lm_config": self.lm_config.model_dump(),
            "schema": schema.to_dict(),
            **dict(metadata or {}),
        }
        return save_checkpoint(path, {f"prefix/{k}": t for k, t in self.tensors.items()}, meta, nonlinearity=self.nonlinearity)

    @classmethod
    def from_checkpoint(cls, ckpt: Union[Checkpoint, Path]) -> tuple["PrefixParams", FeatureSchema]:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if "prefix_config" not in ckpt.metadata:
            raise CheckpointError("checkpoint holds no prefix parameters")
        schema = FeatureSchema.from_dict(ckpt.metadata["schema"])
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.namespace("prefix").items()}
        params = cls(
            tensors,
            PrefixConfig(**ckpt.metadata["prefix_config"]),
            schema.n_slots,
            schema.n_ids,
            LmConfig(**ckpt.metadata["lm_config"]),
            ckpt.nonlinearity,
        )
        return params, schema


# ------------------------------------------------------------
# Activations
# ------------------------------------------------------------


@dataclass
class PrefixForward:
    """Graph nodes of one prefix computation."""

    activations: PrefixActivations
    flat: Node
    star: Optional[Node] = None


def _slot_outputs(g: Graph, params: PrefixParams, nodes: Mapping[str, Node], ids: np.ndarray) -> Node:
    """MLP outputs gathered into [rows, slots, out_dim] for a token-id matrix [rows, slots]."""
    if ids.size and (ids.min() < 0 or ids.max() >= params.n_ids):
        raise ShapeError("prefix_activations", [ids.shape, (params.n_ids,)], "prefix token id outside table")

    def mlp(name: str, unique_ids: np.ndarray) -> Node:
        emb = g.embedding(nodes["embed"], unique_ids)
        hidden = g.nonlinearity(g.matmul(emb, nodes[f"{name}.w1"]) + nodes[f"{name}.b1"], params.nonlinearity)
        return g.matmul(hidden, nodes[f"{name}.w2"]) + nodes[f"{name}.b2"]

    rows, slots = ids.shape
    if params.config.mlp_mode == "shared":
        uniq, inverse = np.unique(ids, return_inverse=True)
        return g.embedding(mlp("mlp", uniq), inverse.reshape(rows, slots))
    columns = []
    for slot in range(slots):
        uniq, inverse = np.unique(ids[:, slot], return_inverse=True)
        out = g.embedding(mlp(f"mlp{slot}", uniq), inverse.reshape(-1))
        columns.append(g.reshape(out, (rows, 1, params.out_dim)))
    return g.concat(columns, axis=1)


def _split_layers(g: Graph, flat: Node, lm_config: LmConfig) -> PrefixActivations:
    D = lm_config.d_model
    keys, values = [], []
    for layer in range(lm_config.n_layers):
        keys.append(g.slice(flat, 2, 2 * layer * D, (2 * layer + 1) * D))
        values.append(g.slice(flat, 2, (2 * layer + 1) * D, (2 * layer + 2) * D))
    return PrefixActivations(keys, values)


def build_prefix(
    g: Graph,
    params: PrefixParams,
    keys: Sequence[ContextKey],
    with_star: bool = False,
    star_ids: Optional[Sequence[int]] = None,
) -> PrefixForward:
    """
    Bind θ on `g` and compute h for every key. With `with_star`, the all-star
    activations h* ([1, slots, out_dim]) are computed in the same pass.
    """
    nodes = {name: g.param(t, name) for name, t in params.tensors.items()}
    ids = np.asarray([k.ids for k in keys], dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != params.n_slots:
        raise ShapeError("prefix_activations", [ids.shape, (params.n_slots,)], "one token id per slot")
    B = ids.shape[0]
    if with_star:
        if star_ids is None:
            raise ValueError("with_star needs the schema's star ids")
        full = _slot_outputs(g, params, nodes, np.vstack([ids, np.asarray([star_ids], dtype=np.int64)]))
        flat = g.slice(full, 0, 0, B)
        star = g.slice(full, 0, B, B + 1)
    else:
        flat = _slot_outputs(g, params, nodes, ids)
        star = None
    return PrefixForward(_split_layers(g, flat, params.lm_config), flat, star)


def prefix_activations(params: PrefixParams, key: Union[ContextKey, Sequence[ContextKey]]) -> PrefixActivations:
    """h for one key (batch of 1) or a list of keys, on a fresh gradient-free graph."""
    keys = [key] if isinstance(key, ContextKey) else list(key)
    g = Graph(grad_enabled=False)
    return build_prefix(g, params, keys).activations


# ------------------------------------------------------------
# Objective
# ------------------------------------------------------------


@dataclass
class MetObjective:
    loss: Node
    nll: Node
    regularizer: Optional[Node]


@dataclass
class MetLoss:
    loss: float
    nll: float
    regularizer: float
    grads: Dict[str, np.ndarray]


def met_objective(
    g: Graph,
    model: LmModel,
    params: PrefixParams,
    hyper: MetHyperparams,
    batch: Batch,
    keys: Sequence[ContextKey],
    star_ids: Sequence[int],
    rng: Optional[RngStream] = None,
) -> MetObjective:
    """
    NLL under the (dropout-realized) prefixes plus β · mean_j ‖h^j − h*‖²,
    the squared norm taken over every element of h. The star row is only
    computed when β > 0.
    """
    if not model.frozen:
        raise ContractViolation("MET loss requires a frozen backbone")
    if len(keys) != len(batch):
        raise ShapeError("met_loss", [(len(keys),), (len(batch),)], "one context key per example")
    use_reg = hyper.beta > 0.0
    pf = build_prefix(g, params, keys, with_star=use_reg, star_ids=star_ids)
    out = lm_forward(model, g, batch.inputs, pf.activations, rng)
    nll = nll_per_token(out.logits, batch.targets)
    if not use_reg:
        return MetObjective(nll, nll, None)
    star = g.stop_gradient(pf.star) if hyper.star_gradient == "stopped" else pf.star
    reg = g.scale(g.l2_squared(pf.flat - star), hyper.beta / len(keys))
    return MetObjective(nll + reg, nll, reg)


def met_loss(
    model: LmModel,
    params: PrefixParams,
    hyper: MetHyperparams,
    batch: Batch,
    keys: Sequence[ContextKey],
    schema: FeatureSchema,
    rng: Optional[RngStream] = None,
) -> MetLoss:
    """Loss value and gradients with respect to θ only."""
    g = Graph()
    obj = met_objective(g, model, params, hyper, batch, keys, schema.star_ids(), rng)
    grads = g.backward(obj.loss, wrt=params.tensors)
    reg = float(obj.regularizer.value) if obj.regularizer is not None else 0.0
    return MetLoss(float(obj.loss.value), float(obj.nll.value), reg, {k: grads[k] for k in params.tensors})


# ------------------------------------------------------------
# Diagnostics
# ------------------------------------------------------------


def slot_vectors(params: PrefixParams, slot: int, ids: Sequence[int]) -> np.ndarray:
    """Per-slot activation vectors (flattened over layers, keys and values) for the given token ids."""
    g = Graph(grad_enabled=False)
    nodes = {name: g.param(t, name) for name, t in params.tensors.items()}
    name = params.mlp_name(slot)
    emb = g.embedding(nodes["embed"], np.asarray(ids, dtype=np.int64))
    hidden = g.nonlinearity(g.matmul(emb, nodes[f"{name}.w1"]) + nodes[f"{name}.b1"], params.nonlinearity)
    return (g.matmul(hidden, nodes[f"{name}.w2"]) + nodes[f"{name}.b2"]).value


def prefix_distance_report(params: PrefixParams, schema: FeatureSchema) -> list[Dict[str, Any]]:
    """‖h_value − h*‖ per feature value, measured in the value's own slot; star rows report 0."""
    rows: list[Dict[str, Any]] = []
    for slot, feature in enumerate(schema.slots):
        star_id = schema.star_id(slot)
        values = schema.values(feature)
        ids = [star_id] + [schema.require_value(feature, v) for v in values]
        vecs = slot_vectors(params, slot, ids)
        dist = np.sqrt(((vecs - vecs[0]) ** 2).sum(axis=1))
        for label, token_id, d in zip([STAR, *values], ids, dist):
            rows.append({"feature": feature, "value": label, "token_id": int(token_id), "distance": float(d)})
    return rows


def mean_value_distance(report: Sequence[Mapping[str, Any]], features: Optional[Sequence[str]] = None) -> float:
    picked = [r["distance"] for r in report if r["value"] != STAR and (features is None or r["feature"] in features)]
    return float(np.mean(picked)) if picked else 0.0
