"""
mixedprefix.harness.analysis

Post-training analyses of a single trained strategy: distinctive
utterances, prompted generation (with a generator-KL check on synthetic
data) and export of the learned prefix embeddings.
"""

from __future__ import annotations

import json
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.special import rel_entr
from sklearn.metrics import silhouette_score

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.synth import HierarchicalSource
from mixedprefix.corpus.types import Corpus, context_label
from mixedprefix.errors import ConfigError, ContractViolation
from mixedprefix.lm.generate import Sampler, generate
from mixedprefix.prefix.bank import slot_vectors
from mixedprefix.strategies import AdaptationStrategy, EncodedExample, PrefixStrategy
from mixedprefix.utils.files import atomic_write_text, write_csv
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.harness.analysis")


# ------------------------------------------------------------
# Distinctive utterances
# ------------------------------------------------------------


def sentence_log_ppl(strategy: AdaptationStrategy, example: EncodedExample) -> float:
    """Per-token NLL of one sentence, scored alone (no padding, no batch neighbours)."""
    sums, counts = strategy.score(strategy.collate([example]))
    return float(sums[0] / counts[0])


@dataclass
class DistinctiveRow:
    rank: int
    index: int
    score: float
    nll_value: float
    nll_others: float
    text: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rank": self.rank,
            "index": self.index,
            "score": self.score,
            "nll_value": self.nll_value,
            "nll_others": self.nll_others,
            "text": self.text,
        }


def distinctive_utterances(
    strategy: AdaptationStrategy,
    examples: Sequence[EncodedExample],
    feature: str,
    value: str,
    k: int = 10,
) -> list[DistinctiveRow]:
    """
    Rank sentences by how much better they are explained under `value` than
    under the feature's other values: score = mean over v' ≠ v of NLL(v') −
    NLL(v), per-token NLLs, every other context feature kept as is. Sorted by
    descending score; ties keep the order of `examples`.
    """
    schema = strategy.schema
    schema.require_value(feature, value)
    others = [v for v in schema.values(feature) if v != value]
    if not others:
        raise ConfigError(f"feature '{feature}' has no other values to compare against", {"feature": feature})

    def under(ex: EncodedExample, v: str) -> float:
        return sentence_log_ppl(strategy, EncodedExample(ex.ids, {**ex.context, feature: v}))

    rows = []
    for i, ex in enumerate(examples):
        own = under(ex, value)
        rest = statistics.fmean(under(ex, v) for v in others)
        rows.append(DistinctiveRow(0, i, rest - own, own, rest, strategy.tokenizer.detokenize(ex.ids)))
    ranked = sorted(rows, key=lambda r: -r.score)[: max(k, 0)]
    for rank, row in enumerate(ranked, start=1):
        row.rank = rank
    return ranked


# ------------------------------------------------------------
# Generation
# ------------------------------------------------------------


def prompted_generation(
    strategy: AdaptationStrategy,
    context: Mapping[str, Optional[str]],
    prompt: str,
    n: int,
    out_path: Path,
    sampler: Sampler = "greedy",
    max_len: int = 32,
    seed: int = 0,
    temperature: float = 1.0,
) -> list[Dict[str, Any]]:
    """
    Write `n` continuations of `prompt` under `context` to a JSONL file. Prompt
    words outside the vocabulary become <unk>. Greedy decoding is
    deterministic; sampling draws from RngStream(seed, "generate/<i>").
    """
    tok = strategy.tokenizer
    words = prompt.split()
    unknown = tok.count_unknown(words)
    if unknown:
        log.warning("%d prompt word(s) not in the vocabulary; substituted with <unk>", unknown)
    ids = [tok.bos_id, *tok.encode(words)]
    inputs = strategy.generation_inputs(context, ids)
    start = len(ids) + strategy.prompt_offset(context)

    records = []
    for i in range(max(n, 0)):
        rng = RngStream(seed, f"generate/{i}") if sampler == "temperature" else None
        out = generate(inputs.model, inputs.prefix, inputs.prompt, max_len, sampler, rng, temperature, tok.eos_id)
        continuation = out[start:]
        records.append(
            {
                "index": i,
                "strategy": strategy.kind,
                "context": dict(context),
                "prompt": prompt,
                "sampler": sampler,
                "tokens": [*ids, *continuation],
                "text": tok.detokenize([*ids, *continuation]),
            }
        )
    atomic_write_text(Path(out_path), "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records))
    log.info("wrote %d generations to %s", len(records), out_path)
    return records


def emitted_distribution(strategy: AdaptationStrategy, source: HierarchicalSource, sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """Frequencies of emitted tokens in the source's state indexing: 0 is <eos>, 1 + w is word w."""
    tok = strategy.tokenizer
    index = {tok.stoi[w]: 1 + i for i, w in enumerate(source.words()) if w in tok}
    index[tok.eos_id] = 0
    counts = np.zeros(source.n_states)
    for seq in sequences:
        for t in seq[1:]:
            if t in index:
                counts[index[t]] += 1
    total = counts.sum()
    return counts / total if total else counts


def generation_kl(
    strategy: AdaptationStrategy,
    source: HierarchicalSource,
    contexts: Sequence[Mapping[str, str]],
    n: int = 1000,
    seed: int = 0,
    temperature: float = 1.0,
) -> Dict[str, Dict[str, float]]:
    """
    For each context, sample `n` sentences and return KL(emitted ‖ long-run
    token distribution of every generator context). The generating context
    should be the closest.
    """
    tok = strategy.tokenizer
    targets = {context_label(c): source.token_distribution(dict(c)) for c in source.contexts()}
    out: Dict[str, Dict[str, float]] = {}
    for ctx in contexts:
        label = context_label(ctx)
        inputs = strategy.generation_inputs(ctx, [tok.bos_id])
        start = 1 + strategy.prompt_offset(ctx)
        seqs = []
        for i in range(n):
            rng = RngStream(seed, f"generation-kl/{label}/{i}")
            out_ids = generate(inputs.model, inputs.prefix, inputs.prompt, source.spec.max_length + 1, "temperature", rng, temperature, tok.eos_id)
            seqs.append([tok.bos_id, *out_ids[start:]])
        p = emitted_distribution(strategy, source, seqs)
        out[label] = {t: float(rel_entr(p, q).sum()) for t, q in targets.items()}
    return out


# ------------------------------------------------------------
# Prefix embeddings
# ------------------------------------------------------------


def pca_2d(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Coordinates of the mean-centred rows in the top-2 principal subspace and
    the share of variance each axis explains. Each axis is signed so its
    largest-magnitude loading is positive. A single row maps to (0, 0).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    coords = np.zeros((n, 2))
    explained = np.zeros(2)
    if n < 2:
        return coords, explained
    Xc = X - X.mean(axis=0)
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    k = min(2, S.size)
    axes = Vt[:k].copy()
    for j in range(k):
        if axes[j][np.argmax(np.abs(axes[j]))] < 0:
            axes[j] = -axes[j]
    coords[:, :k] = Xc @ axes.T
    total = float((S**2).sum())
    if total > 0:
        explained[:k] = S[:k] ** 2 / total
    return coords, explained


def parent_map(corpus: Corpus, child: str, parent: str) -> Dict[str, str]:
    """Most frequent `parent` value of each `child` value; ties go to the first seen."""
    counts: Dict[str, Counter[str]] = {}
    for ex in corpus:
        c, p = ex.features.get(child), ex.features.get(parent)
        if c is not None and p is not None:
            counts.setdefault(c, Counter())[p] += 1
    return {c: cnt.most_common(1)[0][0] for c, cnt in counts.items()}


@dataclass
class EmbeddingExport:
    rows: list[Dict[str, Any]]
    explained_variance: list[float]
    silhouette: Optional[Dict[str, float]] = None
    columns: list[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"n_rows": len(self.rows), "explained_variance": self.explained_variance, "silhouette": self.silhouette}


def export_prefix_embeddings(
    strategy: AdaptationStrategy,
    path: Path,
    include_activations: bool = False,
    parents: Optional[Mapping[str, str]] = None,
    seed: int = 0,
    child: Optional[str] = None,
) -> EmbeddingExport:
    """
    Write one CSV row per (feature, value) with its W_E row, its 2-D PCA
    coordinates and, optionally, the flattened prefix activation of its slot.

    With `parents` (child value -> parent value), the embeddings of the `child`
    feature (default: the last one) are scored by silhouette against their
    parents and against a shuffled labelling of the same sizes.
    """
    if not isinstance(strategy, PrefixStrategy):
        raise ContractViolation(f"strategy '{strategy.kind}' has no prefix embeddings to export", {"strategy": strategy.kind})
    schema, params = strategy.schema, strategy.params
    embed = params.tensors["embed"].data
    meta: list[tuple[str, str, int, int]] = []
    for feature in schema.features:
        slot = schema.slot_of(feature)
        for value in schema.values(feature):
            meta.append((feature, value, schema.require_value(feature, value), slot))
    vectors = np.asarray([embed[tid] for _, _, tid, _ in meta]).reshape(len(meta), embed.shape[1])
    coords, explained = pca_2d(vectors) if meta else (np.zeros((0, 2)), np.zeros(2))

    columns = ["feature", "value", "token_id", "pc1", "pc2", *(f"e{i}" for i in range(embed.shape[1]))]
    flat: Optional[np.ndarray] = None
    if include_activations and meta:
        flat = np.stack([slot_vectors(params, slot, [tid])[0] for _, _, tid, slot in meta])
        columns += [f"h{i}" for i in range(flat.shape[1])]
    rows = []
    for i, (feature, value, tid, _) in enumerate(meta):
        row: Dict[str, Any] = {"feature": feature, "value": value, "token_id": tid, "pc1": float(coords[i, 0]), "pc2": float(coords[i, 1])}
        row.update({f"e{j}": float(x) for j, x in enumerate(vectors[i])})
        if flat is not None:
            row.update({f"h{j}": float(x) for j, x in enumerate(flat[i])})
        rows.append(row)
    write_csv(Path(path), columns, rows)

    silhouette = None
    if parents:
        child = child or schema.features[-1]
        picked = [i for i, (feature, value, _, _) in enumerate(meta) if feature == child and value in parents]
        labels = np.asarray([parents[meta[i][1]] for i in picked])
        if 2 <= len(set(labels)) <= len(picked) - 1:
            X = vectors[picked]
            shuffled = labels[RngStream(seed, "silhouette").permutation(len(labels))]
            silhouette = {
                "by_parent": float(silhouette_score(X, labels)),
                "shuffled": float(silhouette_score(X, shuffled)),
                "n": len(picked),
            }
        else:
            log.warning("silhouette needs 2..n-1 parent groups; skipped")
    log.info("exported %d prefix embeddings to %s", len(rows), path)
    return EmbeddingExport(rows, [float(x) for x in explained], silhouette, columns)
