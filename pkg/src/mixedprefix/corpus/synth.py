"""
mixedprefix.corpus.synth

Hierarchical bigram sources with exact oracles.

States are 0 (sentence boundary) and 1..V (the word just emitted). From any
state the chain emits either a word or, except right after the boundary,
the end-of-sentence token, which returns it to state 0. Word logits of a
context are the base logits plus one perturbation per feature value in the
context. Every emitted token (words and EOS) is one scored target, so the
per-token entropy rate of a context is Σ_s π_s H(P_s) over the stationary
distribution π of its chain.

A sentence that reaches `max_length` is cut there and its EOS is forced
rather than sampled. The oracle holds exactly only for uncut text, so cut
sentences are counted in the provenance and noted on the result.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg
from scipy.special import entr, softmax

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.corpus.types import Corpus, Example, context_label
from mixedprefix.errors import ConfigError
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.corpus.synth")

# Self-transition probability above which a word state counts as absorbing.
_ABSORBING = 1.0 - 1e-6


class FeatureSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    n_values: int = Field(gt=0)
    sigma: float = Field(default=1.2, ge=0.0)
    structure: Literal["cross-cut", "nested"] = "cross-cut"
    # nested only: share of the parent value's perturbation inherited by each child
    coupling: float = Field(default=1.0, ge=0.0)

    def value_names(self) -> list[str]:
        return [f"{self.name}_{i}" for i in range(self.n_values)]


class SourceSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_words: int = Field(default=48, gt=1)
    base_scale: float = Field(default=2.0, ge=0.0)
    features: list[FeatureSpec] = Field(default_factory=lambda: [FeatureSpec(name="domain", n_values=11)])
    mean_length: float = Field(default=12.0, gt=1.0)
    max_length: int = Field(default=48, gt=0)
    sentences_per_context: int = Field(default=200, ge=1)
    base_sentences: int = Field(default=0, ge=0)
    exclusive_tokens: bool = False
    exclusive_strength: float = Field(default=8.0, ge=0.0)
    max_retries: int = Field(default=5, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "SourceSpec":
        if not self.features:
            raise ValueError("at least one feature is required")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names {names}")
        if self.features[0].structure == "nested":
            raise ValueError("the primary feature cannot be nested")
        if self.exclusive_tokens and self.features[0].n_values >= self.vocab_words:
            raise ValueError("exclusive tokens need more words than primary values")
        return self


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left eigenvector of a row-stochastic matrix for eigenvalue 1, normalized to sum 1."""
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return linalg.solve(A, b)


def entropy_rate(P: np.ndarray, pi: Optional[np.ndarray] = None) -> float:
    pi = stationary_distribution(P) if pi is None else pi
    return float(pi @ entr(P).sum(axis=1))


def cross_entropy_rate(P: np.ndarray, Q: np.ndarray, pi: Optional[np.ndarray] = None) -> float:
    """Per-token cross-entropy of model chain Q on text from chain P."""
    pi = stationary_distribution(P) if pi is None else pi
    with np.errstate(divide="ignore"):
        logq = np.where(P > 0, np.log(np.where(Q > 0, Q, 1.0)), 0.0)
    return float(-(pi * (P * logq).sum(axis=1)).sum())


@dataclass
class OracleRow:
    context: str
    features: Dict[str, str]
    entropy: float
    base_cross_entropy: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "context": self.context,
            **self.features,
            "entropy": self.entropy,
            "base_cross_entropy": self.base_cross_entropy,
            "gap": self.base_cross_entropy - self.entropy,
        }


class HierarchicalSource:
    def __init__(self, spec: SourceSpec, rng: RngStream):
        self.spec = spec
        V = spec.vocab_words
        self.n_states = V + 1
        self.base_logits = rng.child("base").normal(0.0, 1.0, (self.n_states, V)) * spec.base_scale
        self.exclusive: Dict[str, int] = {}
        primary = spec.features[0]
        if spec.exclusive_tokens:
            first = V - primary.n_values
            self.base_logits[:, first:] -= spec.exclusive_strength
            self.exclusive = {v: first + i for i, v in enumerate(primary.value_names())}

        self.parents: Dict[str, Dict[str, str]] = {}
        self.perturbations: Dict[tuple[str, str], np.ndarray] = {}
        for feat in spec.features:
            parent_feat = spec.features[0]
            if feat.structure == "nested":
                parent_values = parent_feat.value_names()
                self.parents[feat.name] = {v: parent_values[i % len(parent_values)] for i, v in enumerate(feat.value_names())}
            for value in feat.value_names():
                u = rng.child(f"u/{feat.name}/{value}").normal(0.0, feat.sigma, (self.n_states, V)) if feat.sigma > 0 else np.zeros((self.n_states, V))
                if feat.structure == "nested":
                    u = u + feat.coupling * self.perturbations[(parent_feat.name, self.parents[feat.name][value])]
                if value in self.exclusive:
                    u[:, self.exclusive[value]] += spec.exclusive_strength
                self.perturbations[(feat.name, value)] = u

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.spec.features]

    def word(self, index: int) -> str:
        return f"w{index:02d}"

    def words(self) -> list[str]:
        return [self.word(i) for i in range(self.spec.vocab_words)]

    def contexts(self) -> list[Dict[str, str]]:
        """Every valid context: cross-cut features combine freely, nested ones only under their parent."""
        feats = self.spec.features
        out: list[Dict[str, str]] = []
        for combo in itertools.product(*(f.value_names() for f in feats)):
            ctx = dict(zip(self.feature_names, combo))
            if all(f.structure != "nested" or self.parents[f.name][ctx[f.name]] == ctx[feats[0].name] for f in feats):
                out.append(ctx)
        return out

    def _transition(self, logits: np.ndarray) -> np.ndarray:
        q = 1.0 / self.spec.mean_length
        P = np.zeros((self.n_states, self.n_states))
        P[0, 1:] = softmax(logits[0])
        P[1:, 0] = q
        P[1:, 1:] = (1.0 - q) * softmax(logits[1:], axis=1)
        return P

    def base_transition(self) -> np.ndarray:
        return self._transition(self.base_logits)

    def transition(self, context: Dict[str, Optional[str]]) -> np.ndarray:
        logits = self.base_logits.copy()
        for name in self.feature_names:
            value = context.get(name)
            if value is not None:
                logits = logits + self.perturbations[(name, value)]
        return self._transition(logits)

    def is_degenerate(self) -> bool:
        for P in [self.base_transition(), *(self.transition(c) for c in self.contexts())]:
            if np.any(np.diag(P)[1:] > _ABSORBING):
                return True
            pi = stationary_distribution(P)
            if not np.all(np.isfinite(pi)) or pi.min() <= 0.0:
                return True
        return False

    def token_distribution(self, context: Dict[str, Optional[str]]) -> np.ndarray:
        """Long-run frequency of emitted tokens; index 0 is EOS, index 1 + w is word w."""
        return stationary_distribution(self.transition(context))

    def sample_sentence(self, P: np.ndarray, rng: RngStream) -> list[int]:
        words: list[int] = []
        state = 0
        while len(words) < self.spec.max_length:
            nxt = rng.categorical(P[state])
            if nxt == 0:
                break
            words.append(nxt - 1)
            state = nxt
        return words

    def oracle(self) -> list[OracleRow]:
        base = self.base_transition()
        rows = []
        for ctx in self.contexts():
            P = self.transition(ctx)
            pi = stationary_distribution(P)
            rows.append(OracleRow(context_label(ctx), dict(ctx), entropy_rate(P, pi), cross_entropy_rate(P, base, pi)))
        return rows


@dataclass
class SynthResult:
    corpus: Corpus
    oracle: list[OracleRow]
    source: HierarchicalSource
    base_corpus: Optional[Corpus] = None
    attempts: int = 1
    base_entropy: float = 0.0
    notes: list[str] = field(default_factory=list)

    def oracle_by_context(self) -> Dict[str, OracleRow]:
        return {r.context: r for r in self.oracle}


def synth_generate(spec: SourceSpec, seed: int, sizes: Optional[int] = None) -> SynthResult:
    """Sample `sizes` (default spec.sentences_per_context) sentences per context plus the oracle table."""
    per_context = spec.sentences_per_context if sizes is None else sizes
    if per_context < 1:
        raise ConfigError("sentences per context must be at least 1")
    source = None
    attempts = 0
    for attempt in range(spec.max_retries + 1):
        attempts = attempt + 1
        label = "source" if attempt == 0 else f"source/retry{attempt}"
        candidate = HierarchicalSource(spec, RngStream(seed, label))
        if not candidate.is_degenerate():
            source = candidate
            break
        log.warning("degenerate bigram chain (attempt %d), regenerating", attempts)
    if source is None:
        raise ConfigError("could not draw a non-degenerate source", {"attempts": attempts, "seed": seed})

    examples: list[Example] = []
    truncated = 0
    for ctx in source.contexts():
        P = source.transition(ctx)
        rng = RngStream(seed, f"sample/{context_label(ctx)}")
        for _ in range(per_context):
            idx = source.sample_sentence(P, rng)
            truncated += int(len(idx) == spec.max_length)
            examples.append(Example(tuple(source.word(i) for i in idx), dict(ctx)))

    base_corpus = None
    if spec.base_sentences:
        P = source.base_transition()
        rng = RngStream(seed, "sample/base")
        base_corpus = Corpus(
            [Example(tuple(source.word(i) for i in source.sample_sentence(P, rng)), {}) for _ in range(spec.base_sentences)],
            [],
            {"kind": "synthetic-base", "seed": seed},
        )

    provenance = {
        "kind": "synthetic",
        "seed": seed,
        "attempts": attempts,
        "sentences_per_context": per_context,
        "truncated_sentences": truncated,
        "spec": spec.model_dump(),
        "exclusive_tokens": {v: source.word(i) for v, i in source.exclusive.items()},
    }
    corpus = Corpus(examples, source.feature_names, provenance)
    base_h = entropy_rate(source.base_transition())
    notes = []
    if truncated:
        notes.append(f"{truncated} sentences cut at max_length={spec.max_length}; the oracle entropy is approximate")
        log.warning("%d of %d sentences cut at max_length=%d", truncated, len(examples), spec.max_length)
    log.info("synthesized %d sentences over %d contexts (seed=%d)", len(examples), len(source.contexts()), seed)
    return SynthResult(corpus, source.oracle(), source, base_corpus, attempts, base_h, notes)

