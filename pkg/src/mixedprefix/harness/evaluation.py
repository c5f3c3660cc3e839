"""
mixedprefix.harness.evaluation

Log perplexity (mean per-token NLL in nats) of a strategy on a partition.

Sentences are scored in fixed chunks of `batch_size` in corpus order; the
chunks may be spread over a thread pool, but each chunk is computed the
same way and results are assembled in order, so any worker count gives the
same numbers. The 95% interval is log_ppl ± 1.96·SE, with SE taken over
the per-sentence per-token NLLs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np

from mixedprefix.strategies.base import AdaptationStrategy, EncodedExample
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.harness.eval")

Z_95 = 1.96
ALL_CONTEXTS = "ALL"


@dataclass
class SentenceScores:
    nll: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return int(self.nll.size)

    @property
    def per_token(self) -> np.ndarray:
        return self.nll / np.maximum(self.tokens, 1)


def score_examples(
    strategy: AdaptationStrategy,
    examples: Sequence[EncodedExample],
    batch_size: int = 64,
    workers: int = 1,
) -> SentenceScores:
    chunks = [list(examples[i : i + batch_size]) for i in range(0, len(examples), batch_size)]

    def run(chunk: list[EncodedExample]) -> tuple[np.ndarray, np.ndarray]:
        return strategy.score(strategy.collate(chunk))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    if not results:
        return SentenceScores(np.zeros(0), np.zeros(0, dtype=np.int64))
    return SentenceScores(
        np.concatenate([r[0] for r in results]).astype(np.float64),
        np.concatenate([r[1] for r in results]).astype(np.int64),
    )


@dataclass
class ContextResult:
    context: str
    n_sentences: int
    n_tokens: int
    nll_sum: float
    log_ppl: float
    oracle_entropy: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "context": self.context,
            "n_sentences": self.n_sentences,
            "n_tokens": self.n_tokens,
            "log_ppl": self.log_ppl,
            "oracle_entropy": self.oracle_entropy,
        }


@dataclass
class PartitionResult:
    strategy: str
    partition: str
    seed: int
    n_sentences: int
    n_tokens: int
    log_ppl: Optional[float]
    se: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    contexts: list[ContextResult] = field(default_factory=list)
    variant: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "variant": self.variant,
            "partition": self.partition,
            "seed": self.seed,
            "n_sentences": self.n_sentences,
            "n_tokens": self.n_tokens,
            "log_ppl": self.log_ppl,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "contexts": [c.to_dict() for c in self.contexts],
        }

    def table_rows(self) -> list[Dict[str, Any]]:
        """Aggregate row followed by one row per context, as written to results.csv."""
        base = {"seed": self.seed, "strategy": self.strategy, "variant": self.variant, "partition": self.partition}
        rows = [
            {
                **base,
                "context": ALL_CONTEXTS,
                "n_sentences": self.n_sentences,
                "n_tokens": self.n_tokens,
                "log_ppl": self.log_ppl,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "oracle_entropy": None,
            }
        ]
        for c in self.contexts:
            rows.append({**base, **c.to_dict(), "ci_low": None, "ci_high": None})
        return rows


RESULT_COLUMNS = [
    "seed",
    "strategy",
    "variant",
    "partition",
    "context",
    "n_sentences",
    "n_tokens",
    "log_ppl",
    "ci_low",
    "ci_high",
    "oracle_entropy",
]


def summarize(
    scores: SentenceScores,
    labels: Sequence[str],
    strategy: str,
    partition: str,
    seed: int,
    oracle: Optional[Mapping[str, float]] = None,
    variant: str = "",
) -> PartitionResult:
    n = len(scores)
    if n == 0:
        log.warning("%s: partition %s is empty, nothing scored", strategy, partition)
        return PartitionResult(strategy, partition, seed, 0, 0, None, None, None, None, [], variant)
    total_nll = float(scores.nll.sum())
    total_tokens = int(scores.tokens.sum())
    log_ppl = total_nll / total_tokens
    per_sentence = scores.per_token
    se = float(np.std(per_sentence, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    groups: Dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        groups.setdefault(label, []).append(i)
    contexts = []
    for label in sorted(groups):
        rows = groups[label]
        s = float(scores.nll[rows].sum())
        t = int(scores.tokens[rows].sum())
        contexts.append(ContextResult(label, len(rows), t, s, s / t, (oracle or {}).get(label)))
    return PartitionResult(
        strategy, partition, seed, n, total_tokens, log_ppl, se, log_ppl - Z_95 * se, log_ppl + Z_95 * se, contexts, variant
    )


def evaluate(
    strategy: AdaptationStrategy,
    examples: Sequence[EncodedExample],
    labels: Sequence[str],
    partition: str,
    seed: int,
    batch_size: int = 64,
    workers: int = 1,
    oracle: Optional[Mapping[str, float]] = None,
    variant: str = "",
) -> PartitionResult:
    scores = score_examples(strategy, examples, batch_size, workers)
    result = summarize(scores, labels, strategy.kind, partition, seed, oracle, variant)
    if result.log_ppl is not None:
        log.info(
            "%s%s on %s: log_ppl=%.4f [%.4f, %.4f] over %d sentences",
            strategy.kind,
            f" ({variant})" if variant else "",
            partition,
            result.log_ppl,
            result.ci_low,
            result.ci_high,
            result.n_sentences,
        )
    return result


def weighted_context_mean(result: PartitionResult) -> float:
    """Token-weighted mean of the per-context log perplexities."""
    total = sum(c.n_tokens for c in result.contexts)
    return sum(c.log_ppl * c.n_tokens for c in result.contexts) / total
