from mixedprefix.corpus.ingest import ingest_jsonl, save_jsonl
from mixedprefix.corpus.split import PARTITIONS, SplitSpec, largest_remainder, split
from mixedprefix.corpus.synth import (
    FeatureSpec,
    HierarchicalSource,
    OracleRow,
    SourceSpec,
    SynthResult,
    cross_entropy_rate,
    entropy_rate,
    stationary_distribution,
    synth_generate,
)
from mixedprefix.corpus.tokenizer import SPECIALS, Tokenizer, build_vocab
from mixedprefix.corpus.types import Corpus, Example, context_label

__all__ = [
    "PARTITIONS",
    "SPECIALS",
    "Corpus",
    "Example",
    "FeatureSpec",
    "HierarchicalSource",
    "OracleRow",
    "SourceSpec",
    "SplitSpec",
    "SynthResult",
    "Tokenizer",
    "build_vocab",
    "context_label",
    "cross_entropy_rate",
    "entropy_rate",
    "ingest_jsonl",
    "largest_remainder",
    "save_jsonl",
    "split",
    "stationary_distribution",
    "synth_generate",
]
