"""
mixedprefix.harness

Configuration-driven experiments over the adaptation strategies: training
and evaluation with confidence intervals, data-efficiency sweeps, paired
comparisons and the analyses of a trained strategy.
"""

from mixedprefix.harness.analysis import (
    DistinctiveRow,
    EmbeddingExport,
    distinctive_utterances,
    export_prefix_embeddings,
    generation_kl,
    parent_map,
    pca_2d,
    prompted_generation,
    sentence_log_ppl,
)
from mixedprefix.harness.compare import PairedReport, compare_mlp_architectures, multi_feature_compare
from mixedprefix.harness.config import ExperimentConfig, JsonlCorpus, SyntheticCorpus
from mixedprefix.harness.evaluation import PartitionResult, evaluate, score_examples, summarize, weighted_context_mean
from mixedprefix.harness.runner import EvalReport, SeedData, load_run_strategy, prepare_backbone, prepare_seed, run_experiment, seed_summary
from mixedprefix.harness.sweep import SweepReport, data_efficiency_sweep

__all__ = [
    "DistinctiveRow",
    "EmbeddingExport",
    "EvalReport",
    "ExperimentConfig",
    "JsonlCorpus",
    "PairedReport",
    "PartitionResult",
    "SeedData",
    "SweepReport",
    "SyntheticCorpus",
    "compare_mlp_architectures",
    "data_efficiency_sweep",
    "distinctive_utterances",
    "evaluate",
    "export_prefix_embeddings",
    "generation_kl",
    "load_run_strategy",
    "multi_feature_compare",
    "parent_map",
    "pca_2d",
    "prepare_backbone",
    "prepare_seed",
    "prompted_generation",
    "run_experiment",
    "score_examples",
    "seed_summary",
    "sentence_log_ppl",
    "summarize",
    "weighted_context_mean",
]
