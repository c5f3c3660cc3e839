from mixedprefix.prefix.bank import (
    MetLoss,
    MetObjective,
    PrefixForward,
    PrefixParams,
    build_prefix,
    mean_value_distance,
    met_loss,
    met_objective,
    prefix_activations,
    prefix_distance_report,
    slot_vectors,
)
from mixedprefix.prefix.hyper import MetHyperparams, PrefixConfig
from mixedprefix.prefix.schema import CORPUS_FEATURE, STAR, ContextKey, FeatureSchema, encode_context

__all__ = [
    "CORPUS_FEATURE",
    "STAR",
    "ContextKey",
    "FeatureSchema",
    "MetHyperparams",
    "MetLoss",
    "MetObjective",
    "PrefixConfig",
    "PrefixForward",
    "PrefixParams",
    "build_prefix",
    "encode_context",
    "mean_value_distance",
    "met_loss",
    "met_objective",
    "prefix_activations",
    "prefix_distance_report",
    "slot_vectors",
]
