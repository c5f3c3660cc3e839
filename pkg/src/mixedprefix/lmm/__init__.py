from mixedprefix.lmm.reference import (
    GroupCoefficients,
    GroupedDataset,
    NoPoolFit,
    fit_complete_pool,
    fit_mixed,
    fit_no_pool,
    shrinkage_curve,
    shrinkage_weight,
    write_fit,
)

__all__ = [
    "GroupCoefficients",
    "GroupedDataset",
    "NoPoolFit",
    "fit_complete_pool",
    "fit_mixed",
    "fit_no_pool",
    "shrinkage_curve",
    "shrinkage_weight",
    "write_fit",
]
