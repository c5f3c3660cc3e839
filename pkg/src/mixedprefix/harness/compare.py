"""
mixedprefix.harness.compare

Paired comparisons: the same seeds, corpus, backbone and test data, with
one setting changed between a baseline and a treatment variant.

- multi_feature_compare: contexts with the primary feature only vs all features
- compare_mlp_architectures: one shared prefix MLP vs one MLP per slot
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from mixedprefix.errors import ConfigError
from mixedprefix.harness.config import ExperimentConfig
from mixedprefix.harness.evaluation import ALL_CONTEXTS, PartitionResult
from mixedprefix.harness.runner import (
    Timings,
    build_strategy,
    evaluate_strategy,
    failure_marker,
    prepare_backbone,
    prepare_seed,
    train_strategy,
)
from mixedprefix.prefix.hyper import PrefixConfig
from mixedprefix.utils.files import write_csv, write_json
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.harness.compare")

PAIR_COLUMNS = ["seed", "strategy", "partition", "context", "baseline", "treatment", "delta"]


@dataclass
class Variant:
    name: str
    features: list[str]
    prefix: PrefixConfig


@dataclass
class PairedReport:
    name: str
    config_hash: str
    baseline: str
    treatment: str
    results: list[PartitionResult] = field(default_factory=list)
    parameters: Dict[str, Dict[str, int]] = field(default_factory=dict)
    status: str = "ok"
    failure: Optional[Dict[str, Any]] = None

    def _find(self, seed: int, strategy: str, partition: str, variant: str) -> Optional[PartitionResult]:
        for r in self.results:
            if (r.seed, r.strategy, r.partition, r.variant) == (seed, strategy, partition, variant):
                return r
        return None

    def pairs(self) -> list[Dict[str, Any]]:
        """Treatment minus baseline per (seed, strategy, partition), with per-context deltas."""
        out = []
        keys = sorted({(r.seed, r.strategy, r.partition) for r in self.results})
        for seed, strategy, partition in keys:
            base = self._find(seed, strategy, partition, self.baseline)
            treat = self._find(seed, strategy, partition, self.treatment)
            if base is None or treat is None or base.log_ppl is None or treat.log_ppl is None:
                continue
            treat_ctx = {c.context: c.log_ppl for c in treat.contexts}
            contexts = [
                {
                    "context": c.context,
                    "baseline": c.log_ppl,
                    "treatment": treat_ctx[c.context],
                    "delta": treat_ctx[c.context] - c.log_ppl,
                }
                for c in base.contexts
                if c.context in treat_ctx
            ]
            out.append(
                {
                    "seed": seed,
                    "strategy": strategy,
                    "partition": partition,
                    "baseline": base.log_ppl,
                    "treatment": treat.log_ppl,
                    "delta": treat.log_ppl - base.log_ppl,
                    "baseline_ci_half_width": base.ci_high - base.log_ppl,
                    "treatment_ci_half_width": treat.ci_high - treat.log_ppl,
                    "contexts": contexts,
                }
            )
        return out

    def summary(self) -> Dict[str, Any]:
        grouped: Dict[str, list[float]] = {}
        for p in self.pairs():
            grouped.setdefault(f"{p['strategy']}/{p['partition']}", []).append(p["delta"])
        return {
            key: {
                "median_delta": statistics.median(deltas),
                "mean_delta": statistics.fmean(deltas),
                "treatment_wins": sum(d < 0 for d in deltas),
                "seeds": len(deltas),
            }
            for key, deltas in sorted(grouped.items())
        }

    def table_rows(self) -> list[Dict[str, Any]]:
        rows = []
        for p in self.pairs():
            base = {"seed": p["seed"], "strategy": p["strategy"], "partition": p["partition"]}
            rows.append({**base, "context": ALL_CONTEXTS, "baseline": p["baseline"], "treatment": p["treatment"], "delta": p["delta"]})
            rows.extend({**base, **c} for c in p["contexts"])
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "failure": self.failure,
            "name": self.name,
            "config_hash": self.config_hash,
            "baseline": self.baseline,
            "treatment": self.treatment,
            "parameters": self.parameters,
            "results": [r.to_dict() for r in self.results],
            "pairs": self.pairs(),
            "summary": self.summary(),
        }

    def write(self, run_dir: Path) -> None:
        write_json(run_dir / f"{self.name}.json", self.to_dict())
        write_csv(run_dir / f"{self.name}.csv", PAIR_COLUMNS, self.table_rows())


def paired_experiment(
    config: ExperimentConfig,
    name: str,
    baseline: Variant,
    treatment: Variant,
    kinds: Sequence[str],
) -> PairedReport:
    run_dir = config.run_dir() / name
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    report = PairedReport(name, config.config_hash(), baseline.name, treatment.name)
    timings = Timings()
    stage = ["setup"]
    feature_sets = [baseline.features] if baseline.features == treatment.features else [baseline.features, treatment.features]

    with failure_marker(report, run_dir, timings, stage):
        for seed in config.seeds:
            stage[0] = f"seed{seed}/data"
            with timings.stage(stage[0]):
                data = prepare_seed(config, seed, feature_sets)
            stage[0] = f"seed{seed}/backbone"
            with timings.stage(stage[0]):
                backbone, _ = prepare_backbone(config, data, run_dir / f"seed{seed}")
            for variant in (baseline, treatment):
                train = data.examples("train", variant.features)
                val = data.examples("val", variant.features)
                for kind in kinds:
                    stage[0] = f"seed{seed}/{variant.name}/{kind}"
                    with timings.stage(stage[0]):
                        strategy = build_strategy(config, data, kind, backbone, variant.features, prefix_config=variant.prefix)
                        report.parameters.setdefault(variant.name, {})[kind] = strategy.parameter_count()
                        train_strategy(strategy, train, val, config, seed, f"{kind}[{variant.name}]")
                        report.results.extend(evaluate_strategy(config, data, strategy, variant.features, variant.name))
        stage[0] = "report"
        report.write(run_dir)
    log.info("%s: %s", name, report.summary())
    return report


def multi_feature_compare(config: ExperimentConfig) -> PairedReport:
    """Every configured strategy with the primary feature only (baseline) and with all features (treatment)."""
    features = config.schema_features
    if len(features) < 2:
        raise ConfigError("multi-feature comparison needs a schema with at least two features", {"features": features})
    return paired_experiment(
        config,
        "multifeat",
        Variant("single-feature", features[:1], config.prefix),
        Variant("multi-feature", features, config.prefix),
        config.strategies,
    )


def compare_mlp_architectures(config: ExperimentConfig) -> PairedReport:
    """MET with one shared prefix MLP (baseline) and with an independent MLP per slot (treatment)."""
    features = config.schema_features
    if len(features) < 2:
        log.warning("comparing MLP architectures with a single feature; the modes differ only in the corpus slot")
    return paired_experiment(
        config,
        "compare-mlp",
        Variant("shared", features, config.prefix.model_copy(update={"mlp_mode": "shared"})),
        Variant("independent", features, config.prefix.model_copy(update={"mlp_mode": "independent"})),
        ["met"],
    )
