"""
mixedprefix.harness.sweep

Data-efficiency sweep: every strategy is retrained on the first `size`
training sentences of each context (in training-split order) and scored on
the unchanged test partitions. The backbone is pretrained once per seed.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from mixedprefix.errors import ConfigError
from mixedprefix.harness.config import ExperimentConfig
from mixedprefix.harness.evaluation import PartitionResult
from mixedprefix.harness.plot import write_line_chart
from mixedprefix.harness.runner import (
    SeedData,
    Timings,
    build_strategy,
    evaluate_strategy,
    failure_marker,
    prepare_backbone,
    prepare_seed,
    save_seed_artifacts,
    seed_summary,
    train_strategy,
)
from mixedprefix.utils.files import write_csv, write_json
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.harness.sweep")

CURVE_COLUMNS = ["size", "strategy", "partition", "seed", "log_ppl", "ci_low", "ci_high", "n_tokens"]


def size_variant(size: int) -> str:
    return f"size={size}"


def check_sizes(sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ConfigError("at least one size is required")
    if any(s < 1 for s in sizes):
        raise ConfigError("sizes must be positive", {"sizes": sizes})
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError("sizes must be strictly ascending", {"sizes": sizes})
    return sizes


def context_rows(data: SeedData) -> Dict[str, list[int]]:
    """Training-split row indices per context label, in split order."""
    rows: Dict[str, list[int]] = {}
    for i, label in enumerate(data.labels("train")):
        rows.setdefault(label, []).append(i)
    return rows


@dataclass
class SweepReport:
    config_hash: str
    sizes: list[int]
    results: list[PartitionResult] = field(default_factory=list)
    status: str = "ok"
    failure: Optional[Dict[str, Any]] = None

    def curve_rows(self) -> list[Dict[str, Any]]:
        rows = []
        for r in self.results:
            rows.append(
                {
                    "size": int(r.variant.split("=", 1)[1]),
                    "strategy": r.strategy,
                    "partition": r.partition,
                    "seed": r.seed,
                    "log_ppl": r.log_ppl,
                    "ci_low": r.ci_low,
                    "ci_high": r.ci_high,
                    "n_tokens": r.n_tokens,
                }
            )
        return sorted(rows, key=lambda x: (x["partition"], x["strategy"], x["size"], x["seed"]))

    def medians(self, partition: str) -> Dict[str, list[tuple[int, float]]]:
        """Median log perplexity over seeds, per strategy, as (size, value) points."""
        values: Dict[tuple[str, int], list[float]] = {}
        for row in self.curve_rows():
            if row["partition"] == partition and row["log_ppl"] is not None:
                values.setdefault((row["strategy"], row["size"]), []).append(row["log_ppl"])
        out: Dict[str, list[tuple[int, float]]] = {}
        for (strategy, size), v in sorted(values.items()):
            out.setdefault(strategy, []).append((size, statistics.median(v)))
        return out

    def to_dict(self) -> Dict[str, Any]:
        per_size = {
            size_variant(s): seed_summary([r for r in self.results if r.variant == size_variant(s)]) for s in self.sizes
        }
        return {
            "status": self.status,
            "failure": self.failure,
            "config_hash": self.config_hash,
            "sizes": self.sizes,
            "curve": self.curve_rows(),
            "summary": per_size,
        }

    def write(self, run_dir: Path) -> None:
        write_json(run_dir / "sweep.json", self.to_dict())
        write_csv(run_dir / "curve.csv", CURVE_COLUMNS, self.curve_rows())
        series = {
            f"{strategy} ({partition})": [(math.log2(size), v) for size, v in points]
            for partition in ("test-seen", "test-unseen")
            for strategy, points in self.medians(partition).items()
        }
        write_line_chart(
            run_dir / "plot.svg",
            series,
            "Log perplexity vs training sentences per context",
            "log2 sentences per context",
            "nats / token",
        )


def data_efficiency_sweep(config: ExperimentConfig, sizes: Sequence[int]) -> SweepReport:
    sizes = check_sizes(sizes)
    run_dir = config.run_dir() / "sweep"
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    report = SweepReport(config.config_hash(), sizes)
    timings = Timings()
    stage = ["setup"]

    with failure_marker(report, run_dir, timings, stage):
        for seed in config.seeds:
            seed_dir = run_dir / f"seed{seed}"
            stage[0] = f"seed{seed}/data"
            with timings.stage(stage[0]):
                data = prepare_seed(config, seed)
                save_seed_artifacts(data, seed_dir)
                groups = context_rows(data)
                available = min((len(v) for v in groups.values()), default=0)
                if sizes[-1] > available:
                    raise ConfigError(
                        f"size {sizes[-1]} exceeds the {available} training sentences of the smallest context",
                        {"size": sizes[-1], "available": available, "seed": seed},
                    )
            stage[0] = f"seed{seed}/backbone"
            with timings.stage(stage[0]):
                backbone, _ = prepare_backbone(config, data, seed_dir)

            train_all = data.examples("train")
            val = data.examples("val")
            for size in sizes:
                rows = sorted(i for g in groups.values() for i in g[:size])
                train = [train_all[i] for i in rows]
                for kind in config.strategies:
                    stage[0] = f"seed{seed}/{size_variant(size)}/{kind}"
                    with timings.stage(stage[0]):
                        strategy = build_strategy(config, data, kind, backbone)
                        train_strategy(strategy, train, val, config, seed, f"{kind}@{size}")
                        report.results.extend(evaluate_strategy(config, data, strategy, variant=size_variant(size)))
        stage[0] = "report"
        report.write(run_dir)
    log.info("sweep over sizes %s finished", sizes)
    return report
