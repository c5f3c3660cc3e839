"""
mixedprefix command line.

Usage:
    mixedprefix --config configs/standard.json train
    mixedprefix --config configs/standard.json sweep --sizes 32,256,2048
    mixedprefix --config configs/standard.json --seed 0 distinctive --strategy met --feature domain --value domain_3
    mixedprefix lmm shrinkage --sizes 1,4,16,64

Every command prints one JSON object on stdout. Failures print
{"ok": false, "error": ..., "message": ..., "payload": ...} and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from mixedprefix.config import get_settings, load_env_files
from mixedprefix.corpus.ingest import save_jsonl
from mixedprefix.errors import ConfigError, MixedPrefixError
from mixedprefix.harness import (
    ExperimentConfig,
    compare_mlp_architectures,
    data_efficiency_sweep,
    distinctive_utterances,
    export_prefix_embeddings,
    load_run_strategy,
    multi_feature_compare,
    parent_map,
    prepare_backbone,
    prepare_seed,
    prompted_generation,
    run_experiment,
)
from mixedprefix.harness.runner import error_dict, evaluate_strategy, save_seed_artifacts
from mixedprefix.lmm import GroupedDataset, fit_complete_pool, fit_mixed, fit_no_pool, shrinkage_curve, write_fit
from mixedprefix.strategies import KINDS
from mixedprefix.utils.files import dumps_json, write_csv, write_json
from mixedprefix.utils.logging import get_logger, setup_logging

log = get_logger("mixedprefix.cli")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def parse_context(text: Optional[str]) -> Dict[str, Optional[str]]:
    """`domain=domain_3,topic=*` -> {"domain": "domain_3", "topic": None}."""
    out: Dict[str, Optional[str]] = {}
    for part in (text or "").split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"context entries must look like feature=value, got '{part}'")
        k, v = part.split("=", 1)
        out[k.strip()] = None if v.strip() in ("", "*") else v.strip()
    return out


# ------------------------------------------------------------
# Shared option handling
# ------------------------------------------------------------


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return config.with_overrides(seed=args.seed, out=args.out, workers=args.workers)


def _run_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return Path(args.run) if getattr(args, "run", None) else config.run_dir()


def _seed(args: argparse.Namespace, config: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _loaded(args: argparse.Namespace):
    config = load_config(args)
    return load_run_strategy(_run_dir(args, config), _seed(args, config), args.strategy)


# ------------------------------------------------------------
# Commands
# ------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    seed = _seed(args, config)
    out = Path(config.out_dir) / f"corpus-seed{seed}"
    data = prepare_seed(config, seed, sentences_per_context=args.sentences_per_context)
    save_jsonl(data.corpus, out / "corpus.jsonl")
    if data.synth is not None and data.synth.base_corpus is not None:
        save_jsonl(data.synth.base_corpus, out / "base.jsonl")
    save_seed_artifacts(data, out)
    return {
        "ok": True,
        "out": str(out),
        "sentences": len(data.corpus),
        "partitions": {k: len(v) for k, v in data.parts.items()},
        "attempts": data.synth.attempts if data.synth is not None else None,
    }


def cmd_pretrain(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    seed = _seed(args, config)
    seed_dir = config.run_dir() / f"seed{seed}"
    data = prepare_seed(config, seed)
    save_seed_artifacts(data, seed_dir)
    _, summary = prepare_backbone(config, data, seed_dir)
    return {"ok": True, "checkpoint": str(seed_dir / "backbone.ckpt"), "pretraining": summary}


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    report = run_experiment(config)
    return {"ok": True, "run_dir": str(config.run_dir()), "config_hash": report.config_hash, "summary": report.summary()}


def cmd_eval(args: argparse.Namespace) -> Dict[str, Any]:
    strategy, data, config = _loaded(args)
    results = evaluate_strategy(config, data, strategy)
    payload = {"ok": True, "strategy": strategy.kind, "seed": data.seed, "results": [r.to_dict() for r in results]}
    write_json(_run_dir(args, config) / f"seed{data.seed}" / f"eval-{strategy.kind}.json", payload)
    return payload


def cmd_sweep(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    report = data_efficiency_sweep(config, args.sizes)
    return {"ok": True, "out": str(config.run_dir() / "sweep"), "summary": report.to_dict()["summary"]}


def cmd_multifeat(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    report = multi_feature_compare(config)
    return {"ok": True, "out": str(config.run_dir() / report.name), "summary": report.summary()}


def cmd_compare_mlp(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    report = compare_mlp_architectures(config)
    return {"ok": True, "out": str(config.run_dir() / report.name), "parameters": report.parameters, "summary": report.summary()}


def cmd_distinctive(args: argparse.Namespace) -> Dict[str, Any]:
    strategy, data, config = _loaded(args)
    rows = distinctive_utterances(strategy, data.examples(args.partition), args.feature, args.value, args.k)
    payload = {
        "ok": True,
        "strategy": strategy.kind,
        "feature": args.feature,
        "value": args.value,
        "partition": args.partition,
        "top": [r.to_dict() for r in rows],
    }
    write_json(_run_dir(args, config) / f"seed{data.seed}" / f"distinctive-{strategy.kind}-{args.value}.json", payload)
    return payload


def cmd_generate(args: argparse.Namespace) -> Dict[str, Any]:
    strategy, data, config = _loaded(args)
    out = Path(args.output) if args.output else _run_dir(args, config) / f"seed{data.seed}" / f"generations-{strategy.kind}.jsonl"
    context = {f: None for f in data.features} | parse_context(args.context)
    records = prompted_generation(
        strategy, context, args.prompt, args.n, out, args.sampler, args.max_len, data.seed, args.temperature
    )
    return {"ok": True, "out": str(out), "generations": [r["text"] for r in records]}


def cmd_export_prefixes(args: argparse.Namespace) -> Dict[str, Any]:
    strategy, data, config = _loaded(args)
    out = Path(args.output) if args.output else _run_dir(args, config) / f"seed{data.seed}" / f"prefixes-{strategy.kind}.csv"
    parents = None
    if args.silhouette and len(data.features) >= 2:
        parents = parent_map(data.parts["train"], data.features[1], data.features[0])
    export = export_prefix_embeddings(strategy, out, args.activations, parents, data.seed, data.features[1] if parents else None)
    return {"ok": True, "out": str(out), **export.to_dict()}


def cmd_lmm(args: argparse.Namespace) -> Dict[str, Any]:
    if args.lmm_command == "shrinkage":
        rows = shrinkage_curve(args.sizes, args.sigma, args.noise, args.mu, args.seed or 0)
        if args.output:
            write_csv(Path(args.output), list(rows[0]), rows)
        return {"ok": True, "rows": rows}

    data = GroupedDataset.from_csv(Path(args.csv), args.x or [], args.y, args.group)
    if args.method == "complete-pool":
        fit: Any = fit_complete_pool(data)
        payload = {"coefficients": fit.tolist(), "columns": data.columns}
    elif args.method == "no-pool":
        fit = fit_no_pool(data)
        payload = fit.to_dict()
    else:
        sigma = args.sigma[0] if args.sigma and len(args.sigma) == 1 else args.sigma
        fit = fit_mixed(data, args.mode, sigma=sigma, noise=args.noise, random_slopes=args.slopes)
        payload = fit.to_dict()
    if args.output:
        write_fit(Path(args.output), fit, data.columns)
    return {"ok": True, "method": args.method, **payload}


# ------------------------------------------------------------
# Parser
# ------------------------------------------------------------


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="Experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="Run only this seed")
    parser.add_argument("--out", type=Path, default=default, help="Output directory (overrides the config)")
    parser.add_argument("--workers", type=int, default=default, help="Evaluation threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixedprefix", description="Mixed-effects prefix-tuning experiments.")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _global_options(p, suppress=True)
        return p

    def trained(p: argparse.ArgumentParser) -> None:
        p.add_argument("--run", type=Path, help="Run directory (default: derived from the config)")
        p.add_argument("--strategy", choices=KINDS, default="met")

    p = command("synth", "Generate a synthetic corpus with its oracle table")
    p.add_argument("--sentences-per-context", type=int)
    p.set_defaults(func=cmd_synth)

    command("pretrain", "Pretrain the backbone for one seed").set_defaults(func=cmd_pretrain)
    command("train", "Train and evaluate every configured strategy").set_defaults(func=cmd_train)

    p = command("eval", "Re-evaluate a trained strategy")
    trained(p)
    p.set_defaults(func=cmd_eval)

    p = command("sweep", "Data-efficiency sweep over training sentences per context")
    p.add_argument("--sizes", type=_int_list, required=True, help="Ascending sizes, e.g. 32,256,2048")
    p.set_defaults(func=cmd_sweep)

    command("multifeat", "Single- vs multi-feature contexts").set_defaults(func=cmd_multifeat)
    command("compare-mlp", "Shared vs independent prefix MLP").set_defaults(func=cmd_compare_mlp)

    p = command("distinctive", "Sentences best explained by one feature value")
    trained(p)
    p.add_argument("--feature", required=True)
    p.add_argument("--value", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--partition", default="test-seen", choices=["train", "val", "test-seen", "test-unseen"])
    p.set_defaults(func=cmd_distinctive)

    p = command("generate", "Generate continuations of a prompt under a context")
    trained(p)
    p.add_argument("--context", help="feature=value pairs, comma separated")
    p.add_argument("--prompt", default="")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--sampler", choices=["greedy", "temperature"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_generate)

    p = command("export-prefixes", "Export prefix embeddings with a 2-D PCA projection")
    trained(p)
    p.add_argument("--output", type=Path)
    p.add_argument("--activations", action="store_true", help="Also export flattened prefix activations")
    p.add_argument("--silhouette", action="store_true", help="Score secondary-value clustering by parent value")
    p.set_defaults(func=cmd_export_prefixes)

    p = command("lmm", "Mixed-effects regression reference")
    lmm = p.add_subparsers(dest="lmm_command", required=True)
    fit = lmm.add_parser("fit", help="Fit a CSV of observations")
    fit.add_argument("--csv", type=Path, required=True)
    fit.add_argument("--x", type=lambda s: [c for c in s.split(",") if c], help="Predictor columns, comma separated")
    fit.add_argument("--y", default="y")
    fit.add_argument("--group", default="group")
    fit.add_argument("--method", choices=["complete-pool", "no-pool", "mixed"], default="mixed")
    fit.add_argument("--mode", choices=["known", "estimated"], default="estimated")
    fit.add_argument("--sigma", type=_float_list, help="Random-effect scale(s), known mode")
    fit.add_argument("--noise", type=float, help="Noise scale, known mode")
    fit.add_argument("--slopes", action="store_true", help="Random slopes as well as intercepts")
    fit.add_argument("--output", type=Path)
    shrink = lmm.add_parser("shrinkage", help="Shrinkage of group offsets as a function of group size")
    shrink.add_argument("--sizes", type=_int_list, default=[1, 4, 16, 64])
    shrink.add_argument("--sigma", type=float, default=1.0)
    shrink.add_argument("--noise", type=float, default=1.0)
    shrink.add_argument("--mu", type=float, default=0.0)
    shrink.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_lmm)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_env_files()
    settings = get_settings()
    # stdout carries the command result
    setup_logging(settings.LOG_LEVEL, settings.LOG_FORMAT == "json", settings.LOG_FILE, sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except MixedPrefixError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(json.dumps(exc.to_dict(), sort_keys=True, default=str))
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(json.dumps(error_dict(exc), sort_keys=True, default=str))
        return 1
    sys.stdout.write(dumps_json(result))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
