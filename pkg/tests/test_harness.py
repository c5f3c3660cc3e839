from __future__ import annotations

import itertools
import json
import statistics

import numpy as np
import pytest

from mixedprefix.autodiff import Graph
from mixedprefix.corpus import Corpus, Example
from mixedprefix.errors import ConfigError, ContractViolation, UnknownFeatureValueError
from mixedprefix.harness import runner
from mixedprefix.harness.analysis import (
    distinctive_utterances,
    export_prefix_embeddings,
    parent_map,
    pca_2d,
    prompted_generation,
)
from mixedprefix.harness.compare import compare_mlp_architectures, multi_feature_compare
from mixedprefix.harness.evaluation import ALL_CONTEXTS, score_examples, summarize, weighted_context_mean
from mixedprefix.harness.runner import load_run_strategy, run_experiment, seed_summary
from mixedprefix.harness.sweep import check_sizes, data_efficiency_sweep
from mixedprefix.lm.model import lm_forward, sequence_nll
from mixedprefix.prefix import FeatureSchema, MetHyperparams, PrefixConfig, encode_context, prefix_activations
from mixedprefix.strategies import EncodedExample, make_strategy
from mixedprefix.utils.files import read_csv, read_json

SMALL_PREFIX = PrefixConfig(embed_dim=4, hidden=6)


# ------------------------------------------------------------
# Full runs on the smoke config
# ------------------------------------------------------------


def test_smoke_run_writes_every_artifact(smoke_config):
    report = run_experiment(smoke_config)
    run_dir = smoke_config.run_dir()
    for name in ("config.json", "metrics.json", "results.csv", "timings.json"):
        assert (run_dir / name).exists(), name
    assert not (run_dir / "FAILED.json").exists()
    seed_dir = run_dir / "seed0"
    for name in ("schema.json", "tokenizer.json", "oracle.csv", "backbone.ckpt"):
        assert (seed_dir / name).exists(), name
    for kind in smoke_config.strategies:
        assert (seed_dir / f"{kind}.ckpt").exists(), kind
    assert len(report.results) == 2 * len(smoke_config.strategies)
    metrics = read_json(run_dir / "metrics.json")
    assert metrics["status"] == "ok"
    assert metrics["config_hash"] == smoke_config.config_hash()
    assert set(metrics["summary"]) == {"test-seen", "test-unseen"}
    assert set(metrics["parameters"]) == set(smoke_config.strategies)


def test_reported_numbers_are_consistent(smoke_config):
    report = run_experiment(smoke_config.with_overrides(strategies=["met", "prefix-complete-pool"]))
    run_dir = smoke_config.with_overrides(strategies=["met", "prefix-complete-pool"]).run_dir()
    for result in report.results:
        assert result.ci_low <= result.log_ppl <= result.ci_high
        assert weighted_context_mean(result) == pytest.approx(result.log_ppl, rel=1e-12)
    unseen = report.get("met", "test-unseen", 0)
    assert [c.context for c in unseen.contexts] == ["domain=domain_2"]

    csv_rows = read_csv(run_dir / "results.csv")
    metrics = read_json(run_dir / "metrics.json")
    json_totals = {(r["strategy"], r["partition"]): r["log_ppl"] for r in metrics["results"]}
    csv_totals = {(r["strategy"], r["partition"]): float(r["log_ppl"]) for r in csv_rows if r["context"] == ALL_CONTEXTS}
    assert csv_totals == json_totals


def test_metrics_do_not_depend_on_output_dir(tmp_path, smoke_config):
    cfg = smoke_config.with_overrides(strategies=["met", "finetune-no-pool"])
    a = cfg.with_overrides(out=tmp_path / "a")
    b = cfg.with_overrides(out=tmp_path / "b")
    run_experiment(a)
    run_experiment(b)
    assert (a.run_dir() / "metrics.json").read_bytes() == (b.run_dir() / "metrics.json").read_bytes()
    assert (a.run_dir() / "results.csv").read_bytes() == (b.run_dir() / "results.csv").read_bytes()


def test_metrics_do_not_depend_on_worker_count(tmp_path, smoke_config):
    cfg = smoke_config.with_overrides(strategies=["met", "conditional-finetune"], eval_batch_size=2)
    one = cfg.with_overrides(out=tmp_path / "one", workers=1)
    three = cfg.with_overrides(out=tmp_path / "three", workers=3)
    run_experiment(one)
    run_experiment(three)
    assert (one.run_dir() / "metrics.json").read_bytes() == (three.run_dir() / "metrics.json").read_bytes()


def test_failure_leaves_a_marker(monkeypatch, smoke_config):
    def boom(*args, **kwargs):
        raise RuntimeError("evaluation exploded")

    monkeypatch.setattr(runner, "evaluate_strategy", boom)
    cfg = smoke_config.with_overrides(strategies=["met"])
    with pytest.raises(RuntimeError):
        run_experiment(cfg)
    failed = read_json(cfg.run_dir() / "FAILED.json")
    assert failed["stage"] == "seed0/met"
    assert failed["error"] == "RuntimeError"
    assert read_json(cfg.run_dir() / "metrics.json")["status"] == "failed"
    assert (cfg.run_dir() / "timings.json").exists()


def test_trained_strategy_reloads_from_the_run(smoke_config):
    cfg = smoke_config.with_overrides(strategies=["met"])
    report = run_experiment(cfg)
    strategy, data, _ = load_run_strategy(cfg.run_dir(), 0, "met")
    again = runner.evaluate_strategy(cfg, data, strategy)
    assert [r.log_ppl for r in again] == pytest.approx([r.log_ppl for r in report.results], rel=1e-12)
    with pytest.raises(ConfigError):
        load_run_strategy(cfg.run_dir(), 0, "finetune-no-pool")


# ------------------------------------------------------------
# Summaries
# ------------------------------------------------------------


def test_summary_counts_strict_wins(backbone, schema, tokenizer, examples):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    scores = score_examples(s, examples, batch_size=5)
    labels = [f"domain={ex.context['domain']}" for ex in examples]
    results = []
    for seed, (met, other) in enumerate([(1.0, 2.0), (3.0, 3.0), (2.0, 1.0)]):
        for kind, value in (("met", met), ("prefix-no-pool", other)):
            r = summarize(scores, labels, kind, "test-seen", seed)
            r.log_ppl = value
            results.append(r)
    out = seed_summary(results)["test-seen"]
    assert out["met_wins"]["prefix-no-pool"] == {"wins": 1, "seeds": 3}
    assert out["median"] == {"met": 2.0, "prefix-no-pool": 2.0}


def test_empty_partition_reports_no_numbers(backbone, schema, tokenizer):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    result = summarize(score_examples(s, []), [], "met", "test-unseen", 0)
    assert result.log_ppl is None and result.n_sentences == 0


def test_chunked_scoring_matches_one_batch(backbone, schema, tokenizer, examples):
    s = make_strategy("finetune-complete-pool", backbone, schema, tokenizer)
    whole = score_examples(s, examples, batch_size=len(examples))
    chunked = score_examples(s, examples, batch_size=3, workers=4)
    np.testing.assert_allclose(chunked.nll, whole.nll, rtol=1e-12)
    assert np.array_equal(chunked.tokens, whole.tokens)


# ------------------------------------------------------------
# Sweep and paired comparisons
# ------------------------------------------------------------


@pytest.mark.parametrize("sizes", [[], [0, 4], [4, 2], [4, 4]])
def test_sweep_sizes_are_checked(sizes):
    with pytest.raises(ConfigError):
        check_sizes(sizes)


def test_sweep_size_beyond_the_smallest_context(smoke_config):
    cfg = smoke_config.with_overrides(strategies=["met"])
    with pytest.raises(ConfigError):
        data_efficiency_sweep(cfg, [1000])
    assert read_json(cfg.run_dir() / "sweep" / "FAILED.json")["stage"] == "seed0/data"


def test_single_point_sweep(smoke_config):
    cfg = smoke_config.with_overrides(strategies=["met", "prefix-complete-pool"])
    report = data_efficiency_sweep(cfg, [2])
    sweep_dir = cfg.run_dir() / "sweep"
    assert (sweep_dir / "plot.svg").read_text(encoding="utf-8").lstrip().startswith("<")
    rows = read_csv(sweep_dir / "curve.csv")
    assert len(rows) == 4
    assert {r["size"] for r in rows} == {"2"}
    assert set(report.medians("test-seen")) == {"met", "prefix-complete-pool"}


def test_multi_feature_compare_needs_two_features(smoke_config):
    with pytest.raises(ConfigError):
        multi_feature_compare(smoke_config)


def test_mlp_comparison_reports_both_parameter_counts(smoke_config):
    report = compare_mlp_architectures(smoke_config)
    assert report.parameters["independent"]["met"] > report.parameters["shared"]["met"]
    pairs = report.pairs()
    assert {p["partition"] for p in pairs} == {"test-seen", "test-unseen"}
    for p in pairs:
        assert p["delta"] == pytest.approx(p["treatment"] - p["baseline"])
    assert (smoke_config.run_dir() / "compare-mlp" / "compare-mlp.csv").exists()


# ------------------------------------------------------------
# Distinctive utterances
# ------------------------------------------------------------


def brute_force_nll(strategy, ids, context):
    key = encode_context(strategy.schema, context)
    g = Graph(grad_enabled=False)
    batch = strategy.collate([EncodedExample(ids, context)])
    out = lm_forward(strategy.backbone, g, batch.inputs, prefix_activations(strategy.params, key).rebind(g))
    sums, counts = sequence_nll(out.logits.value, batch.targets)
    return float(sums[0] / counts[0])


def test_distinctive_ranking_matches_brute_force(backbone, schema, tokenizer, examples):
    s = make_strategy("met", backbone, schema, tokenizer, MetHyperparams(), SMALL_PREFIX)
    for t in s.params.tensors.values():
        t.data += np.random.default_rng(0).normal(0.0, 0.5, t.shape)
    ranked = distinctive_utterances(s, examples, "domain", "d1", k=len(examples))
    expected = []
    for i, ex in enumerate(examples):
        own = brute_force_nll(s, ex.ids, {"domain": "d1"})
        rest = statistics.fmean([brute_force_nll(s, ex.ids, {"domain": v}) for v in ("d0", "d2")])
        expected.append((rest - own, i))
    order = [i for _, i in sorted(expected, key=lambda x: -x[0])]
    assert [r.index for r in ranked] == order
    for r in ranked:
        assert r.score == pytest.approx(dict((i, sc) for sc, i in expected)[r.index], abs=1e-10)
    assert [r.rank for r in ranked] == list(range(1, len(examples) + 1))


def test_distinctive_ties_keep_input_order(backbone, schema, tokenizer, examples):
    s = make_strategy("met", backbone, schema, tokenizer, MetHyperparams(), SMALL_PREFIX)
    repeated = [examples[0], examples[1], examples[0], examples[1]]
    ranked = distinctive_utterances(s, repeated, "domain", "d0", k=4)
    for a, b in itertools.combinations(ranked, 2):
        if a.score == b.score:
            assert a.index < b.index
    assert len(distinctive_utterances(s, repeated, "domain", "d0", k=2)) == 2


def test_distinctive_rejects_unknown_values(backbone, schema, tokenizer, examples):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    with pytest.raises(UnknownFeatureValueError):
        distinctive_utterances(s, examples, "domain", "nope")


# ------------------------------------------------------------
# Generation
# ------------------------------------------------------------


def test_zero_generations_write_an_empty_file(tmp_path, backbone, schema, tokenizer):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    path = tmp_path / "gen.jsonl"
    assert prompted_generation(s, {"domain": "d0"}, "a", 0, path) == []
    assert path.read_text(encoding="utf-8") == ""


def test_greedy_generation_is_repeatable(tmp_path, backbone, schema, tokenizer):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    a = prompted_generation(s, {"domain": "d1"}, "a b zzz", 2, tmp_path / "a.jsonl", max_len=6)
    b = prompted_generation(s, {"domain": "d1"}, "a b zzz", 2, tmp_path / "b.jsonl", max_len=6)
    assert a == b
    assert a[0]["tokens"][:4] == [tokenizer.bos_id, tokenizer.stoi["a"], tokenizer.stoi["b"], tokenizer.unk_id]
    lines = (tmp_path / "a.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["index"] for line in lines] == [0, 1]


def test_sampled_generation_follows_the_seed(tmp_path, backbone, schema, tokenizer):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    a = prompted_generation(s, {"domain": "d1"}, "a", 3, tmp_path / "a.jsonl", "temperature", 6, seed=4)
    b = prompted_generation(s, {"domain": "d1"}, "a", 3, tmp_path / "b.jsonl", "temperature", 6, seed=4)
    assert [r["tokens"] for r in a] == [r["tokens"] for r in b]


# ------------------------------------------------------------
# Prefix embeddings
# ------------------------------------------------------------


def test_pca_preserves_distances_in_the_top_subspace():
    X = np.random.default_rng(3).normal(size=(7, 5))
    coords, explained = pca_2d(X)
    Xc = X - X.mean(axis=0)
    _, vecs = np.linalg.eigh(Xc.T @ Xc)
    ref = Xc @ vecs[:, -2:]
    for i, j in itertools.combinations(range(7), 2):
        assert np.linalg.norm(coords[i] - coords[j]) == pytest.approx(np.linalg.norm(ref[i] - ref[j]), abs=1e-8)
    assert explained[0] >= explained[1] > 0
    for axis in range(2):
        loadings = np.linalg.lstsq(Xc, coords[:, axis], rcond=None)[0]
        assert loadings[np.argmax(np.abs(loadings))] > 0


def test_pca_of_a_single_row():
    coords, explained = pca_2d(np.ones((1, 4)))
    assert coords.tolist() == [[0.0, 0.0]]
    assert explained.tolist() == [0.0, 0.0]


def test_export_needs_a_prefix_strategy(tmp_path, backbone, schema, tokenizer):
    s = make_strategy("finetune-complete-pool", backbone, schema, tokenizer)
    with pytest.raises(ContractViolation):
        export_prefix_embeddings(s, tmp_path / "e.csv")


def test_export_rows_and_activations(tmp_path, backbone, schema, tokenizer):
    s = make_strategy("met", backbone, schema, tokenizer, None, SMALL_PREFIX)
    export = export_prefix_embeddings(s, tmp_path / "e.csv", include_activations=True)
    rows = read_csv(tmp_path / "e.csv")
    assert len(rows) == len(export.rows) == 3
    assert [r["value"] for r in rows] == ["d0", "d1", "d2"]
    out_dim = 2 * backbone.config.n_layers * backbone.config.d_model
    assert f"h{out_dim - 1}" in rows[0] and "e3" in rows[0]


def test_export_scores_children_against_parents(tmp_path, backbone, two_feature_schema, tokenizer):
    s = make_strategy("met", backbone, two_feature_schema, tokenizer, None, SMALL_PREFIX)
    parents = {"p0": "c0", "p1": "c1", "p2": "c0", "p3": "c1"}
    export = export_prefix_embeddings(s, tmp_path / "e.csv", parents=parents, seed=1)
    assert export.silhouette["n"] == 4
    assert -1.0 <= export.silhouette["by_parent"] <= 1.0
    assert -1.0 <= export.silhouette["shuffled"] <= 1.0


def test_silhouette_only_scores_the_child_feature(tmp_path, backbone, tokenizer):
    schema = FeatureSchema(["category", "product"], capacity=4)
    schema.register(
        [
            {"category": "p0", "product": "p0"},
            {"category": "c1", "product": "p1"},
            {"category": "p0", "product": "p2"},
            {"category": "c1", "product": "p3"},
        ]
    )
    s = make_strategy("met", backbone, schema.freeze(), tokenizer, None, SMALL_PREFIX)
    parents = {"p0": "p0", "p1": "c1", "p2": "p0", "p3": "c1"}
    export = export_prefix_embeddings(s, tmp_path / "e.csv", parents=parents, seed=1, child="product")
    assert export.silhouette["n"] == 4


def test_parent_map_takes_the_majority():
    corpus = Corpus(
        [
            Example(("a",), {"category": "c0", "product": "p0"}),
            Example(("a",), {"category": "c0", "product": "p0"}),
            Example(("a",), {"category": "c1", "product": "p0"}),
            Example(("a",), {"category": "c1", "product": "p1"}),
        ],
        ["category", "product"],
    )
    assert parent_map(corpus, "product", "category") == {"p0": "c0", "p1": "c1"}
