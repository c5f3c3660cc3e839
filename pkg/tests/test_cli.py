from __future__ import annotations

import json
import logging

import pytest

from mixedprefix.cli import main, parse_context
from mixedprefix.errors import ConfigError
from mixedprefix.utils.files import read_csv

from conftest import CONFIGS


@pytest.fixture(autouse=True)
def drop_cli_handlers():
    # main() points the root handler at the captured stderr
    yield
    logging.getLogger().handlers.clear()


def run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


def test_parse_context():
    assert parse_context("domain=d1, topic=*") == {"domain": "d1", "topic": None}
    assert parse_context(None) == {}
    with pytest.raises(ConfigError):
        parse_context("domain")


def test_lmm_shrinkage(capsys, tmp_path):
    code, out = run(capsys, "lmm", "shrinkage", "--sizes", "1,4,16", "--output", str(tmp_path / "curve.csv"))
    assert code == 0 and out["ok"] is True
    assert [r["n"] for r in out["rows"]] == [1, 4, 16]
    assert len(read_csv(tmp_path / "curve.csv")) == 3


def test_lmm_fit_from_csv(capsys, tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("group,x,y\na,0,1\na,1,2\na,2,3\nb,0,2\nb,1,4\nb,2,6\n", encoding="utf-8")
    code, out = run(capsys, "lmm", "fit", "--csv", str(path), "--x", "x", "--method", "no-pool")
    assert code == 0
    assert out["coefficients"]["a"] == pytest.approx([1.0, 1.0])
    assert out["coefficients"]["b"] == pytest.approx([2.0, 2.0])

    fit_path = tmp_path / "fit.json"
    code, out = run(
        capsys, "lmm", "fit", "--csv", str(path), "--mode", "known", "--sigma", "1", "--noise", "1", "--output", str(fit_path)
    )
    assert code == 0 and out["mode"] == "known"
    assert json.loads(fit_path.read_text(encoding="utf-8"))["columns"] == ["intercept"]


def test_lmm_fit_reports_bad_csv(capsys, tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("group,y\na,1\n", encoding="utf-8")
    code, out = run(capsys, "lmm", "fit", "--csv", str(path), "--x", "x")
    assert code == 1
    assert out["error"] == "CorpusFormatError"
    assert out["payload"]["missing"] == ["x"]


def test_missing_config_is_a_clean_failure(capsys, tmp_path):
    code, out = run(capsys, "--config", str(tmp_path / "nope.json"), "train")
    assert code == 1
    assert out == {
        "ok": False,
        "error": "ConfigError",
        "message": out["message"],
        "payload": {"path": str(tmp_path / "nope.json")},
    }


def test_synth_writes_the_corpus(capsys, tmp_path):
    code, out = run(capsys, "--config", str(CONFIGS / "smoke.json"), "--out", str(tmp_path), "synth", "--sentences-per-context", "4")
    assert code == 0
    assert out["sentences"] == 12
    corpus_dir = tmp_path / "corpus-seed0"
    assert len((corpus_dir / "corpus.jsonl").read_text(encoding="utf-8").splitlines()) == 12
    assert (corpus_dir / "oracle.csv").exists()


def test_train_then_inspect(capsys, tmp_path):
    base = ["--config", str(CONFIGS / "smoke.json"), "--out", str(tmp_path)]
    code, out = run(capsys, *base, "train")
    assert code == 0 and set(out["summary"]) == {"test-seen", "test-unseen"}

    code, out = run(capsys, *base, "eval", "--strategy", "met")
    assert code == 0 and [r["partition"] for r in out["results"]] == ["test-seen", "test-unseen"]

    code, out = run(capsys, *base, "distinctive", "--feature", "domain", "--value", "domain_0", "--k", "3")
    assert code == 0 and len(out["top"]) <= 3

    code, out = run(capsys, *base, "generate", "--context", "domain=domain_1", "--prompt", "w01", "--n", "2", "--max-len", "4")
    assert code == 0 and len(out["generations"]) == 2

    code, out = run(capsys, *base, "export-prefixes", "--activations")
    assert code == 0 and out["n_rows"] == 2

    code, out = run(capsys, *base, "export-prefixes", "--strategy", "finetune-complete-pool")
    assert code == 1 and out["error"] == "ContractViolation"

    code, out = run(capsys, *base, "generate", "--context", "domain")
    assert code == 1 and out["error"] == "ConfigError"
