import csv
import io
import json

import pytest

from ksllm.cli import main
from ksllm.embedding import hash_embed

from .fixtures_qa import FIXTURE_DATASET, REPO

FIXTURE_CONFIG = str(REPO / "configs" / "fixture.yaml")


def run_cli(tmp_path, *argv):
    out = io.StringIO()
    code = main(
        [argv[0], "--config", FIXTURE_CONFIG,
         "--set", f"cache.dir={tmp_path / 'cache'}", "--set", f"output.path={tmp_path / 'out'}", *argv[1:]],
        out=out,
    )
    return code, out.getvalue()


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_reports(tmp_path):
    code, text = run_cli(tmp_path, "run", "--set", "method=ks_llm")
    assert code == 0
    assert text.startswith("# effective config\n")
    assert "method = 'ks_llm'" in text
    rows = read_csv(tmp_path / "out" / "fixture_ks_llm.csv")
    assert len(rows) == 1 and rows[0]["method"] == "ks_llm" and rows[0]["k"] == "2"
    assert (tmp_path / "out" / "fixture_ks_llm.jsonl").exists()


def test_override_precedence(tmp_path):
    code, text = run_cli(tmp_path, "run", "--set", "selection.k=4", "--format", "csv")
    assert code == 0 and "selection.k = 4" in text
    assert read_csv(tmp_path / "out" / "fixture_ks_llm.csv")[0]["k"] == "4"


def test_sweep_length_defaults(tmp_path):
    code, _ = run_cli(tmp_path, "sweep-length", "--format", "csv")
    assert code == 0
    rows = read_csv(tmp_path / "out" / "fixture_sweep_length.csv")
    assert [r["max_tokens"] for r in rows] == ["300", "500", "1000", "2000"]
    assert {r["method"] for r in rows} == {"standard_doc"}


def test_sweep_k_defaults(tmp_path):
    code, _ = run_cli(tmp_path, "sweep-k", "--format", "markdown")
    assert code == 0
    lines = (tmp_path / "out" / "fixture_sweep_k.md").read_text().splitlines()
    assert [l.split(" | ")[3] for l in lines[2:]] == ["1", "2", "3", "4", "5", "6"]


def test_score_reproduces_run(tmp_path):
    run_cli(tmp_path, "run", "--format", "csv", "--format", "jsonl")
    em = read_csv(tmp_path / "out" / "fixture_ks_llm.csv")[0]["em_percent"]
    code, text = run_cli(tmp_path, "score", "--predictions", str(tmp_path / "out" / "fixture_ks_llm.jsonl"))
    assert code == 0
    assert text.splitlines()[-1].endswith("," + em)


def test_score_perfect_predictions(tmp_path):
    preds = tmp_path / "p.jsonl"
    with open(FIXTURE_DATASET, encoding="utf-8") as src, open(preds, "w", encoding="utf-8") as dst:
        for line in src:
            rec = json.loads(line)
            dst.write(json.dumps({"id": rec["id"], "prediction": rec["answers"][0]}) + "\n")
    code, text = run_cli(tmp_path, "score", "--predictions", str(preds))
    assert code == 0 and text.splitlines()[-1].endswith(",100.00")


def test_gen_evidence_then_run(tmp_path):
    aug = tmp_path / "aug.jsonl"
    code, text = run_cli(tmp_path, "gen-evidence", "--out", str(aug))
    assert code == 0 and "6 generated" in text
    code, _ = run_cli(tmp_path, "run", "--set", f"dataset.path={aug}", "--format", "csv")
    assert code == 0
    assert read_csv(tmp_path / "out" / "fixture_ks_llm.csv")[0]["n_failed"] == "0"


def test_cache_stats(tmp_path):
    run_cli(tmp_path, "run", "--format", "csv")
    run_cli(tmp_path, "run", "--format", "csv")
    code, text = run_cli(tmp_path, "cache-stats")
    assert code == 0
    llm_line = next(l for l in text.splitlines() if l.startswith("llm:"))
    fields = dict(kv.split("=") for kv in llm_line.split()[1:])
    assert int(fields["hits"]) == int(fields["misses"]) == int(fields["entries"]) > 0


@pytest.mark.parametrize(
    "argv",
    [["bogus"], ["run", "--nope"], ["run", "--set", "nope=1"], ["sweep-k", "--ks", "0,1"], ["run", "--format", "xml"]],
)
def test_usage_errors_exit_1(tmp_path, argv):
    assert main(argv + ["--config", FIXTURE_CONFIG] if argv[0] != "bogus" else argv, out=io.StringIO()) == 1


def test_bad_dataset_exits_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    code, _ = run_cli(tmp_path, "run", "--set", f"dataset.path={bad}")
    assert code == 2
    code, _ = run_cli(tmp_path, "run", "--set", f"dataset.path={bad}", "--lenient")
    assert code == 0


def test_http_backends_end_to_end(tmp_path, stub_server, monkeypatch):
    """Real HTTP clients against a local stub speaking the chat and embeddings wire formats."""

    def handler(path, body):
        if path.endswith("/embeddings"):
            data = [{"index": i, "embedding": list(hash_embed(t, 16).values)} for i, t in enumerate(body["input"])]
            return 200, {"data": data}
        text = body["messages"][-1]["content"]
        content = "(Jamie Lee Curtis, birthdate, November 22 1958)" if "Triples:" in text else "Answer: Scorpio"
        return 200, {"choices": [{"message": {"role": "assistant", "content": content}}]}

    server = stub_server(handler)
    monkeypatch.setenv("STUB_KEY", "secret")
    code, text = run_cli(
        tmp_path, "run",
        "--set", "llm.kind=http", "--set", f"llm.base_url={server.url}/v1", "--set", "llm.model=stub-13b",
        "--set", "llm.api_key_env=STUB_KEY",
        "--set", "embedder.kind=remote", "--set", f"embedder.endpoint_url={server.url}/v1/embeddings",
        "--set", "embedder.model_name=stub-emb", "--set", "embedder.api_key_env=STUB_KEY",
        "--format", "csv",
    )
    assert code == 0, text
    assert "secret" not in text
    row = read_csv(tmp_path / "out" / "fixture_ks_llm.csv")[0]
    assert row["model"] == "stub-13b" and row["n_failed"] == "6"
    assert all(r["headers"]["Authorization"] == "Bearer secret" for r in server.requests)
    assert any(r["path"] == "/v1/embeddings" for r in server.requests)
