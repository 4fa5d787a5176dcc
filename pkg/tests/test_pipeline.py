import json

import pytest

from conftest import read_lines, synthetic_records
from repstab import pipeline
from repstab.cli import main
from repstab.config import Config
from repstab.errors import MissingArtifact, TraceRunFailed

FAST = {"train.max_epochs": 6, "train.patience": 3, "importance.k": 5, "run.deterministic": True}


@pytest.fixture
def cfg():
    return Config(FAST)


@pytest.fixture
def records():
    return synthetic_records(20)


def test_rerun_is_full_cache_hit(tmp_path, cfg, records):
    first = pipeline.run_trace(records, cfg, tmp_path)
    assert first.computed == len(records) and first.encoder_loaded
    before = first.cache.path.read_bytes()
    second = pipeline.run_trace(records, cfg, tmp_path)
    assert second.computed == 0 and second.cached == len(records)
    assert not second.encoder_loaded
    assert second.cache.path.read_bytes() == before


def test_changing_k_recomputes(tmp_path, cfg, records):
    pipeline.run_trace(records, cfg, tmp_path)
    other = pipeline.run_trace(records, cfg.with_overrides(**{"importance.k": 3}), tmp_path)
    assert other.computed == len(records) and other.cached == 0


def test_changed_text_is_recomputed(tmp_path, cfg, records):
    pipeline.run_trace(records, cfg, tmp_path)
    edited = list(records)
    edited[0] = type(records[0])(records[0].id, records[0].text + " extra", "benign", records[0].pair_id)
    run = pipeline.run_trace(edited, cfg, tmp_path)
    assert run.computed == 1


def test_resume_matches_uninterrupted(tmp_path, cfg, records):
    full = pipeline.run_trace(records, cfg, tmp_path / "a")
    partial = pipeline.run_trace(records, cfg, tmp_path / "b", stop_after=7)
    assert partial.computed == 7
    resumed = pipeline.run_trace(records, cfg, tmp_path / "b")
    assert resumed.cached == 7
    assert resumed.cache.path.read_bytes() == full.cache.path.read_bytes()


def test_mismatched_cache_lines_ignored(tmp_path, cfg, records, caplog):
    run = pipeline.run_trace(records[:4], cfg, tmp_path)
    lines = run.cache.path.read_text().splitlines()
    bad = json.loads(lines[0])
    bad["config_hash"] = "0" * 64
    run.cache.path.write_text("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
    again = pipeline.run_trace(records[:4], cfg, tmp_path)
    assert again.computed == 1
    assert "config hash mismatch" in caplog.text


def test_trace_failure_tolerance(tmp_path, cfg, records, monkeypatch):
    real = pipeline.trace_record

    def flaky(encoder, record, c, h):
        if record.id.startswith("a00"):
            raise RuntimeError("boom")
        return real(encoder, record, c, h)

    monkeypatch.setattr(pipeline, "trace_record", flaky)
    with pytest.raises(TraceRunFailed):
        pipeline.run_trace(records, cfg, tmp_path)


def test_cache_dir_env_override(tmp_path, cfg, records, monkeypatch):
    monkeypatch.setenv("REPSTAB_CACHE_DIR", str(tmp_path / "shared"))
    run = pipeline.run_trace(records[:2], cfg, tmp_path / "out")
    assert run.cache.path.parent == tmp_path / "shared"


def test_missing_artifacts(tmp_path, cfg, records):
    with pytest.raises(MissingArtifact, match="trace cache"):
        pipeline.run_train(records, cfg, tmp_path)
    pipeline.run_trace(records, cfg, tmp_path)
    with pytest.raises(MissingArtifact, match="detector.pt"):
        pipeline.run_detect(records, cfg, tmp_path)
    with pytest.raises(MissingArtifact):
        pipeline.run_eval_correlation(tmp_path / "none.jsonl", cfg, tmp_path)
    with pytest.raises(MissingArtifact):
        pipeline.encoder_identity(f"tiny:{tmp_path / 'nomodel'}")


def test_train_detect_eval_artifacts(tmp_path, cfg, records):
    pipeline.run_trace(records, cfg, tmp_path)
    trained, manifest = pipeline.run_train(records, cfg, tmp_path)
    rows, metrics = pipeline.run_detect(records, cfg, tmp_path)
    assert {"id", "label", "score", "prediction"} <= set(rows[0])
    assert metrics.n == len(records)
    summary = pipeline.run_eval_ranking(records, cfg, tmp_path)
    assert summary["grad"]["evaluated"] == 20
    for name in ("train_log.jsonl", "predictions.jsonl", "ndcg.jsonl", "ndcg_curve.jsonl", "recall_bins.jsonl"):
        assert all("manifest" in row for row in read_lines(tmp_path / name))
    for name in ("detect_metrics.json", "ranking_summary.json"):
        assert "manifest" in json.loads((tmp_path / name).read_text())
    m = json.loads((tmp_path / "manifest.train.json").read_text())
    assert m["manifest_hash"] == manifest.hash and "started" not in m


@pytest.mark.slow
def test_detect_on_training_corpus_beats_logged_validation(tmp_path, desk_setup):
    """Seen-data sanity on a setup where the detector has real signal to learn."""
    from repstab.corpus import ingest

    model_dir, corpus = desk_setup
    records = ingest(corpus).records
    cfg = Config({"encoder.name": f"tiny:{model_dir}", "run.deterministic": True})
    pipeline.run_trace(records, cfg, tmp_path)
    trained, _ = pipeline.run_train(records, cfg, tmp_path)
    _, metrics = pipeline.run_detect(records, cfg, tmp_path)
    assert metrics.f1 >= trained.best_val_f1


def test_self_transfer_in_equals_out(tmp_path, cfg, records):
    train, test = records[:30], records[30:]
    result = pipeline.run_transfer(train, test, test, cfg, tmp_path)
    assert result["in"] == result["out"]


def test_correlation_report(tmp_path, cfg):
    rows = tmp_path / "pairs.jsonl"
    rows.write_text("\n".join(json.dumps({"family": "f", "group": g, "accuracy": i, "ndcg": i * (1 if g == "x" else -1)})
                              for g in ("x", "y") for i in range(5)) + "\n")
    out = pipeline.run_eval_correlation(rows, cfg, tmp_path)
    assert [r["rho"] for r in out] == [1.0, -1.0]
    assert all("manifest" in r for r in read_lines(tmp_path / "correlation.jsonl"))


# -- command line --------------------------------------------------------


def test_cli_end_to_end(tmp_path, toy_corpus, capsys):
    out = str(tmp_path / "run")
    common = ["--corpus", str(toy_corpus), "--out-dir", out, "--k", "5", "--deterministic"]
    cfg = tmp_path / "fast.cfg"
    cfg.write_text("train.max_epochs = 6\ntrain.patience = 3\n")
    assert main(["trace", *common, "--config", str(cfg)]) == 0
    assert main(["train", *common, "--config", str(cfg)]) == 0
    assert main(["detect", *common, "--config", str(cfg)]) == 0
    assert main(["eval-ranking", *common, "--method", "grad"]) == 0
    assert main(["report", "--out-dir", out]) == 0
    report = (tmp_path / "run" / "report.md").read_text()
    assert "## Detection" in report and "## Ranking quality" in report
    capsys.readouterr()


def test_cli_missing_artifact_exit_code(tmp_path, toy_corpus, capsys):
    rc = main(["train", "--corpus", str(toy_corpus), "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "MissingArtifact" in capsys.readouterr().err


def test_cli_requires_corpus(tmp_path, capsys):
    assert main(["trace", "--out-dir", str(tmp_path)]) == 2


def test_cli_rejects_unknown_method(tmp_path, toy_corpus, capsys):
    assert main(["trace", "--corpus", str(toy_corpus), "--method", "lime", "--out-dir", str(tmp_path)]) == 2
