"""Corpus-level orchestration: cached tracing, training, detection, evaluation,
K sweeps and transfer runs.

Artifacts are line-delimited JSON.  Every report row carries the ``manifest``
hash of the run that produced it; manifests never embed absolute paths so two
runs with the same config produce byte-identical canonical reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import __version__
from .config import Config, digest, int_list
from .corpus import CorpusRecord, perturbed_ground_truth
from .detector import (
    TrainedDetector,
    TrainingConfig,
    load_checkpoint,
    predict_scores,
    save_checkpoint,
    train,
)
from .encoder import GRADIENT_INJECTION, Encoder, load_encoder
from .errors import MissingArtifact, TraceRunFailed
from .evaluation import RankingRecord, binned_recall, detection_metrics, ndcg_at_k, ndcg_curve, spearman_bh
from .importance import compute_importance
from .sensitivity import FeatureTensor, build_feature_tensor, profile_text, rank_words

log = logging.getLogger(__name__)

CACHE_ENV = "REPSTAB_CACHE_DIR"


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def record_seed(seed: int, record_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(record_id.encode())) % 2**32


def encoder_identity(name: str) -> str:
    """Cheap identity for cache keys; never loads model weights."""
    kind, _, rest = name.partition(":")
    if kind == "tiny":
        h = hashlib.sha256()
        for fname in ("model.pt", "tokenizer.json"):
            p = Path(rest) / fname
            if not p.exists():
                raise MissingArtifact(f"encoder file missing: {p}")
            h.update(p.read_bytes())
        return f"tiny:{h.hexdigest()}"
    return name


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_jsonl(path: Path, rows: Iterable[dict], manifest_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({**row, "manifest": manifest_hash}, sort_keys=True) + "\n")
    return path


def write_json(path: Path, obj: dict, manifest_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**obj, "manifest": manifest_hash}, sort_keys=True, indent=2) + "\n")
    return path


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- manifests ----------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    encoder_identity: str
    config_hash: str
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    started: str | None = None
    finished: str | None = None

    @property
    def hash(self) -> str:
        return digest({
            "command": self.command, "config": self.config,
            "encoder_identity": self.encoder_identity, "config_hash": self.config_hash,
        })

    def write(self, out_dir: Path, canonical: bool) -> Path:
        body = {
            "command": self.command,
            "manifest_hash": self.hash,
            "config_hash": self.config_hash,
            "encoder": self.config["encoder.name"],
            "encoder_identity": self.encoder_identity,
            "heuristic": self.config["importance.method"],
            "k": self.config["importance.k"],
            "seed": self.config["importance.seed"],
            "gradient_injection": GRADIENT_INJECTION,
            "effective_config": self.config,
            "artifacts": dict(sorted(self.artifacts.items())),
            "repstab_version": __version__,
        }
        if not canonical:
            body.update(started=self.started, finished=self.finished, timings=self.timings)
        path = out_dir / f"manifest.{self.command}.json"
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_manifest(command: str, cfg: Config) -> RunManifest:
    ident = encoder_identity(cfg["encoder.name"])
    return RunManifest(command, cfg.as_dict(), ident, cfg.trace_hash(ident), started=_now())


# -- trace cache --------------------------------------------------------


def cache_dir(cfg: Config, out_dir: Path) -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    if cfg["cache.dir"]:
        return Path(cfg["cache.dir"])
    return Path(out_dir) / "cache"


class TraceCache:
    """One JSON line per traced text; lines whose config hash differs are ignored."""

    def __init__(self, path: Path, config_hash: str):
        self.path = Path(path)
        self.config_hash = config_hash

    @classmethod
    def for_config(cls, cfg: Config, out_dir: Path) -> "TraceCache":
        h = cfg.trace_hash(encoder_identity(cfg["encoder.name"]))
        return cls(cache_dir(cfg, out_dir) / f"traces-{h[:16]}.jsonl", h)

    def load(self) -> dict[str, dict]:
        entries: dict[str, dict] = {}
        if not self.path.exists():
            return entries
        with open(self.path) as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    e = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("%s:%d unreadable cache line ignored", self.path, n)
                    continue
                if e.get("config_hash") != self.config_hash:
                    log.warning("%s:%d config hash mismatch, line ignored", self.path, n)
                    continue
                entries[e["id"]] = e
        return entries

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def rewrite(self, entries: Sequence[dict]) -> None:
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        tmp.replace(self.path)


def trace_record(encoder: Encoder, record: CorpusRecord, cfg: Config, config_hash: str) -> dict:
    text = encoder.tokenize(record.text)
    k = cfg["importance.k"]
    profile = compute_importance(
        encoder, text, cfg["importance.method"], k=k,
        seed=record_seed(cfg["importance.seed"], record.id),
        ig_steps=cfg["ig.steps"], ig_baseline=cfg["ig.baseline"], gradsam_relu=cfg["gradsam.relu"],
    )
    trace = profile_text(encoder, text, profile, k)
    Z = build_feature_tensor(text, profile, trace).Z
    return {
        "id": record.id,
        "text_sha": _sha(record.text),
        "method": cfg["importance.method"],
        "k": k,
        "n_words": text.n_words,
        "truncated_words": text.truncated_words,
        "selected": trace.selected,
        "s": Z[:, 0].tolist(),
        "alpha": Z[:, 1].tolist(),
        "ranking": rank_words(profile.scores),
        "degenerate": trace.degenerate,
        "encoder": cfg["encoder.name"],
        "config_hash": config_hash,
    }


def tensor_from_entry(entry: dict) -> FeatureTensor:
    return FeatureTensor.from_columns(entry["s"], entry["alpha"])


@dataclass
class TraceRun:
    cache: TraceCache
    entries: dict[str, dict]
    computed: int = 0
    cached: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    seconds: float = 0.0
    encoder_loaded: bool = False

    @property
    def seconds_per_sample(self) -> float:
        return self.seconds / self.computed if self.computed else 0.0

    def tensors(self, records: Sequence[CorpusRecord]) -> list[FeatureTensor]:
        return [tensor_from_entry(self.entries[r.id]) for r in records]


def run_trace(
    records: Sequence[CorpusRecord],
    cfg: Config,
    out_dir: str | Path,
    encoder: Encoder | None = None,
    use_cache: bool = True,
    stop_after: int | None = None,
) -> TraceRun:
    """Trace every record, skipping cache hits.  Resumable: entries are appended
    as they complete and the file is rewritten in corpus order at the end.

    ``stop_after`` simulates an interruption after that many new entries.
    """
    out_dir = Path(out_dir)
    cache = TraceCache.for_config(cfg, out_dir)
    existing = cache.load() if use_cache else {}
    if not use_cache and cache.path.exists():
        cache.path.unlink()
    valid = {r.id: existing[r.id] for r in records
             if r.id in existing and existing[r.id].get("text_sha") == _sha(r.text)}
    pending = [r for r in records if r.id not in valid]
    run = TraceRun(cache, dict(valid), cached=len(valid))
    if pending:
        if encoder is None:
            encoder = load_encoder(cfg["encoder.name"], cfg["encoder.max_length"])
        encoder.batch_size = cfg["encoder.batch_size"]
        run.encoder_loaded = True

        def work(rec: CorpusRecord):
            try:
                return rec, trace_record(encoder, rec, cfg, cache.config_hash), None
            except Exception as exc:  # one bad text must not abort a corpus
                return rec, None, f"{type(exc).__name__}: {exc}"

        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=max(1, cfg["run.workers"])) as pool:
            for rec, entry, err in pool.map(work, pending):
                if err is not None:
                    log.warning("trace failed for %s: %s", rec.id, err)
                    run.failures.append((rec.id, err))
                    continue
                cache.append(entry)
                run.entries[rec.id] = entry
                run.computed += 1
                if stop_after is not None and run.computed >= stop_after:
                    break
        run.seconds = time.perf_counter() - t0
        if stop_after is not None and run.computed >= stop_after:
            return run
    if records and len(run.failures) / len(records) > cfg["run.trace_tolerance"]:
        raise TraceRunFailed(f"{len(run.failures)}/{len(records)} records failed to trace")
    cache.rewrite([run.entries[r.id] for r in records if r.id in run.entries])
    return run


def load_traces(records: Sequence[CorpusRecord], cfg: Config, out_dir: str | Path) -> TraceRun:
    cache = TraceCache.for_config(cfg, Path(out_dir))
    entries = cache.load()
    missing = [r.id for r in records if r.id not in entries]
    if missing:
        raise MissingArtifact(
            f"trace cache {cache.path} lacks {len(missing)} of {len(records)} records "
            f"(first: {missing[0]}); run `repstab trace` with the same config first"
        )
    return TraceRun(cache, entries, cached=len(records))


# -- train / detect -----------------------------------------------------


def training_config(cfg: Config) -> TrainingConfig:
    return TrainingConfig(
        lr=cfg["train.lr"], batch_size=cfg["train.batch_size"], max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"], val_fraction=cfg["train.val_fraction"],
        weight_decay=cfg["train.weight_decay"], seed=cfg["train.seed"],
    )


def run_train(
    records: Sequence[CorpusRecord], cfg: Config, out_dir: str | Path, traces: TraceRun | None = None
) -> tuple[TrainedDetector, RunManifest]:
    out_dir = Path(out_dir)
    manifest = new_manifest("train", cfg)
    traces = traces or load_traces(records, cfg, out_dir)
    set_determinism(cfg["train.seed"])
    t0 = time.perf_counter()
    trained = train(traces.tensors(records), [r.y for r in records], training_config(cfg))
    manifest.timings["train_seconds"] = time.perf_counter() - t0
    ckpt = save_checkpoint(out_dir / "detector.pt", trained, manifest.config_hash)
    write_jsonl(out_dir / "train_log.jsonl", trained.log, manifest.hash)
    manifest.artifacts.update(checkpoint=ckpt.name, train_log="train_log.jsonl",
                              trace_cache=traces.cache.path.name)
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return trained, manifest


def detect_records(trained: TrainedDetector, records: Sequence[CorpusRecord], traces: TraceRun):
    labels, scores = predict_scores(trained.model, trained.stats, traces.tensors(records))
    y = [r.y for r in records]
    rows = [
        {"id": r.id, "label": r.label, "score": float(s), "prediction": ("adversarial" if p else "benign")}
        for r, p, s in zip(records, labels, scores)
    ]
    return rows, detection_metrics(y, labels, scores)


def run_detect(
    records: Sequence[CorpusRecord],
    cfg: Config,
    out_dir: str | Path,
    checkpoint: str | Path | None = None,
    traces: TraceRun | None = None,
    trained: TrainedDetector | None = None,
    prefix: str = "",
):
    out_dir = Path(out_dir)
    manifest = new_manifest("detect", cfg)
    if trained is None:
        ckpt = Path(checkpoint) if checkpoint else out_dir / "detector.pt"
        if not ckpt.exists():
            raise MissingArtifact(f"detector checkpoint {ckpt} not found; run `repstab train` first")
        trained, _ = load_checkpoint(ckpt)
    traces = traces or load_traces(records, cfg, out_dir)
    rows, metrics = detect_records(trained, records, traces)
    write_jsonl(out_dir / f"{prefix}predictions.jsonl", rows, manifest.hash)
    write_json(out_dir / f"{prefix}detect_metrics.json", metrics.as_dict(), manifest.hash)
    manifest.artifacts.update(predictions=f"{prefix}predictions.jsonl", metrics=f"{prefix}detect_metrics.json")
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return rows, metrics


# -- ranking / correlation evaluation ------------------------------------


def ranking_records(records: Sequence[CorpusRecord], entries: dict[str, dict]) -> tuple[list[RankingRecord], dict]:
    gt = perturbed_ground_truth(records)
    out, truncated_out = [], []
    for r in records:
        if r.id not in gt.perturbed:
            continue
        e = entries[r.id]
        perturbed = frozenset(i for i in gt.perturbed[r.id] if i < e["n_words"])
        if not perturbed:
            truncated_out.append(r.id)
            continue
        out.append(RankingRecord(tuple(e["ranking"]), perturbed, r.id))
    counts = {
        "evaluated": len(out), "unaligned_length": len(gt.unaligned), "no_ground_truth": len(gt.missing),
        "empty_perturbed": len(gt.empty), "perturbed_truncated": len(truncated_out),
    }
    return out, counts


def run_eval_ranking(
    records: Sequence[CorpusRecord], cfg: Config, out_dir: str | Path, methods: Sequence[str] | None = None
) -> dict:
    out_dir = Path(out_dir)
    methods = list(methods or [cfg["importance.method"]])
    manifest = new_manifest("eval-ranking", cfg)
    adv = [r for r in records if r.label == "adversarial"]
    k_eval, max_k, edges = cfg["eval.k"], cfg["eval.max_k"], int_list(cfg["eval.bins"])
    by_method, per_record, bins_rows, summary = {}, [], [], {}
    for m in methods:
        mcfg = cfg.with_overrides(**{"importance.method": m})
        recs, counts = ranking_records(adv, load_traces(adv, mcfg, out_dir).entries)
        by_method[m] = recs
        for rr in recs:
            per_record.append({"id": rr.text_id, "method": m, "k": k_eval, "ndcg": ndcg_at_k(rr, k_eval)})
        for b in binned_recall(recs, k_eval, edges):
            bins_rows.append({
                "bin": b.label, "method": m, "recall": None if b.empty else b.mean_recall, "count": b.count,
            })
        vals = [ndcg_at_k(rr, k_eval) for rr in recs]
        summary[m] = {"mean_ndcg": float(np.mean(vals)) if vals else None, **counts}
    write_jsonl(out_dir / "ndcg.jsonl", per_record, manifest.hash)
    write_jsonl(out_dir / "ndcg_curve.jsonl", ndcg_curve(by_method, range(1, max_k + 1)), manifest.hash)
    write_jsonl(out_dir / "recall_bins.jsonl", bins_rows, manifest.hash)
    write_json(out_dir / "ranking_summary.json", {"k": k_eval, "methods": summary}, manifest.hash)
    manifest.artifacts.update(ndcg="ndcg.jsonl", ndcg_curve="ndcg_curve.jsonl",
                              recall_bins="recall_bins.jsonl", summary="ranking_summary.json")
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return summary


def run_eval_correlation(rows_path: str | Path, cfg: Config, out_dir: str | Path) -> list[dict]:
    """Input rows: JSON lines with ``group``, ``accuracy``, ``ndcg`` and optional ``family``."""
    out_dir = Path(out_dir)
    rows_path = Path(rows_path)
    if not rows_path.exists():
        raise MissingArtifact(f"correlation input {rows_path} not found")
    manifest = new_manifest("eval-correlation", cfg)
    reports = [r.as_dict() for r in spearman_bh(read_jsonl(rows_path))]
    write_jsonl(out_dir / "correlation.jsonl", reports, manifest.hash)
    manifest.artifacts["correlation"] = "correlation.jsonl"
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return reports


# -- sweeps and transfer ------------------------------------------------


def run_sweep(
    train_records: Sequence[CorpusRecord],
    test_records: Sequence[CorpusRecord],
    cfg: Config,
    out_dir: str | Path,
    ks: Sequence[int] | None = None,
    encoder: Encoder | None = None,
) -> list[dict]:
    """trace + train + detect for each K.  Traces are always recomputed so the
    seconds-per-sample column measures real work."""
    out_dir = Path(out_dir)
    ks = list(ks or int_list(cfg["sweep.ks"]))
    manifest = new_manifest("sweep-k", cfg)
    if encoder is None:
        encoder = load_encoder(cfg["encoder.name"], cfg["encoder.max_length"])
    rows = []
    for k in ks:
        kcfg = cfg.with_overrides(**{"importance.k": k})
        kdir = out_dir / f"k{k}"
        tr = run_trace(list(train_records) + list(test_records), kcfg, kdir, encoder=encoder, use_cache=False)
        trained, _ = run_train(train_records, kcfg, kdir, traces=tr)
        _, metrics = run_detect(test_records, kcfg, kdir, traces=tr, trained=trained)
        rows.append({
            "k": k, "f1": metrics.f1, "accuracy": metrics.accuracy, "auc": metrics.auc,
            "seconds_per_sample": tr.seconds_per_sample,
        })
        log.info("K=%d F1=%.4f s/sample=%.5f", k, metrics.f1, tr.seconds_per_sample)
    write_jsonl(out_dir / "sweep_k.jsonl", rows, manifest.hash)
    manifest.artifacts["sweep"] = "sweep_k.jsonl"
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return rows


def run_transfer(
    train_records: Sequence[CorpusRecord],
    in_records: Sequence[CorpusRecord],
    out_records: Sequence[CorpusRecord],
    cfg: Config,
    out_dir: str | Path,
    encoder: Encoder | None = None,
) -> dict:
    """Train on corpus A, report In (A test) and Out (target corpus) metrics."""
    out_dir = Path(out_dir)
    manifest = new_manifest("transfer", cfg)
    pooled = {r.id: r for r in [*train_records, *in_records, *out_records]}
    tr = run_trace(list(pooled.values()), cfg, out_dir, encoder=encoder)
    trained, _ = run_train(train_records, cfg, out_dir, traces=tr)
    _, m_in = run_detect(in_records, cfg, out_dir, traces=tr, trained=trained, prefix="in_")
    _, m_out = run_detect(out_records, cfg, out_dir, traces=tr, trained=trained, prefix="out_")
    result = {"in": m_in.as_dict(), "out": m_out.as_dict()}
    write_json(out_dir / "transfer.json", result, manifest.hash)
    manifest.artifacts["transfer"] = "transfer.json"
    manifest.finished = _now()
    manifest.write(out_dir, cfg["run.deterministic"])
    return result


def build_report(out_dir: str | Path) -> str:
    """Collect the JSON reports found under ``out_dir`` into report.md."""
    out_dir = Path(out_dir)
    lines = ["# repstab report", ""]
    for name in sorted(p.name for p in out_dir.glob("manifest.*.json")):
        m = json.loads((out_dir / name).read_text())
        lines.append(f"- `{m['command']}` manifest {m['manifest_hash'][:12]} "
                     f"(encoder {m['encoder']}, heuristic {m['heuristic']}, K={m['k']})")
    lines.append("")
    dm = out_dir / "detect_metrics.json"
    if dm.exists():
        d = json.loads(dm.read_text())
        lines += ["## Detection", "", "| accuracy | precision | recall | F1 | AUC | n |", "|---|---|---|---|---|---|",
                  f"| {d['accuracy']:.4f} | {d['precision']:.4f} | {d['recall']:.4f} | {d['f1']:.4f} | "
                  f"{'-' if d['auc'] is None else format(d['auc'], '.4f')} | {d['n']} |", ""]
    rs = out_dir / "ranking_summary.json"
    if rs.exists():
        d = json.loads(rs.read_text())
        lines += [f"## Ranking quality (NDCG@{d['k']})", "", "| method | mean NDCG | evaluated |", "|---|---|---|"]
        for m, v in sorted(d["methods"].items()):
            nd = "-" if v["mean_ndcg"] is None else f"{v['mean_ndcg']:.4f}"
            lines.append(f"| {m} | {nd} | {v['evaluated']} |")
        lines.append("")
    sw = out_dir / "sweep_k.jsonl"
    if sw.exists():
        lines += ["## K sweep", "", "| K | F1 | s/sample |", "|---|---|---|"]
        for r in read_jsonl(sw):
            lines.append(f"| {r['k']} | {r['f1']:.4f} | {r['seconds_per_sample']:.5f} |")
        lines.append("")
    tf = out_dir / "transfer.json"
    if tf.exists():
        d = json.loads(tf.read_text())
        lines += ["## Transfer", "", "| metric | In | Out |", "|---|---|---|"]
        for key in ("accuracy", "precision", "recall", "f1", "auc"):
            a, b = d["in"][key], d["out"][key]
            lines.append(f"| {key} | {'-' if a is None else f'{a:.4f}'} | {'-' if b is None else f'{b:.4f}'} |")
        lines.append("")
    cr = out_dir / "correlation.jsonl"
    if cr.exists():
        lines += ["## Spearman correlation (BH-corrected)", "", "| family | group | rho | p | q | n |",
                  "|---|---|---|---|---|---|"]
        for r in read_jsonl(cr):
            fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
            lines.append(f"| {r['family']} | {r['group']} | {fmt(r['rho'])} | {fmt(r['p_value'])} | "
                         f"{fmt(r['q_value'])} | {r['n']} |")
        lines.append("")
    text = "\n".join(lines)
    (out_dir / "report.md").write_text(text)
    return text
