"""Command-line interface: ``repstab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config, int_list
from .corpus import ingest, split_by_pair
from .errors import MissingArtifact, RepStabError
from . import pipeline


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--corpus", help="JSONL corpus (id, text, label, pair_id, perturbed_indices)")
    p.add_argument("--encoder", help="encoder name: stub:<seed>, tiny:<dir> or hf:<name>")
    p.add_argument("--method", help="grad | rollout | gradsam | random | ig (comma list for eval-ranking)")
    p.add_argument("--k", type=int, help="number of top-ranked words to mask")
    p.add_argument("--seed", type=int, help="seed for random importance and detector training")
    p.add_argument("--out-dir", default="runs/default", help="directory for artifacts and reports")
    p.add_argument("--deterministic", action="store_true", help="canonical reports without timestamps")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repstab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="compute sensitivity/importance traces (cached)")
    _common(p)

    p = sub.add_parser("train", help="fit the BiLSTM detector on cached traces")
    _common(p)

    p = sub.add_parser("detect", help="score a corpus with a trained detector")
    _common(p)
    p.add_argument("--checkpoint", help="detector checkpoint (default <out-dir>/detector.pt)")

    p = sub.add_parser("eval-ranking", help="NDCG@k curves and binned recall of perturbed words")
    _common(p)

    p = sub.add_parser("eval-correlation", help="Spearman rho with BH-corrected q-values")
    _common(p)
    p.add_argument("--pairs", required=True, help="JSONL rows with family, group, accuracy, ndcg")

    p = sub.add_parser("sweep-k", help="trace + train + detect over a list of K values")
    _common(p)
    p.add_argument("--ks", help="comma-separated K values (default 5,10,20,50)")
    p.add_argument("--test", help="held-out corpus; default is a pair-level split of --corpus")

    p = sub.add_parser("transfer", help="train on one corpus, evaluate in- and out-of-domain")
    _common(p)
    p.add_argument("--test", help="in-domain test corpus; default is a pair-level split of --corpus")
    p.add_argument("--target", required=True, help="out-of-domain corpus")

    p = sub.add_parser("report", help="summarize the reports in --out-dir as report.md")
    _common(p)
    return ap


def _config(args) -> Config:
    overrides = {
        "encoder.name": args.encoder,
        "importance.k": args.k,
    }
    if args.method and "," not in args.method:
        overrides["importance.method"] = args.method
    if args.seed is not None:
        overrides["importance.seed"] = args.seed
        overrides["train.seed"] = args.seed
    if args.deterministic:
        overrides["run.deterministic"] = True
    return Config.load(args.config, overrides)


def _records(path: str | None, cfg: Config):
    if not path:
        raise MissingArtifact("--corpus is required for this subcommand")
    result = ingest(path, cfg["run.ingest_tolerance"])
    if result.errors:
        print(f"{len(result.errors)} malformed line(s) skipped in {path}:", file=sys.stderr)
        for err in result.errors:
            print(f"  {err}", file=sys.stderr)
    return result.records


def _split(args, cfg):
    records = _records(args.corpus, cfg)
    if args.test:
        return records, _records(args.test, cfg)
    return split_by_pair(records, cfg["split.test_fraction"], cfg["train.seed"])


def run(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    if cfg["run.deterministic"]:
        pipeline.set_determinism(cfg["train.seed"])
    cmd = args.command
    if cmd == "trace":
        records = _records(args.corpus, cfg)
        manifest = pipeline.new_manifest("trace", cfg)
        tr = pipeline.run_trace(records, cfg, out)
        manifest.artifacts["trace_cache"] = tr.cache.path.name
        manifest.timings["seconds_per_sample"] = tr.seconds_per_sample
        manifest.finished = pipeline._now()
        manifest.write(out, cfg["run.deterministic"])
        print(f"traced {tr.computed}, cached {tr.cached}, failed {len(tr.failures)} -> {tr.cache.path}")
    elif cmd == "train":
        trained, _ = pipeline.run_train(_records(args.corpus, cfg), cfg, out)
        print(f"best epoch {trained.best_epoch}, validation F1 {trained.best_val_f1:.4f} -> {out / 'detector.pt'}")
    elif cmd == "detect":
        _, metrics = pipeline.run_detect(_records(args.corpus, cfg), cfg, out, checkpoint=args.checkpoint)
        print(json.dumps(metrics.as_dict(), indent=2))
    elif cmd == "eval-ranking":
        methods = args.method.split(",") if args.method else None
        summary = pipeline.run_eval_ranking(_records(args.corpus, cfg), cfg, out, methods)
        print(json.dumps(summary, indent=2))
    elif cmd == "eval-correlation":
        for row in pipeline.run_eval_correlation(args.pairs, cfg, out):
            print(json.dumps(row))
    elif cmd == "sweep-k":
        train_recs, test_recs = _split(args, cfg)
        ks = int_list(args.ks) if args.ks else None
        for row in pipeline.run_sweep(train_recs, test_recs, cfg, out, ks):
            print(json.dumps(row))
    elif cmd == "transfer":
        train_recs, test_recs = _split(args, cfg)
        target = _records(args.target, cfg)
        print(json.dumps(pipeline.run_transfer(train_recs, test_recs, target, cfg, out), indent=2))
    elif cmd == "report":
        print(pipeline.build_report(out))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return run(args)
    except (RepStabError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
