"""Line-delimited corpus records and perturbed-word ground truth."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DuplicateId, IngestAborted, SchemaError

log = logging.getLogger(__name__)

LABEL_IDS = {"benign": 0, "adversarial": 1}


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    text: str
    label: str
    pair_id: str | None = None
    perturbed_indices: tuple[int, ...] | None = None

    @property
    def y(self) -> int:
        return LABEL_IDS[self.label]

    def to_json(self) -> str:
        d = {"id": self.id, "text": self.text, "label": self.label}
        if self.pair_id is not None:
            d["pair_id"] = self.pair_id
        if self.perturbed_indices is not None:
            d["perturbed_indices"] = list(self.perturbed_indices)
        return json.dumps(d, sort_keys=True)


@dataclass
class IngestResult:
    records: list[CorpusRecord]
    errors: list[SchemaError] = field(default_factory=list)
    n_lines: int = 0


def parse_record(line: str, line_no: int) -> CorpusRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise SchemaError(line_no, "record must be a JSON object")
    for key in ("id", "text", "label"):
        if key not in d:
            raise SchemaError(line_no, f"missing field {key!r}")
    if not isinstance(d["id"], str) or not d["id"]:
        raise SchemaError(line_no, "id must be a non-empty string")
    if not isinstance(d["text"], str) or not d["text"].strip():
        raise SchemaError(line_no, "text must be a non-empty string")
    if d["label"] not in LABEL_IDS:
        raise SchemaError(line_no, f"label must be benign or adversarial, got {d['label']!r}")
    perturbed = d.get("perturbed_indices")
    if perturbed is not None:
        if not isinstance(perturbed, list) or not all(isinstance(i, int) and i >= 0 for i in perturbed):
            raise SchemaError(line_no, "perturbed_indices must be a list of non-negative integers")
        perturbed = tuple(sorted(set(perturbed)))
    pair = d.get("pair_id")
    return CorpusRecord(d["id"], d["text"], d["label"], None if pair is None else str(pair), perturbed)


def ingest(path: str | Path, tolerance: float = 0.01) -> IngestResult:
    """Load a JSONL corpus; malformed lines are collected, not fatal, unless
    they exceed ``tolerance`` of all non-blank lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    records, errors, seen = [], [], {}
    n_lines = 0
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                rec = parse_record(line, line_no)
            except SchemaError as err:
                errors.append(err)
                continue
            if rec.id in seen:
                raise DuplicateId(f"id {rec.id!r} on lines {seen[rec.id]} and {line_no}")
            seen[rec.id] = line_no
            records.append(rec)
    for err in errors:
        log.warning("%s: %s", path, err)
    if n_lines and len(errors) / n_lines > tolerance:
        raise IngestAborted(f"{len(errors)}/{n_lines} malformed lines in {path} exceed tolerance {tolerance}")
    return IngestResult(records, errors, n_lines)


@dataclass
class GroundTruth:
    perturbed: dict[str, frozenset[int]]
    unaligned: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    empty: list[str] = field(default_factory=list)


def perturbed_ground_truth(records: Sequence[CorpusRecord]) -> GroundTruth:
    """Perturbed word indices for every adversarial record.

    Explicit ``perturbed_indices`` win; otherwise a positional word diff against
    the benign pair is used.  Pairs whose word counts differ are unaligned.
    """
    benign = {r.pair_id: r for r in records if r.label == "benign" and r.pair_id is not None}
    gt = GroundTruth({})
    for r in records:
        if r.label != "adversarial":
            continue
        if r.perturbed_indices is not None:
            idx = frozenset(r.perturbed_indices)
        elif r.pair_id in benign:
            a, b = r.text.split(), benign[r.pair_id].text.split()
            if len(a) != len(b):
                gt.unaligned.append(r.id)
                continue
            idx = frozenset(i for i, (x, y) in enumerate(zip(a, b)) if x != y)
        else:
            gt.missing.append(r.id)
            continue
        if not idx:
            gt.empty.append(r.id)
            continue
        gt.perturbed[r.id] = idx
    return gt


def split_by_pair(
    records: Sequence[CorpusRecord], test_fraction: float, seed: int
) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
    """Train/test split that keeps benign/adversarial counterparts together."""
    keys = sorted({r.pair_id if r.pair_id is not None else r.id for r in records})
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(keys))
    n_test = int(round(test_fraction * len(keys)))
    test_keys = {keys[i] for i in perm[:n_test]}
    train, test = [], []
    for r in records:
        (test if (r.pair_id if r.pair_id is not None else r.id) in test_keys else train).append(r)
    return train, test


def write_corpus(records: Sequence[CorpusRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return path
