"""Ranking-quality, detection and correlation metrics."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .errors import DegenerateRanks, NoRelevantItems


@dataclass(frozen=True)
class RankingRecord:
    ranked_words: tuple[int, ...]
    perturbed: frozenset[int]
    text_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ranked_words", tuple(int(i) for i in self.ranked_words))
        object.__setattr__(self, "perturbed", frozenset(int(i) for i in self.perturbed))
        if len(set(self.ranked_words)) != len(self.ranked_words):
            raise ValueError(f"{self.text_id}: ranked_words contains duplicates")


def _discount(rank: int) -> float:
    return 1.0 / math.log2(rank + 1)


def ndcg_at_k(record: RankingRecord, k: int) -> float:
    """Binary-relevance NDCG of the first ``k`` ranked words."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not record.perturbed:
        raise NoRelevantItems(f"{record.text_id}: no perturbed words")
    dcg = sum(_discount(r) for r, w in enumerate(record.ranked_words[:k], start=1) if w in record.perturbed)
    idcg = sum(_discount(r) for r in range(1, min(len(record.perturbed), k) + 1))
    return dcg / idcg


def recall_at_k(record: RankingRecord, k: int) -> float:
    if not record.perturbed:
        raise NoRelevantItems(f"{record.text_id}: no perturbed words")
    hits = len(set(record.ranked_words[:k]) & record.perturbed)
    return hits / len(record.perturbed)


@dataclass(frozen=True)
class RecallBin:
    lower: int
    upper: int  # exclusive
    mean_recall: float  # nan when empty
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def label(self) -> str:
        return f"{self.lower}-{self.upper - 1}"


def binned_recall(records: Iterable[RankingRecord], k: int, bin_edges: Sequence[int]) -> list[RecallBin]:
    """Mean top-k recall grouped by perturbation count, bins ``[e_i, e_{i+1})``.

    Records whose count falls outside the edges are ignored; empty bins carry
    ``count == 0`` and a NaN mean.
    """
    edges = list(bin_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing with at least two entries")
    buckets: list[list[float]] = [[] for _ in edges[:-1]]
    for rec in records:
        n = len(rec.perturbed)
        if n == 0:
            continue
        i = int(np.searchsorted(edges, n, side="right")) - 1
        if 0 <= i < len(buckets):
            buckets[i].append(recall_at_k(rec, k))
    return [
        RecallBin(lo, hi, float(np.mean(b)) if b else float("nan"), len(b))
        for lo, hi, b in zip(edges, edges[1:], buckets)
    ]


def ndcg_curve(records_by_method: Mapping[str, Sequence[RankingRecord]], ks: Iterable[int]) -> list[dict]:
    """Plot rows (k, method, mean NDCG, n) for NDCG-vs-k curves."""
    rows = []
    for method in sorted(records_by_method):
        recs = [r for r in records_by_method[method] if r.perturbed]
        for k in ks:
            vals = [ndcg_at_k(r, k) for r in recs]
            rows.append({"k": k, "method": method, "ndcg": float(np.mean(vals)) if vals else None, "n": len(vals)})
    return rows


# -- detection ----------------------------------------------------------


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count 0.5."""
    y = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    r = average_ranks(scores)
    return float((r[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class DetectionMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    n: int
    single_class: bool = False

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "auc": self.auc, "n": self.n, "single_class": self.single_class,
        }


def detection_metrics(
    labels: Sequence[int], predictions: Sequence[int], scores: Sequence[float] | None = None
) -> DetectionMetrics:
    """Confusion-matrix metrics with adversarial (1) as the positive class.

    AUC is ``None`` (and ``single_class`` set) when only one label is present.
    """
    y = np.asarray(labels, dtype=int)
    p = np.asarray(predictions, dtype=int)
    if len(y) != len(p) or (scores is not None and len(scores) != len(y)):
        raise ValueError("labels, predictions and scores must have equal length")
    if len(y) == 0:
        raise ValueError("no samples")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    single = len(set(y.tolist())) < 2
    auc = None if (single or scores is None) else roc_auc(y, scores)
    return DetectionMetrics(float(np.mean(y == p)), precision, recall, f1, auc, len(y), single)


# -- correlation --------------------------------------------------------


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rho (Pearson on average ranks) and two-sided t-approximation p."""
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    n = len(x)
    if n < 3:
        raise ValueError("at least 3 pairs required")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise DegenerateRanks("one variable is constant; rho undefined")
    rho = max(-1.0, min(1.0, float(dx @ dy) / denom))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return rho, min(1.0, p)


def bh_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up q-values with the monotone pass."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


@dataclass
class CorrelationReport:
    family: str
    group: str
    rho: float | None
    p_value: float | None
    q_value: float | None
    n: int
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "family": self.family, "group": self.group, "rho": self.rho, "p_value": self.p_value,
            "q_value": self.q_value, "n": self.n, "degenerate": self.degenerate,
        }


def spearman_bh(rows: Iterable[Mapping]) -> list[CorrelationReport]:
    """Per-group Spearman(accuracy, ndcg) with BH correction inside each family.

    Each row needs ``group`` and ``accuracy``/``ndcg`` values; ``family``
    defaults to a single shared family.  Groups with a constant variable are
    reported as degenerate and left out of their family's BH adjustment.
    """
    groups: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
    for row in rows:
        key = (str(row.get("family", "all")), str(row["group"]))
        groups[key].append((float(row["accuracy"]), float(row["ndcg"])))

    reports = []
    for (family, group), pairs in sorted(groups.items()):
        if len(pairs) < 3:
            raise ValueError(f"group {group!r} has {len(pairs)} pairs; need >= 3")
        acc, nd = zip(*pairs)
        try:
            rho, p = spearman(acc, nd)
            reports.append(CorrelationReport(family, group, rho, p, None, len(pairs)))
        except DegenerateRanks:
            reports.append(CorrelationReport(family, group, None, None, None, len(pairs), degenerate=True))

    by_family: dict[str, list[CorrelationReport]] = defaultdict(list)
    for r in reports:
        if not r.degenerate:
            by_family[r.family].append(r)
    for fam in by_family.values():
        for r, q in zip(fam, bh_adjust([r.p_value for r in fam])):
            r.q_value = float(q)
    return reports
