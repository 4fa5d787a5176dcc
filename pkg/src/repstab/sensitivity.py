"""Top-K selection, masking sensitivity and the N x 2 feature tensor."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import DegenerateDenominator, ShapeMismatch, WordMaskingError
from .importance import ImportanceProfile
from .tokenization import TokenizedText

if TYPE_CHECKING:
    from .encoder import Encoder

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEFAULT_K = 20


def rank_words(scores: Sequence[float]) -> list[int]:
    """Word indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort sorts by the last key first
    return [int(i) for i in np.lexsort((np.arange(len(scores)), -scores))]


def select_top_k(profile: ImportanceProfile | Sequence[float], k: int) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = profile.scores if isinstance(profile, ImportanceProfile) else profile
    return sorted(rank_words(scores)[:k])


def _cosine_distance(reference: np.ndarray, masked: np.ndarray) -> tuple[float, bool]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(masked, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0, True
    s = 1.0 - float(a @ b) / (na * nb)
    return min(max(s, 0.0), 2.0), False


def sensitivity_score(reference: np.ndarray, masked: np.ndarray) -> float:
    """Cosine distance in [0, 2]; zero-norm inputs score 0 (see ``is_degenerate``)."""
    return _cosine_distance(reference, masked)[0]


def is_degenerate(reference: np.ndarray, masked: np.ndarray) -> bool:
    return _cosine_distance(reference, masked)[1]


@dataclass
class SensitivityTrace:
    selected: list[int]
    sensitivities: np.ndarray  # length N, zero off ``selected``
    reference_embedding: np.ndarray
    degenerate: list[int] = field(default_factory=list)

    @property
    def n_words(self) -> int:
        return len(self.sensitivities)

    def selected_values(self) -> np.ndarray:
        return self.sensitivities[self.selected]


def profile_text(
    encoder: "Encoder",
    text: TokenizedText,
    profile: ImportanceProfile,
    k: int = DEFAULT_K,
) -> SensitivityTrace:
    """Mask each of the top-k words individually and score the embedding shift."""
    if len(profile) != text.n_words:
        raise ShapeMismatch(f"profile has {len(profile)} scores for {text.n_words} words")
    selected = select_top_k(profile, k)
    reference = encoder.encode(text).sentence_embedding
    try:
        masked = encoder.encode_masked_batch(text, selected)
    except Exception:
        # re-run one at a time to name the failing word
        for idx in selected:
            try:
                encoder.encode_masked(text, idx)
            except Exception as exc:
                raise WordMaskingError(idx, exc) from exc
        raise
    s = np.zeros(text.n_words)
    degenerate = []
    for row, idx in zip(masked, selected):
        s[idx], bad = _cosine_distance(reference, row)
        if bad:
            degenerate.append(idx)
    if degenerate:
        log.warning("degenerate embedding norm for words %s", degenerate)
    return SensitivityTrace(selected, s, reference, degenerate)


@dataclass
class FeatureTensor:
    Z: np.ndarray  # (N, 2): [sensitivity | importance]

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2 or self.Z.shape[1] != 2:
            raise ShapeMismatch(f"feature tensor must be N x 2, got {self.Z.shape}")

    @property
    def length(self) -> int:
        return self.Z.shape[0]

    def to_json(self) -> str:
        return json.dumps({"s": self.Z[:, 0].tolist(), "alpha": self.Z[:, 1].tolist()})

    @classmethod
    def from_json(cls, line: str) -> "FeatureTensor":
        blob = json.loads(line)
        return cls.from_columns(blob["s"], blob["alpha"])

    @classmethod
    def from_columns(cls, s: Sequence[float], alpha: Sequence[float]) -> "FeatureTensor":
        if len(s) != len(alpha):
            raise ShapeMismatch("sensitivity and importance columns differ in length")
        return cls(np.column_stack([np.asarray(s, float), np.asarray(alpha, float)]))


def build_feature_tensor(
    text: TokenizedText, profile: ImportanceProfile, trace: SensitivityTrace
) -> FeatureTensor:
    n = text.n_words
    if len(profile) != n or trace.n_words != n:
        raise ShapeMismatch(f"text has {n} words, profile {len(profile)}, trace {trace.n_words}")
    Z = np.zeros((n, 2))
    idx = np.asarray(trace.selected, dtype=int)
    Z[idx, 0] = trace.sensitivities[idx]
    Z[idx, 1] = profile.scores[idx]
    return FeatureTensor(Z)


def instability_ratio(
    benign_traces: Iterable[SensitivityTrace], adv_traces: Iterable[SensitivityTrace]
) -> float:
    """Mean selected sensitivity over adversarial traces / same over benign traces."""
    def pooled_mean(traces) -> float:
        vals = [t.selected_values() for t in traces]
        if not vals:
            raise ValueError("trace collection is empty")
        flat = np.concatenate(vals)
        return float(flat.mean()) if flat.size else 0.0

    adv = pooled_mean(adv_traces)
    ben = pooled_mean(benign_traces)
    if ben < NORM_FLOOR:
        raise DegenerateDenominator("mean benign sensitivity is ~0")
    return adv / ben
