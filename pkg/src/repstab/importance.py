"""Per-word importance heuristics.

All heuristics produce one score per word by aggregating per-subtoken
quantities over the word's subtoken span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
import torch

from .errors import NonFiniteGradient, ShapeMismatch
from .tokenization import TokenizedText, span_sum

if TYPE_CHECKING:
    from .encoder import Encoder, EncoderOutput, GradientBundle

ROW_FLOOR = 1e-12


class Method(str, Enum):
    GRADIENT = "grad"
    ROLLOUT = "rollout"
    GRADSAM = "gradsam"
    RANDOM = "random"
    INTEGRATED_GRADIENTS = "ig"


class Baseline(str, Enum):
    ZERO = "zero"
    MASK = "mask"


@dataclass
class ImportanceProfile:
    method: Method
    scores: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ShapeMismatch("scores must be a vector")
        if not np.all(np.isfinite(self.scores)):
            raise NonFiniteGradient(f"{self.method.value} produced non-finite scores")

    def __len__(self) -> int:
        return len(self.scores)


def _check_T(text: TokenizedText, T: int) -> None:
    if T != text.n_subtokens:
        raise ShapeMismatch(f"text has {text.n_subtokens} subtokens, tensors have {T}")


def gradient_attribution(text: TokenizedText, grads: "GradientBundle") -> ImportanceProfile:
    """Sum of per-subtoken L2 gradient norms over each word."""
    g = np.asarray(grads.embedding_grads)
    _check_T(text, g.shape[0])
    norms = np.linalg.norm(g, axis=1)
    return ImportanceProfile(Method.GRADIENT, span_sum(norms, text))


def rollout_matrix(attentions: np.ndarray) -> np.ndarray:
    """Residual-mixed, row-normalized rollout over an (L, H, T, T) stack."""
    att = np.asarray(attentions, dtype=np.float64)
    if att.ndim != 4 or att.shape[-1] != att.shape[-2]:
        raise ShapeMismatch(f"expected (L, H, T, T) attentions, got {att.shape}")
    T = att.shape[-1]
    eye = np.eye(T)
    R = eye
    for layer in att:
        a = 0.5 * layer.mean(axis=0) + 0.5 * eye
        a = a / np.maximum(a.sum(axis=1, keepdims=True), ROW_FLOOR)
        R = R @ a
    return R


def attention_rollout(text: TokenizedText, out: "EncoderOutput") -> ImportanceProfile:
    att = np.asarray(out.attentions)
    _check_T(text, att.shape[-1])
    mass = rollout_matrix(att).sum(axis=0)
    return ImportanceProfile(Method.ROLLOUT, span_sum(mass, text))


def grad_sam(
    text: TokenizedText,
    out: "EncoderOutput",
    grads: "GradientBundle",
    relu: bool = False,
) -> ImportanceProfile:
    """Attention times attention-gradient, averaged over layers and heads.

    Token score is the column sum (mass received by token j).  ``relu``
    rectifies the product before averaging.
    """
    A = np.asarray(out.attentions, dtype=np.float64)
    dA = np.asarray(grads.attention_grads, dtype=np.float64)
    if A.shape != dA.shape:
        raise ShapeMismatch(f"attentions {A.shape} vs attention grads {dA.shape}")
    _check_T(text, A.shape[-1])
    G = dA * A
    if relu:
        G = np.maximum(G, 0.0)
    avg = G.mean(axis=0).mean(axis=0)
    return ImportanceProfile(Method.GRADSAM, span_sum(avg.sum(axis=0), text), {"relu": relu})


def random_importance(text: TokenizedText, k: int, seed: int) -> ImportanceProfile:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = text.n_words
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=min(k, n), replace=False)
    scores = np.zeros(n)
    scores[chosen] = 1.0
    return ImportanceProfile(Method.RANDOM, scores, {"seed": seed, "k": k})


def integrated_gradient_attributions(
    encoder: "Encoder",
    text: TokenizedText,
    steps: int = 50,
    baseline: Baseline | str = Baseline.MASK,
    target_class: int | None = None,
) -> tuple[np.ndarray, float, float]:
    """Midpoint-Riemann integrated gradients at the token-embedding layer.

    Only non-special positions move along the path; [CLS]/[SEP] stay at
    their input embedding.  The loss is cross-entropy against the predicted
    class of the unperturbed input.

    Returns:
        (attributions (T, d), loss at input, loss at baseline)
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    baseline = Baseline(baseline)
    x = encoder.token_embeddings(text)
    ref = x.clone()
    movable = torch.tensor([not s for s in text.special_mask])
    if baseline is Baseline.ZERO:
        ref[movable] = 0.0
    else:
        ref[movable] = encoder.mask_embedding()
    if target_class is None:
        target_class = encoder.encode(text).predicted_class
    total = np.zeros(tuple(x.shape))
    for i in range(steps):
        alpha = (i + 0.5) / steps
        _, g = encoder.loss_and_gradient(text, ref + alpha * (x - ref), target_class)
        total += g
    attributions = (x - ref).double().numpy() * (total / steps)
    if not np.all(np.isfinite(attributions)):
        raise NonFiniteGradient("integrated gradients produced NaN/Inf")
    loss_in, _ = encoder.loss_and_gradient(text, x, target_class)
    loss_ref, _ = encoder.loss_and_gradient(text, ref, target_class)
    return attributions, loss_in, loss_ref


def integrated_gradients(
    encoder: "Encoder",
    text: TokenizedText,
    steps: int = 50,
    baseline: Baseline | str = Baseline.MASK,
) -> ImportanceProfile:
    attr, _, _ = integrated_gradient_attributions(encoder, text, steps, baseline)
    scores = span_sum(np.linalg.norm(attr, axis=1), text)
    return ImportanceProfile(
        Method.INTEGRATED_GRADIENTS, scores, {"steps": steps, "baseline": Baseline(baseline).value}
    )


def compute_importance(
    encoder: "Encoder",
    text: TokenizedText,
    method: Method | str,
    k: int = 20,
    seed: int = 0,
    ig_steps: int = 50,
    ig_baseline: Baseline | str = Baseline.MASK,
    gradsam_relu: bool = False,
) -> ImportanceProfile:
    """Dispatch to one heuristic, running whatever encoder passes it needs."""
    from .encoder import LossTarget

    method = Method(method)
    if method is Method.GRADIENT:
        _, grads = encoder.encode_with_gradients(text, LossTarget.PREDICTED_CLASS)
        return gradient_attribution(text, grads)
    if method is Method.ROLLOUT:
        return attention_rollout(text, encoder.encode(text))
    if method is Method.GRADSAM:
        out, grads = encoder.encode_with_gradients(text, LossTarget.PREDICTED_LOGIT)
        return grad_sam(text, out, grads, relu=gradsam_relu)
    if method is Method.RANDOM:
        return random_importance(text, k, seed)
    return integrated_gradients(encoder, text, ig_steps, ig_baseline)
