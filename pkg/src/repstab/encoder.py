"""Frozen transformer classifier behind a narrow probing interface.

Everything the importance heuristics and the sensitivity profiler need goes
through :class:`Encoder`: mean-pooled sentence embeddings, attention
probabilities, gradients at the input-embedding layer and attention-weight
gradients.  Gradients are taken w.r.t. the token embeddings after lookup and
before positional embeddings are added (``GRADIENT_INJECTION``).

Encoder names:

``stub:<seed>``            2 layers, 2 heads, d=8, float64, hashed subwords
``stub:<seed>:constant``   same, with a zeroed classifier (constant logits)
``tiny:<dir>``             a :class:`TinyTransformer` checkpoint + WordPiece vocab
``hf:<name-or-path>``      a ``transformers`` sequence classifier
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EncoderFailure, IndexOutOfRange, NonFiniteGradient
from .tokenization import (
    HashPieceTokenizer,
    HFPieceTokenizer,
    PieceTokenizer,
    TokenizedText,
    WordPieceTokenizer,
    align,
)

GRADIENT_INJECTION = "token_embedding_before_position"


class LossTarget(str, Enum):
    PREDICTED_CLASS = "predicted_class"  # cross-entropy vs the predicted class
    PREDICTED_LOGIT = "predicted_logit"  # raw logit of the predicted class


@dataclass
class EncoderOutput:
    sentence_embedding: np.ndarray  # (d,)
    hidden_states: np.ndarray  # (T, d)
    attentions: np.ndarray  # (L, H, T, T)
    logits: np.ndarray  # (C,)
    predicted_class: int


@dataclass
class GradientBundle:
    embedding_grads: np.ndarray  # (T, d)
    attention_grads: np.ndarray  # (L, H, T, T)
    loss_value: float
    loss_target: LossTarget
    target_class: int


@dataclass
class TransformerConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 256
    n_classes: int = 2
    dropout: float = 0.1


class _Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.out = nn.Linear(cfg.dim, cfg.dim)
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.ffn = nn.Sequential(nn.Linear(cfg.dim, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, cfg.dim))
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, D = x.shape
        hd = D // self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        ctx = (self.drop(probs) @ v).transpose(1, 2).reshape(B, T, D)
        x = self.ln1(x + self.drop(self.out(ctx)))
        x = self.ln2(x + self.drop(self.ffn(x)))
        return x, probs


class TinyTransformer(nn.Module):
    """Post-LN BERT-style encoder with a [CLS] classification head."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        if cfg.dim % cfg.n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.position_embedding = nn.Embedding(cfg.max_positions, cfg.dim)
        self.emb_norm = nn.LayerNorm(cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.classifier = nn.Linear(cfg.dim, cfg.n_classes)

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def n_heads(self) -> int:
        return self.cfg.n_heads

    def token_embeddings(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def forward_embeddings(self, embeds: torch.Tensor, attention_mask: torch.Tensor):
        T = embeds.shape[1]
        pos = torch.arange(T, device=embeds.device)
        x = self.drop(self.emb_norm(embeds + self.position_embedding(pos)[None]))
        attentions = []
        for block in self.blocks:
            x, probs = block(x, attention_mask)
            attentions.append(probs)
        logits = self.classifier(x[:, 0])
        return x, attentions, logits

    def forward(self, ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.forward_embeddings(self.token_embeddings(ids), attention_mask)[2]


class HFBackend:
    """Adapter exposing a ``transformers`` classifier like a TinyTransformer."""

    def __init__(self, model):
        self.model = model
        self.n_layers = model.config.num_hidden_layers
        self.n_heads = model.config.num_attention_heads

    def parameters(self):
        return self.model.parameters()

    def named_parameters(self):
        return self.model.named_parameters()

    def eval(self):
        self.model.eval()
        return self

    def token_embeddings(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.get_input_embeddings()(ids)

    def forward_embeddings(self, embeds: torch.Tensor, attention_mask: torch.Tensor):
        out = self.model(
            inputs_embeds=embeds,
            attention_mask=attention_mask.long(),
            output_hidden_states=True,
            output_attentions=True,
        )
        return out.hidden_states[-1], list(out.attentions), out.logits


class Encoder:
    """Read-only probe around a frozen classifier and its tokenizer."""

    def __init__(
        self,
        name: str,
        backend,
        tokenizer: PieceTokenizer,
        max_length: int = 128,
        dtype: torch.dtype = torch.float32,
        batch_size: int = 32,
    ):
        self.name = name
        self.backend = backend.eval()
        self.tokenizer = tokenizer
        self.max_length = max_length
        self.dtype = dtype
        self.batch_size = batch_size
        for p in self.backend.parameters():
            p.requires_grad_(False)
        self._checksum: str | None = None

    # -- text handling -------------------------------------------------

    def tokenize(self, raw_text: str | Sequence[str]) -> TokenizedText:
        return align(raw_text, self.tokenizer, self.max_length)

    @property
    def mask_token(self) -> str:
        return self.tokenizer.mask_token

    # -- low-level forward ---------------------------------------------

    def _pad(self, texts: Sequence[TokenizedText]):
        T = max(t.n_subtokens for t in texts)
        ids = torch.full((len(texts), T), self.tokenizer.pad_id, dtype=torch.long)
        attn = torch.zeros((len(texts), T), dtype=torch.bool)
        pool = torch.zeros((len(texts), T), dtype=self.dtype)
        for b, t in enumerate(texts):
            n = t.n_subtokens
            ids[b, :n] = torch.tensor(t.subtoken_ids)
            attn[b, :n] = True
            pool[b, :n] = torch.tensor([0.0 if s else 1.0 for s in t.special_mask], dtype=self.dtype)
        return ids, attn, pool

    def _run(self, embeds: torch.Tensor, attn: torch.Tensor):
        try:
            return self.backend.forward_embeddings(embeds, attn)
        except Exception as exc:  # backend errors surface uniformly
            raise EncoderFailure(str(exc)) from exc

    @staticmethod
    def _pool(hidden: torch.Tensor, pool: torch.Tensor) -> torch.Tensor:
        return (hidden * pool[..., None]).sum(1) / pool.sum(1, keepdim=True)

    def token_embeddings(self, text: TokenizedText) -> torch.Tensor:
        ids = torch.tensor([text.subtoken_ids], dtype=torch.long)
        with torch.no_grad():
            return self.backend.token_embeddings(ids)[0].to(self.dtype).clone()

    def mask_embedding(self) -> torch.Tensor:
        ids = torch.tensor([[self.tokenizer.mask_id]], dtype=torch.long)
        with torch.no_grad():
            return self.backend.token_embeddings(ids)[0, 0].to(self.dtype).clone()

    # -- public operations ---------------------------------------------

    def encode(self, text: TokenizedText) -> EncoderOutput:
        ids, attn, pool = self._pad([text])
        with torch.no_grad():
            hidden, attentions, logits = self._run(self.backend.token_embeddings(ids), attn)
        return self._output(hidden, attentions, logits, pool)

    def _output(self, hidden, attentions, logits, pool) -> EncoderOutput:
        emb = self._pool(hidden, pool)[0]
        return EncoderOutput(
            sentence_embedding=emb.detach().double().numpy(),
            hidden_states=hidden[0].detach().double().numpy(),
            attentions=torch.stack([a[0] for a in attentions]).detach().double().numpy(),
            logits=logits[0].detach().double().numpy(),
            predicted_class=int(logits[0].argmax()),
        )

    def loss_and_gradient(
        self,
        text: TokenizedText,
        embeds: torch.Tensor,
        target_class: int,
        loss_target: LossTarget = LossTarget.PREDICTED_CLASS,
    ) -> tuple[float, np.ndarray]:
        """Loss at arbitrary token embeddings ``embeds`` (T, d) and its gradient."""
        _, attn, _ = self._pad([text])
        with torch.enable_grad():
            x = embeds.detach().clone()[None].requires_grad_(True)
            _, _, logits = self._run(x, attn)
            loss = self._loss(logits, target_class, loss_target)
            (grad,) = torch.autograd.grad(loss, x)
        g = grad[0].double().numpy()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("embedding gradient contains NaN/Inf")
        return float(loss.detach()), g

    @staticmethod
    def _loss(logits: torch.Tensor, target_class: int, loss_target: LossTarget) -> torch.Tensor:
        if LossTarget(loss_target) is LossTarget.PREDICTED_CLASS:
            return F.cross_entropy(logits, torch.tensor([target_class]))
        return logits[0, target_class]

    def encode_with_gradients(
        self, text: TokenizedText, loss_target: LossTarget = LossTarget.PREDICTED_CLASS
    ) -> tuple[EncoderOutput, GradientBundle]:
        loss_target = LossTarget(loss_target)
        ids, attn, pool = self._pad([text])
        with torch.enable_grad():
            embeds = self.backend.token_embeddings(ids).detach().clone().requires_grad_(True)
            hidden, attentions, logits = self._run(embeds, attn)
            for a in attentions:
                a.retain_grad()
            pred = int(logits[0].argmax())
            loss = self._loss(logits, pred, loss_target)
            loss.backward()
        attn_grads = torch.stack([
            a.grad[0] if a.grad is not None else torch.zeros_like(a[0]) for a in attentions
        ])
        bundle = GradientBundle(
            embedding_grads=embeds.grad[0].double().numpy(),
            attention_grads=attn_grads.double().numpy(),
            loss_value=float(loss.detach()),
            loss_target=loss_target,
            target_class=pred,
        )
        if not (np.all(np.isfinite(bundle.embedding_grads)) and np.all(np.isfinite(bundle.attention_grads))):
            raise NonFiniteGradient("gradient contains NaN/Inf")
        return self._output(hidden, attentions, logits, pool), bundle

    def encode_masked(self, text: TokenizedText, word_index: int) -> np.ndarray:
        if not 0 <= word_index < text.n_words:
            raise IndexOutOfRange(f"word index {word_index} outside 0..{text.n_words - 1}")
        return self.encode_masked_batch(text, [word_index])[0]

    def encode_masked_batch(self, text: TokenizedText, word_indices: Sequence[int]) -> np.ndarray:
        """Sentence embeddings with each listed word masked in turn, in input order."""
        for k in word_indices:
            if not 0 <= k < text.n_words:
                raise IndexOutOfRange(f"word index {k} outside 0..{text.n_words - 1}")
        d = None
        rows = []
        for start in range(0, len(word_indices), self.batch_size):
            chunk = [text.masked(k) for k in word_indices[start:start + self.batch_size]]
            ids, attn, pool = self._pad(chunk)
            with torch.no_grad():
                hidden, _, _ = self._run(self.backend.token_embeddings(ids), attn)
            emb = self._pool(hidden, pool).double().numpy()
            rows.append(emb)
            d = emb.shape[1]
        if not rows:
            return np.zeros((0, d or 0))
        return np.concatenate(rows, axis=0)

    def predict_logits(self, texts: Sequence[TokenizedText]) -> np.ndarray:
        ids, attn, _ = self._pad(texts)
        with torch.no_grad():
            _, _, logits = self._run(self.backend.token_embeddings(ids), attn)
        return logits.double().numpy()

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.backend.named_parameters(), key=lambda kv: kv[0]):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @property
    def fingerprint(self) -> str:
        if self._checksum is None:
            self._checksum = self.parameter_checksum()
        return self._checksum


# -- construction ------------------------------------------------------


def build_stub(seed: int, constant: bool = False, max_length: int = 128) -> Encoder:
    """Deterministic 2-layer, 2-head, d=8 double-precision test encoder."""
    cfg = TransformerConfig(
        vocab_size=512, dim=8, n_layers=2, n_heads=2, ffn_dim=16,
        max_positions=max(max_length, 8), n_classes=2, dropout=0.0,
    )
    gen = torch.Generator().manual_seed(seed)
    model = TinyTransformer(cfg).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name or "ln" in name:
                continue
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
        if constant:
            model.classifier.weight.zero_()
    suffix = ":constant" if constant else ""
    return Encoder(f"stub:{seed}{suffix}", model, HashPieceTokenizer(512), max_length, dtype=torch.float64)


def save_tiny(model: TinyTransformer, tokenizer: WordPieceTokenizer, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(model.cfg), "state_dict": model.state_dict()}, directory / "model.pt")
    tokenizer.save(directory / "tokenizer.json")
    return directory


def load_tiny(directory: str | Path, max_length: int = 128) -> Encoder:
    directory = Path(directory)
    blob = torch.load(directory / "model.pt", weights_only=True)
    model = TinyTransformer(TransformerConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    tok = WordPieceTokenizer.load(directory / "tokenizer.json")
    max_length = min(max_length, model.cfg.max_positions)
    return Encoder(f"tiny:{directory}", model, tok, max_length, dtype=torch.float32)


def load_hf(name: str, max_length: int = 128) -> Encoder:
    from transformers import AutoModelForSequenceClassification, AutoTokenizer

    try:
        tok = AutoTokenizer.from_pretrained(name)
        model = AutoModelForSequenceClassification.from_pretrained(name, attn_implementation="eager")
    except Exception as exc:
        raise EncoderFailure(f"cannot load {name!r}: {exc}") from exc
    return Encoder(f"hf:{name}", HFBackend(model), HFPieceTokenizer(tok), max_length, dtype=torch.float32)


def load_encoder(name: str, max_length: int = 128) -> Encoder:
    kind, _, rest = name.partition(":")
    if kind == "stub":
        seed, _, flag = rest.partition(":")
        return build_stub(int(seed or 0), constant=(flag == "constant"), max_length=max_length)
    if kind == "tiny":
        return load_tiny(rest, max_length)
    if kind == "hf":
        return load_hf(rest, max_length)
    raise EncoderFailure(f"unknown encoder kind in {name!r}; expected stub:, tiny: or hf:")


def describe(encoder: Encoder) -> dict:
    return {
        "name": encoder.name,
        "max_length": encoder.max_length,
        "gradient_injection": GRADIENT_INJECTION,
        "parameter_checksum": encoder.fingerprint,
    }
