"""Word segmentation and word-to-subtoken alignment.

Words are whitespace-split surface tokens (punctuation stays attached).  Each
word is tokenized independently into subword pieces so that the span of every
word inside the encoder input is known exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import AlignmentFailure, EmptyText, IndexOutOfRange

MASK_TOKEN = "[MASK]"


class PieceTokenizer(Protocol):
    cls_id: int
    sep_id: int
    pad_id: int
    mask_id: int
    mask_token: str
    vocab_size: int

    def word_pieces(self, word: str, first: bool = False) -> list[int]: ...


@dataclass(frozen=True)
class TokenizedText:
    """One input text with its word/subtoken alignment.

    ``word_spans[k]`` is a ``range`` of subtoken positions belonging to word k.
    Special positions ([CLS], [SEP]) are flagged in ``special_mask``.
    """

    words: tuple[str, ...]
    subtoken_ids: tuple[int, ...]
    word_spans: tuple[range, ...]
    special_mask: tuple[bool, ...]
    mask_token_id: int
    truncated_words: int = field(default=0, compare=False)

    def __post_init__(self):
        validate_alignment(self)

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_subtokens(self) -> int:
        return len(self.subtoken_ids)

    def span(self, word_index: int) -> range:
        if not 0 <= word_index < len(self.words):
            raise IndexOutOfRange(f"word index {word_index} outside 0..{len(self.words) - 1}")
        return self.word_spans[word_index]

    def masked(self, word_index: int) -> "TokenizedText":
        """Copy with word ``word_index`` collapsed to a single mask subtoken."""
        span = self.span(word_index)
        ids = list(self.subtoken_ids)
        special = list(self.special_mask)
        ids[span.start:span.stop] = [self.mask_token_id]
        special[span.start:span.stop] = [False]
        shift = len(span) - 1
        spans = []
        for k, s in enumerate(self.word_spans):
            if k < word_index:
                spans.append(s)
            elif k == word_index:
                spans.append(range(s.start, s.start + 1))
            else:
                spans.append(range(s.start - shift, s.stop - shift))
        words = list(self.words)
        words[word_index] = MASK_TOKEN
        return TokenizedText(tuple(words), tuple(ids), tuple(spans), tuple(special), self.mask_token_id)


def validate_alignment(text: TokenizedText) -> None:
    n_tok = len(text.subtoken_ids)
    if len(text.special_mask) != n_tok:
        raise AlignmentFailure("special_mask length differs from subtoken_ids")
    if not text.words:
        raise EmptyText("text has no words")
    if len(text.word_spans) != len(text.words):
        raise AlignmentFailure("one span per word required")
    covered = []
    for k, span in enumerate(text.word_spans):
        if len(span) == 0 or span.step != 1:
            raise AlignmentFailure(f"word {k} has an empty or non-contiguous span")
        covered.extend(span)
    non_special = [i for i, sp in enumerate(text.special_mask) if not sp]
    if covered != non_special:
        raise AlignmentFailure("word spans do not partition the non-special subtokens")


def split_words(raw_text: str) -> list[str]:
    return raw_text.split()


def align(
    raw_text: str | Sequence[str],
    tokenizer: PieceTokenizer,
    max_length: int,
) -> TokenizedText:
    """Tokenize ``raw_text`` word by word, truncating whole trailing words."""
    words = split_words(raw_text) if isinstance(raw_text, str) else list(raw_text)
    if not words:
        raise EmptyText("no words after trimming")
    if max_length < 3:
        raise ValueError("max_length must leave room for [CLS], one subtoken and [SEP]")
    ids = [tokenizer.cls_id]
    spans: list[range] = []
    kept: list[str] = []
    budget = max_length - 1  # reserve [SEP]
    for k, word in enumerate(words):
        if word == tokenizer.mask_token:
            pieces = [tokenizer.mask_id]
        else:
            pieces = tokenizer.word_pieces(word, first=(k == 0))
        if not pieces:
            raise AlignmentFailure(f"word {k} ({word!r}) produced no subtokens")
        if len(ids) + len(pieces) > budget:
            break
        spans.append(range(len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
        kept.append(word)
    if not kept:
        raise EmptyText("first word alone exceeds max_length")
    ids.append(tokenizer.sep_id)
    special = [True] + [False] * (len(ids) - 2) + [True]
    return TokenizedText(
        tuple(kept), tuple(ids), tuple(spans), tuple(special), tokenizer.mask_id,
        truncated_words=len(words) - len(kept),
    )


def span_sum(values: np.ndarray, text: TokenizedText) -> np.ndarray:
    """Sum per-subtoken ``values`` over each word's span."""
    return np.array([float(np.sum(values[s.start:s.stop])) for s in text.word_spans])


class HashPieceTokenizer:
    """Deterministic vocabulary-free tokenizer used by the stub encoder.

    Lower-cased words are cut into chunks of ``chunk`` characters and each
    chunk is hashed (crc32) into the id range above the reserved ids.
    """

    pad_id, cls_id, sep_id, mask_id, unk_id = 0, 1, 2, 3, 4
    mask_token = MASK_TOKEN
    n_reserved = 5

    def __init__(self, vocab_size: int = 512, chunk: int = 4):
        if vocab_size <= self.n_reserved:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size
        self.chunk = chunk

    def word_pieces(self, word: str, first: bool = False) -> list[int]:
        w = word.lower()
        pieces = [w[i:i + self.chunk] for i in range(0, len(w), self.chunk)]
        out = []
        for j, p in enumerate(pieces):
            key = (p if j == 0 else "##" + p).encode("utf-8")
            out.append(self.n_reserved + zlib.crc32(key) % (self.vocab_size - self.n_reserved))
        return out


class WordPieceTokenizer:
    """Thin wrapper over a trained ``tokenizers`` WordPiece model."""

    special_tokens = ["[PAD]", "[CLS]", "[SEP]", MASK_TOKEN, "[UNK]"]
    mask_token = MASK_TOKEN

    def __init__(self, backend):
        self.backend = backend
        self.pad_id = backend.token_to_id("[PAD]")
        self.cls_id = backend.token_to_id("[CLS]")
        self.sep_id = backend.token_to_id("[SEP]")
        self.mask_id = backend.token_to_id(MASK_TOKEN)
        self.unk_id = backend.token_to_id("[UNK]")
        self.vocab_size = backend.get_vocab_size()

    @classmethod
    def train(cls, texts: Sequence[str], vocab_size: int = 2000) -> "WordPieceTokenizer":
        """Frequency-merge WordPiece vocabulary, as the ``tokenizers`` trainer
        builds it, but with ties broken by piece order instead of hash order.

        The bundled WordPieceTrainer picks different merges on every process
        start, which makes a trained victim irreproducible; its normalizer,
        pre-tokenizer and WordPiece runtime are still used as-is.
        """
        from collections import Counter

        from tokenizers import Tokenizer, models, normalizers, pre_tokenizers

        normalizer = normalizers.BertNormalizer(lowercase=True)
        pre = pre_tokenizers.BertPreTokenizer()
        counts: Counter[str] = Counter()
        for t in texts:
            counts.update(w for w, _ in pre.pre_tokenize_str(normalizer.normalize_str(t)))

        words = {w: [w[0]] + [f"##{c}" for c in w[1:]] for w in counts}
        alphabet = sorted({p for pieces in words.values() for p in pieces})
        vocab = list(cls.special_tokens) + alphabet
        if len(vocab) > vocab_size:
            raise ValueError(f"vocab_size {vocab_size} cannot hold the {len(vocab)} base pieces")
        known = set(vocab)
        while len(vocab) < vocab_size:
            pairs: Counter[tuple[str, str]] = Counter()
            for w, pieces in words.items():
                for a, b in zip(pieces, pieces[1:]):
                    pairs[(a, b)] += counts[w]
            if not pairs:
                break
            (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
            merged = a + b[2:]
            for w, pieces in words.items():
                i, out = 0, []
                while i < len(pieces):
                    if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
                        out.append(merged)
                        i += 2
                    else:
                        out.append(pieces[i])
                        i += 1
                words[w] = out
            if merged not in known:
                known.add(merged)
                vocab.append(merged)
        tok = Tokenizer(models.WordPiece({p: i for i, p in enumerate(vocab)}, unk_token="[UNK]"))
        tok.normalizer = normalizer
        tok.pre_tokenizer = pre
        return cls(tok)

    @classmethod
    def load(cls, path: str | Path) -> "WordPieceTokenizer":
        from tokenizers import Tokenizer

        return cls(Tokenizer.from_file(str(path)))

    def save(self, path: str | Path) -> None:
        self.backend.save(str(path))

    def word_pieces(self, word: str, first: bool = False) -> list[int]:
        return list(self.backend.encode(word, add_special_tokens=False).ids)


class HFPieceTokenizer:
    """Adapter for a ``transformers`` tokenizer (BERT- or BPE-style)."""

    def __init__(self, hf_tokenizer):
        self.hf = hf_tokenizer
        self.cls_id = hf_tokenizer.cls_token_id if hf_tokenizer.cls_token_id is not None else hf_tokenizer.bos_token_id
        self.sep_id = hf_tokenizer.sep_token_id if hf_tokenizer.sep_token_id is not None else hf_tokenizer.eos_token_id
        self.pad_id = hf_tokenizer.pad_token_id if hf_tokenizer.pad_token_id is not None else 0
        self.mask_id = hf_tokenizer.mask_token_id
        self.mask_token = hf_tokenizer.mask_token
        self.vocab_size = len(hf_tokenizer)
        # byte-level BPE vocabularies encode the preceding space into the piece
        probe = hf_tokenizer.tokenize(" a")
        self._space_prefix = bool(probe) and probe[0].startswith(("Ġ", "▁"))

    def word_pieces(self, word: str, first: bool = False) -> list[int]:
        surface = word if (first or not self._space_prefix) else " " + word
        return list(self.hf.encode(surface, add_special_tokens=False))
