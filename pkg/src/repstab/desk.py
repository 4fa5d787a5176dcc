"""Desk-scale victim setup: a synthetic sentiment corpus, a small transformer
classifier trained on it, and greedy single-word synonym substitution.

Synonym groups share polarity by construction, so a successful substitution
keeps the intended label while flipping the classifier.  Rarely seen synonyms
are the weak spot the attack finds.

Run ``python -m repstab.desk --out DIR`` to materialize ``DIR/model`` (an
encoder loadable as ``tiny:DIR/model``) and ``DIR/corpus.jsonl``.
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import Encoder, TinyTransformer, TransformerConfig, load_tiny, save_tiny
from .tokenization import WordPieceTokenizer

log = logging.getLogger(__name__)

POSITIVE = [
    ["good", "fine", "decent", "solid"],
    ["great", "grand", "superb", "terrific"],
    ["excellent", "exemplary", "stellar", "outstanding"],
    ["wonderful", "marvelous", "delightful", "lovely"],
    ["amazing", "astonishing", "stunning", "remarkable"],
    ["brilliant", "dazzling", "masterful", "inspired"],
    ["enjoyable", "entertaining", "pleasurable", "fun"],
    ["beautiful", "gorgeous", "exquisite", "elegant"],
    ["charming", "endearing", "winsome", "likable"],
    ["perfect", "flawless", "impeccable", "ideal"],
    ["moving", "touching", "poignant", "stirring"],
    ["clever", "witty", "ingenious", "smart"],
    ["fantastic", "fabulous", "phenomenal", "splendid"],
    ["best", "finest", "greatest", "choicest"],
    ["love", "adore", "cherish", "treasure"],
    ["recommend", "endorse", "praise", "applaud"],
]
NEGATIVE = [
    ["bad", "poor", "lousy", "shoddy"],
    ["awful", "dreadful", "atrocious", "abysmal"],
    ["terrible", "horrible", "appalling", "horrid"],
    ["boring", "dull", "tedious", "monotonous"],
    ["worst", "lowest", "weakest", "feeblest"],
    ["waste", "squander", "misuse", "drain"],
    ["stupid", "dumb", "idiotic", "foolish"],
    ["ugly", "hideous", "unsightly", "grotesque"],
    ["weak", "flimsy", "feeble", "frail"],
    ["mess", "shambles", "muddle", "jumble"],
    ["disappointing", "underwhelming", "unsatisfying", "lackluster"],
    ["annoying", "irritating", "grating", "tiresome"],
    ["hate", "loathe", "detest", "despise"],
    ["pointless", "futile", "aimless", "meaningless"],
    ["bland", "insipid", "vapid", "flat"],
    ["clumsy", "awkward", "inept", "bungling"],
]
FILLER = (
    "the a an this that movie film story plot actor actress cast director scene scenes "
    "script ending character characters music score camera it was is were and but with "
    "of in on to for as at by from its their his her very quite rather really some many "
    "every time moment part first second final screen show series role performance "
    "dialogue setting audience watch watched saw felt seemed looked then also"
).split()

# probability of each member of a synonym group when a sentiment word is drawn
MEMBER_WEIGHTS = np.array([0.75, 0.21, 0.02, 0.02])


@dataclass
class DeskConfig:
    seed: int = 0
    n_train: int = 3000
    n_attack_pool: int = 900
    n_pairs: int = 300
    min_words: int = 50
    max_words: int = 80
    vocab_size: int = 400
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    epochs: int = 4
    max_substitutions: int = 12


def synonym_index() -> dict[str, tuple[int, int]]:
    """word -> (polarity, group id); polarity 1 positive, 0 negative."""
    out = {}
    for pol, groups in ((1, POSITIVE), (0, NEGATIVE)):
        for g, members in enumerate(groups):
            for w in members:
                out[w] = (pol, g)
    return out


def _draw_word(rng: np.random.Generator, polarity: int) -> str:
    groups = POSITIVE if polarity == 1 else NEGATIVE
    members = groups[rng.integers(len(groups))]
    return members[rng.choice(4, p=MEMBER_WEIGHTS)]


def generate_review(rng: np.random.Generator, label: int, min_words: int, max_words: int) -> str:
    n = int(rng.integers(min_words, max_words + 1))
    major = int(rng.integers(3, 7))
    minor = int(rng.integers(0, 3))
    words = [FILLER[i] for i in rng.integers(len(FILLER), size=n - major - minor)]
    sentiment = [_draw_word(rng, label) for _ in range(major)] + [_draw_word(rng, 1 - label) for _ in range(minor)]
    for w in sentiment:
        words.insert(int(rng.integers(len(words) + 1)), w)
    return " ".join(words)


def generate_corpus(rng: np.random.Generator, n: int, cfg: DeskConfig) -> list[tuple[str, int]]:
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    return [(generate_review(rng, int(y), cfg.min_words, cfg.max_words), int(y)) for y in labels]


def train_classifier(data: list[tuple[str, int]], cfg: DeskConfig) -> Encoder:
    torch.manual_seed(cfg.seed)
    tok = WordPieceTokenizer.train([t for t, _ in data], vocab_size=cfg.vocab_size)
    tcfg = TransformerConfig(
        vocab_size=tok.vocab_size, dim=cfg.dim, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        ffn_dim=2 * cfg.dim, max_positions=256, n_classes=2, dropout=0.1,
    )
    model = TinyTransformer(tcfg)
    enc = Encoder("tiny:unsaved", model, tok, max_length=256)
    for p in model.parameters():
        p.requires_grad_(True)
    texts = [enc.tokenize(t) for t, _ in data]
    y = torch.tensor([lab for _, lab in data])
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=0.01)
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(texts), generator=gen).tolist()
        total = 0.0
        for s in range(0, len(order), 32):
            idx = order[s:s + 32]
            ids, attn, _ = enc._pad([texts[i] for i in idx])
            loss = F.cross_entropy(model(ids, attn), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.info("classifier epoch %d loss %.4f", epoch + 1, total / len(texts))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return enc


def greedy_synonym_attack(
    encoder: Encoder, text: str, label: int, max_substitutions: int = 12
) -> tuple[str, list[int]] | None:
    """Swap one word for a same-polarity synonym at a time, each step taking the
    swap that most lowers the true-class probability, until the prediction flips.

    Returns ``(adversarial text, perturbed word indices)`` or ``None``.
    """
    index = synonym_index()
    groups = {1: POSITIVE, 0: NEGATIVE}
    words = text.split()
    changed: set[int] = set()
    for _ in range(max_substitutions):
        candidates = []
        for i, w in enumerate(words):
            if i in changed or w not in index:
                continue
            pol, g = index[w]
            for alt in groups[pol][g]:
                if alt != w:
                    candidates.append((i, alt))
        if not candidates:
            return None
        variants = []
        for i, alt in candidates:
            v = list(words)
            v[i] = alt
            variants.append(encoder.tokenize(v))
        probs = torch.softmax(torch.as_tensor(encoder.predict_logits(variants)), dim=-1)[:, label].numpy()
        best = int(np.argmin(probs))
        i, alt = candidates[best]
        words[i] = alt
        changed.add(i)
        if probs[best] < 0.5:
            return " ".join(words), sorted(changed)
    return None


def build_desk_setup(out_dir: str | Path, cfg: DeskConfig = DeskConfig()) -> tuple[Path, Path]:
    """Train the victim and write the paired benign/adversarial corpus.

    Returns (model directory, corpus path).  Reuses an existing setup.
    """
    out_dir = Path(out_dir)
    model_dir, corpus_path = out_dir / "model", out_dir / "corpus.jsonl"
    if (model_dir / "model.pt").exists() and corpus_path.exists():
        return model_dir, corpus_path
    rng = np.random.default_rng(cfg.seed)
    train_data = generate_corpus(rng, cfg.n_train, cfg)
    enc = train_classifier(train_data, cfg)
    save_tiny(enc.backend, enc.tokenizer, model_dir)
    enc = load_tiny(model_dir, max_length=256)

    pool = generate_corpus(rng, cfg.n_attack_pool, cfg)
    records = []
    n_pairs = 0
    for j, (text, label) in enumerate(pool):
        if n_pairs >= cfg.n_pairs:
            break
        if int(enc.predict_logits([enc.tokenize(text)])[0].argmax()) != label:
            continue
        result = greedy_synonym_attack(enc, text, label, cfg.max_substitutions)
        if result is None:
            continue
        adv, perturbed = result
        pid = f"p{j:05d}"
        records.append({"id": f"{pid}-b", "text": text, "label": "benign", "pair_id": pid})
        records.append({
            "id": f"{pid}-a", "text": adv, "label": "adversarial", "pair_id": pid,
            "perturbed_indices": perturbed,
        })
        n_pairs += 1
    if n_pairs < cfg.n_pairs:
        log.warning("only %d successful attacks out of %d requested", n_pairs, cfg.n_pairs)
    corpus_path.parent.mkdir(parents=True, exist_ok=True)
    with open(corpus_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return model_dir, corpus_path


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="Build the desk-scale victim classifier and attack corpus.")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pairs", type=int, default=300)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    model_dir, corpus = build_desk_setup(args.out, DeskConfig(seed=args.seed, n_pairs=args.pairs))
    print(f"encoder: tiny:{model_dir}\ncorpus:  {corpus}")


if __name__ == "__main__":
    main()
