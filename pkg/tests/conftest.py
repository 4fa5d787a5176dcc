import json
import os
from pathlib import Path

import numpy as np
import pytest

from repstab.corpus import CorpusRecord
from repstab.encoder import load_encoder


@pytest.fixture(scope="session")
def stub():
    return load_encoder("stub:0")


@pytest.fixture(scope="session")
def constant_stub():
    return load_encoder("stub:0:constant")


@pytest.fixture(autouse=True)
def _no_env_cache(monkeypatch):
    monkeypatch.delenv("REPSTAB_CACHE_DIR", raising=False)


def synthetic_records(n_pairs: int = 20, seed: int = 0) -> list[CorpusRecord]:
    """Paired toy corpus for pipeline tests (one substituted word per pair)."""
    rng = np.random.default_rng(seed)
    vocab = "the film was a very good bad plot actor story and but quite dull fine great awful scene".split()
    out = []
    for i in range(n_pairs):
        words = [vocab[j] for j in rng.integers(len(vocab), size=int(rng.integers(6, 14)))]
        pos = int(rng.integers(len(words)))
        adv = list(words)
        adv[pos] = "zyxqv"
        out.append(CorpusRecord(f"b{i:03d}", " ".join(words), "benign", f"p{i:03d}"))
        out.append(CorpusRecord(f"a{i:03d}", " ".join(adv), "adversarial", f"p{i:03d}", (pos,)))
    return out


@pytest.fixture
def toy_corpus(tmp_path) -> Path:
    path = tmp_path / "corpus.jsonl"
    with open(path, "w") as fh:
        for r in synthetic_records():
            fh.write(r.to_json() + "\n")
    return path


@pytest.fixture(scope="session")
def desk_setup(tmp_path_factory):
    """Desk-scale victim + attack corpus; REPSTAB_DESK_DIR reuses a prebuilt one."""
    from repstab.desk import build_desk_setup

    root = os.environ.get("REPSTAB_DESK_DIR")
    out = Path(root) if root else tmp_path_factory.mktemp("desk")
    model_dir, corpus = build_desk_setup(out)
    return model_dir, corpus


def read_lines(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def spike_dataset(n: int = 400, seed: int = 0, length=(30, 60), k: int = 20):
    """Sparse N x 2 traces; adversarial ones carry one large-sensitivity spike."""
    from repstab.sensitivity import FeatureTensor

    rng = np.random.default_rng(seed)
    tensors, labels = [], []
    for i in range(n):
        N = int(rng.integers(*length))
        sel = rng.choice(N, size=min(k, N), replace=False)
        Z = np.zeros((N, 2))
        Z[sel, 0] = rng.uniform(0.005, 0.02, size=len(sel))
        Z[sel, 1] = rng.uniform(0.1, 1.0, size=len(sel))
        y = i % 2
        if y:
            Z[rng.choice(sel), 0] = rng.uniform(0.15, 0.3)
        tensors.append(FeatureTensor(Z))
        labels.append(y)
    return tensors, labels


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
