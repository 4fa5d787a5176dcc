"""BiLSTM detector over sensitivity/importance traces.

Pipeline per text: z-score the two trace channels, append a non-zero mask
channel and a linear position channel, project 4 -> 64 (LayerNorm, GELU),
run a 2-layer bidirectional LSTM (64 per direction), pool with masked 2-head
self-attention, max and mean, and classify the 384-d concatenation.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import (
    CheckpointVersionError,
    EmptyBatch,
    NonFiniteLoss,
    SingleClassDataset,
    StatsNotFitted,
)
from .sensitivity import FeatureTensor

log = logging.getLogger(__name__)

EXPECTED_PARAMETERS = 257_154
CHECKPOINT_FORMAT = "repstab-detector"
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-8
BENIGN, ADVERSARIAL = 0, 1
LABELS = ("benign", "adversarial")


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 4
    proj_dim: int = 64
    hidden: int = 64
    lstm_layers: int = 2
    lstm_dropout: float = 0.3
    attn_heads: int = 2
    # not given explicitly; 64 is the width that yields 257,154 parameters
    head_hidden: int = 64
    head_dropout: float = 0.3


@dataclass
class TrainingConfig:
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 40
    patience: int = 5
    val_fraction: float = 0.10
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.patience, self.val_fraction) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, tensors: Sequence[FeatureTensor]) -> "NormalizationStats":
        """Per-channel mean/std over the non-zero entries of each channel."""
        mean, std = np.zeros(2), np.ones(2)
        for c in range(2):
            vals = np.concatenate([t.Z[:, c][t.Z[:, c] != 0] for t in tensors]) if tensors else np.zeros(0)
            if vals.size:
                mean[c] = vals.mean()
                std[c] = max(vals.std(), STD_FLOOR)
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class AugmentedInput:
    X: np.ndarray  # (N, 4)

    @property
    def valid_length(self) -> int:
        return self.X.shape[0]


def augment(tensor: FeatureTensor, stats: NormalizationStats | None) -> AugmentedInput:
    if stats is None:
        raise StatsNotFitted("normalization statistics have not been fitted")
    Z = tensor.Z
    n = Z.shape[0]
    X = np.zeros((n, 4))
    X[:, :2] = (Z - stats.mean) / stats.std
    X[:, 2] = np.any(Z != 0, axis=1)
    X[:, 3] = np.arange(n) / (n - 1) if n > 1 else 0.0
    return AugmentedInput(X)


def collate(batch: Sequence[AugmentedInput], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if not batch:
        raise EmptyBatch("cannot run the detector on an empty batch")
    n_max = max(a.valid_length for a in batch)
    X = torch.zeros((len(batch), n_max, 4), dtype=dtype)
    for b, a in enumerate(batch):
        X[b, : a.valid_length] = torch.as_tensor(a.X, dtype=dtype)
    lengths = torch.tensor([a.valid_length for a in batch], dtype=torch.long)
    return X, lengths


class BiLSTMDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Sequential(nn.Linear(cfg.in_channels, cfg.proj_dim), nn.LayerNorm(cfg.proj_dim), nn.GELU())
        self.lstm = nn.LSTM(
            cfg.proj_dim, cfg.hidden, num_layers=cfg.lstm_layers, batch_first=True,
            bidirectional=True, dropout=cfg.lstm_dropout if cfg.lstm_layers > 1 else 0.0,
        )
        width = 2 * cfg.hidden
        self.attn = nn.MultiheadAttention(width, cfg.attn_heads, batch_first=True)
        self.head = nn.Sequential(
            nn.Linear(3 * width, cfg.head_hidden), nn.GELU(), nn.Dropout(cfg.head_dropout),
            nn.Linear(cfg.head_hidden, 2),
        )
        if cfg == DetectorConfig() and self.n_parameters != EXPECTED_PARAMETERS:
            raise AssertionError(f"detector has {self.n_parameters} parameters, expected {EXPECTED_PARAMETERS}")

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, X: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        B, N, _ = X.shape
        if B == 0:
            raise EmptyBatch("empty batch")
        valid = torch.arange(N)[None, :] < lengths[:, None]
        focus = valid & (X[..., 2] > 0.5)
        # all-zero traces have no populated rows; fall back to every valid row
        focus = torch.where(focus.any(dim=1, keepdim=True), focus, valid)

        h = self.proj(X)
        packed = pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=N)

        ctx, _ = self.attn(out, out, out, key_padding_mask=~focus, need_weights=False)
        f = focus[..., None].to(out.dtype)
        att_vec = (ctx * f).sum(1) / f.sum(1)
        max_vec = out.masked_fill(~valid[..., None], float("-inf")).max(dim=1).values
        v = valid[..., None].to(out.dtype)
        avg_vec = (out * v).sum(1) / v.sum(1).clamp(min=1.0)
        return self.head(torch.cat([max_vec, att_vec, avg_vec], dim=-1))


def forward(model: BiLSTMDetector, batch: Sequence[AugmentedInput]) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    X, lengths = collate(batch, dtype)
    return model(X, lengths)


# -- training -----------------------------------------------------------


def f1_score(labels: np.ndarray, preds: np.ndarray) -> float:
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def stratified_split(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = max(1, int(round(fraction * len(idx))))
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


@dataclass
class TrainedDetector:
    model: BiLSTMDetector
    stats: NormalizationStats
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0
    config: TrainingConfig = field(default_factory=TrainingConfig)


def _predict_logits(model: BiLSTMDetector, inputs: Sequence[AugmentedInput], batch_size: int = 256) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([forward(model, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)])


def train(
    tensors: Sequence[FeatureTensor],
    labels: Sequence[int],
    config: TrainingConfig = TrainingConfig(),
    detector_config: DetectorConfig = DetectorConfig(),
) -> TrainedDetector:
    """Fit the detector; the best-validation-F1 checkpoint is restored at the end."""
    y = np.asarray(labels, dtype=int)
    if len(tensors) != len(y):
        raise ValueError("one label per tensor required")
    if len(set(y.tolist())) < 2:
        raise SingleClassDataset("training data must contain both classes")
    if len(y) < 20:
        raise ValueError("at least 20 training samples required")

    torch.manual_seed(config.seed)
    tr_idx, va_idx = stratified_split(y, config.val_fraction, config.seed)
    stats = NormalizationStats.fit([tensors[i] for i in tr_idx])
    inputs = [augment(t, stats) for t in tensors]
    tr_inputs = [inputs[i] for i in tr_idx]
    va_inputs = [inputs[i] for i in va_idx]
    y_tr = torch.as_tensor(y[tr_idx])
    y_va = y[va_idx]

    model = BiLSTMDetector(detector_config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)

    best_f1, best_epoch, best_state = -1.0, 0, None
    history = []
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = torch.randperm(len(tr_idx), generator=gen).tolist()
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            bidx = order[start:start + config.batch_size]
            logits = forward(model, [tr_inputs[i] for i in bidx])
            loss = F.cross_entropy(logits, y_tr[bidx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(bidx)
            seen += len(bidx)

        va_logits = _predict_logits(model, va_inputs)
        va_loss = float(F.cross_entropy(va_logits, torch.as_tensor(y_va)))
        va_pred = (va_logits[:, 1] > va_logits[:, 0]).long().numpy()
        va_f1 = f1_score(y_va, va_pred)
        history.append({
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": va_loss,
            "val_f1": va_f1,
            "val_accuracy": float(np.mean(va_pred == y_va)),
        })
        log.info("epoch %d train_loss %.4f val_f1 %.4f", epoch, total / seen, va_f1)
        if va_f1 > best_f1:
            best_f1, best_epoch = va_f1, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainedDetector(model, stats, history, best_epoch, best_f1, config)


def predict_scores(
    model: BiLSTMDetector, stats: NormalizationStats | None, tensors: Sequence[FeatureTensor]
) -> tuple[np.ndarray, np.ndarray]:
    """Adversarial-class probabilities and argmax labels (ties -> benign)."""
    if stats is None:
        raise StatsNotFitted("normalization statistics have not been fitted")
    logits = _predict_logits(model, [augment(t, stats) for t in tensors]).double()
    scores = torch.softmax(logits, dim=-1)[:, 1].numpy()
    labels = (logits[:, 1] > logits[:, 0]).long().numpy()
    return labels, scores


def predict(model: BiLSTMDetector, stats: NormalizationStats | None, tensor: FeatureTensor) -> tuple[str, float]:
    labels, scores = predict_scores(model, stats, [tensor])
    return LABELS[int(labels[0])], float(scores[0])


# -- checkpoints --------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    trained: TrainedDetector,
    config_hash: str = "",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(trained.model.cfg),
        "attention_pooling": "self-attention, masked mean over populated rows",
        "state_dict": trained.model.state_dict(),
        "stats": trained.stats.to_dict(),
        "training": asdict(trained.config),
        "seed": trained.config.seed,
        "config_hash": config_hash,
        "best_epoch": trained.best_epoch,
        "best_val_f1": trained.best_val_f1,
        "log": trained.log,
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainedDetector, dict]:
    blob = torch.load(Path(path), weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
            f"found {blob.get('format')} v{blob.get('version')}"
        )
    model = BiLSTMDetector(DetectorConfig(**blob["architecture"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    trained = TrainedDetector(
        model, NormalizationStats.from_dict(blob["stats"]), blob["log"],
        blob["best_epoch"], blob["best_val_f1"], TrainingConfig(**blob["training"]),
    )
    return trained, blob
