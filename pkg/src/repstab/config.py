"""Flat key-value configuration.

File format: one ``key = value`` per line, ``#`` starts a comment.  Unknown
keys are rejected.  CLI flags override file values.

Keys (type, default):

    encoder.name          str    stub:0
    encoder.max_length    int    128
    encoder.batch_size    int    32     masked variants per encoder batch
    importance.method     str    grad   grad | rollout | gradsam | random | ig
    importance.k          int    20
    importance.seed       int    0
    ig.steps              int    50
    ig.baseline           str    mask   mask | zero
    gradsam.relu          bool   false
    train.lr              float  5e-4
    train.batch_size      int    32
    train.max_epochs      int    40
    train.patience        int    5
    train.val_fraction    float  0.1
    train.weight_decay    float  0.01
    train.seed            int    0
    run.ingest_tolerance  float  0.01   abort ingest above this malformed-line fraction
    run.trace_tolerance   float  0.05   fail a trace run above this failed-record fraction
    run.workers           int    1
    run.deterministic     bool   false  canonical reports (no timestamps/timings)
    cache.dir             str    ""     default <out-dir>/cache; REPSTAB_CACHE_DIR wins
    eval.k                int    20
    eval.max_k            int    20     NDCG curve runs k = 1..max_k
    eval.bins             str    1,4,7,10,13,16,21
    sweep.ks              str    5,10,20,50
    split.test_fraction   float  0.2    pair-level split when no test corpus is given
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

SCHEMA: dict[str, tuple[type, Any]] = {
    "encoder.name": (str, "stub:0"),
    "encoder.max_length": (int, 128),
    "encoder.batch_size": (int, 32),
    "importance.method": (str, "grad"),
    "importance.k": (int, 20),
    "importance.seed": (int, 0),
    "ig.steps": (int, 50),
    "ig.baseline": (str, "mask"),
    "gradsam.relu": (bool, False),
    "train.lr": (float, 5e-4),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 40),
    "train.patience": (int, 5),
    "train.val_fraction": (float, 0.1),
    "train.weight_decay": (float, 0.01),
    "train.seed": (int, 0),
    "run.ingest_tolerance": (float, 0.01),
    "run.trace_tolerance": (float, 0.05),
    "run.workers": (int, 1),
    "run.deterministic": (bool, False),
    "cache.dir": (str, ""),
    "eval.k": (int, 20),
    "eval.max_k": (int, 20),
    "eval.bins": (str, "1,4,7,10,13,16,21"),
    "sweep.ks": (str, "5,10,20,50"),
    "split.test_fraction": (float, 0.2),
}

# keys that change trace contents; everything else leaves caches valid
TRACE_KEYS = (
    "encoder.name", "encoder.max_length", "importance.method", "importance.k",
    "importance.seed", "ig.steps", "ig.baseline", "gradsam.relu",
)
METHODS = ("grad", "rollout", "gradsam", "random", "ig")


def _coerce(key: str, value: Any) -> Any:
    typ, _ = SCHEMA[key]
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    if typ is bool:
        s = str(value).strip().lower()
        if s in {"1", "true", "yes", "on"}:
            return True
        if s in {"0", "false", "no", "off"}:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc


def int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


class Config:
    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            self.update(values)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            cfg.update(parse_file(path))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def update(self, values: Mapping[str, Any]) -> None:
        for key, value in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)
        if self.values["importance.method"] not in METHODS:
            raise ConfigError(f"importance.method must be one of {METHODS}")
        if self.values["importance.k"] < 1:
            raise ConfigError("importance.k must be >= 1")

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **values: Any) -> "Config":
        cfg = Config(self.values)
        cfg.update({k.replace("__", "."): v for k, v in values.items()})
        return cfg

    def as_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def trace_hash(self, encoder_identity: str) -> str:
        blob = {k: self.values[k] for k in TRACE_KEYS}
        blob["encoder.identity"] = encoder_identity
        return digest(blob)


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def parse_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out
