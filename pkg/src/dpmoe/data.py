"""Synthetic sequence-classification tasks with labels fixed by the tokens."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

TASKS = ("majority", "threshold-count")


@dataclass
class SyntheticTask:
    """``majority``: label 0 iff tokens from the lower half of the vocabulary
    outnumber those from the upper half (never tied). ``threshold-count``:
    label 1 iff ``target_token`` occurs at least ``threshold`` times.
    """

    task: str = "majority"
    vocab: int = 16
    length: int = 8
    size: int = 5000
    target_token: int = 0
    threshold: int = 2

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.vocab < 2 or self.length < 1 or self.size < 1:
            raise ConfigError("vocab >= 2, length >= 1 and size >= 1 are required")
        if self.task == "threshold-count":
            if not 0 <= self.target_token < self.vocab:
                raise ConfigError("target_token outside the vocabulary")
            if not 1 <= self.threshold <= self.length:
                raise ConfigError("threshold must lie in [1, length]")

    def label(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if self.task == "majority":
            low = (tokens < self.vocab // 2).sum(axis=1)
            return (low * 2 < tokens.shape[1]).astype(np.int64)
        return ((tokens == self.target_token).sum(axis=1) >= self.threshold).astype(np.int64)


@dataclass
class Dataset:
    tokens: np.ndarray  # [N, T] int64
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.labels)

    def save(self, path):
        Path(path).write_text(json.dumps({"tokens": self.tokens.tolist(), "labels": self.labels.tolist()}),
                              encoding="utf-8")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(np.asarray(d["tokens"], dtype=np.int64), np.asarray(d["labels"], dtype=np.int64))


def _fill(rng, counts, length, pool_a, pool_b):
    """Rows with ``counts[i]`` draws from pool_a and the rest from pool_b, shuffled."""
    n = len(counts)
    a = rng.choice(pool_a, size=(n, length))
    b = rng.choice(pool_b, size=(n, length))
    pos = np.argsort(rng.random((n, length)), axis=1)
    take_a = pos < counts[:, None]
    return np.where(take_a, a, b)


def generate_dataset(task: SyntheticTask, seed: int, val_fraction: float = 0.1):
    """Deterministic (train, validation) split of ``task.size`` samples (90/10 by default)."""
    rng = np.random.default_rng(seed)
    n, T, V = task.size, task.length, task.vocab
    labels = rng.integers(0, 2, size=n)
    if task.task == "majority":
        half = V // 2
        low_pool, high_pool = np.arange(half), np.arange(half, V)
        # label 0: strictly more than T/2 low tokens; label 1: strictly fewer
        lo0 = T // 2 + 1
        hi1 = (T - 1) // 2
        k0 = rng.integers(lo0, T + 1, size=n)
        k1 = rng.integers(0, hi1 + 1, size=n)
        counts = np.where(labels == 0, k0, k1)
        tokens = _fill(rng, counts, T, low_pool, high_pool)
    else:
        tgt = np.array([task.target_token])
        rest = np.array([v for v in range(V) if v != task.target_token])
        k1 = rng.integers(task.threshold, T + 1, size=n)
        k0 = rng.integers(0, task.threshold, size=n)
        counts = np.where(labels == 1, k1, k0)
        tokens = _fill(rng, counts, T, tgt, rest)
    tokens = tokens.astype(np.int64)
    labels = task.label(tokens)
    n_val = int(round(val_fraction * n))
    train = Dataset(tokens[: n - n_val], labels[: n - n_val])
    val = Dataset(tokens[n - n_val:], labels[n - n_val:])
    return train, val


def task_dict(task: SyntheticTask) -> dict:
    return asdict(task)
