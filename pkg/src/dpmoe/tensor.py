"""Dense float64 kernel: shape-checked products, stable softmax, seeded noise.

Tensors are plain C-ordered ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

DTYPE = np.float64


def as_tensor(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes; leading axes are batched.

    Raises ShapeError when the inner extents differ.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    return np.matmul(a, b)


def softmax(logits, axis: int = -1) -> np.ndarray:
    logits = as_tensor(logits)
    if logits.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = as_tensor(logits)
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def stream_id(name: str) -> int:
    """Stable 32-bit stream id for a string key (CRC-32)."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass
class RngState:
    """Seeded generator for one consumer.

    ``(seed, stream_id)`` selects an independent PCG64 stream via numpy's
    SeedSequence. The generator advances only when a draw is made from it.
    Normal variates come from numpy's ziggurat sampler (``standard_normal``).
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ParameterError("seed and stream_id must be non-negative")
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, *keys: int) -> "RngState":
        """A fresh state on a derived stream; ``self`` is not advanced."""
        sid = self.stream_id
        for k in keys:
            sid = zlib.crc32(np.asarray([sid, k], dtype=np.uint64).tobytes())
        return RngState(self.seed, sid)


def gaussian(shape, rng: RngState, sigma: float = 1.0) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    draw = rng.generator.standard_normal(size=tuple(shape))
    if sigma == 0:
        return np.zeros(tuple(shape), dtype=DTYPE)
    return draw * sigma
