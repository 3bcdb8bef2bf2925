"""Deterministic bag-of-words caption embedder (signed feature hashing).

Tokens are lowercase ASCII alphanumeric runs. Each token is hashed with
64-bit FNV-1a, mixed with the seed, and finalised with the splitmix64
mixer; the low bits pick a bucket and the top bit picks the sign. The
signed counts are L2-normalised. Nothing here depends on Python's
``hash`` or on the locale, so vectors are identical across platforms.
"""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from .io import CaptionRecord, EmbeddingMatrix

_MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
GOLDEN = 0x9E3779B97F4A7C15

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    # ASCII-only lowering so the result never depends on locale tables
    lowered = text.translate(_ASCII_LOWER)
    return _TOKEN_RE.findall(lowered)


_ASCII_LOWER = str.maketrans("ABCDEFGHIJKLMNOPQRSTUVWXYZ", "abcdefghijklmnopqrstuvwxyz")


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def token_hash(token: str, seed: int) -> int:
    return splitmix64(fnv1a64(token.encode("utf-8")) ^ (seed & _MASK64))


def toy_embed(caption: str, dim: int, seed: int = 0) -> tuple[np.ndarray, bool]:
    """Embed ``caption`` into a unit vector of length ``dim``.

    Returns ``(vector, fallback)``. ``fallback`` is True when the caption
    has no tokens (or its buckets cancel exactly); the vector is then the
    first basis vector.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(caption):
        h = token_hash(tok, seed)
        acc[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.sqrt(np.dot(acc, acc))
    if norm == 0.0:
        acc[0] = 1.0
        return acc, True
    return acc / norm, False


def embed_captions(
    records: Sequence[CaptionRecord], dim: int = 128, seed: int = 0
) -> tuple[EmbeddingMatrix, list[str]]:
    """Embed each record's effective caption; also return ids that fell back."""
    rows = np.empty((len(records), dim), dtype=np.float64)
    fallbacks = []
    for i, rec in enumerate(records):
        rows[i], fb = toy_embed(rec.text, dim, seed)
        if fb:
            fallbacks.append(rec.id)
    data = rows.astype(np.float32)
    # float32 rounding can push the norm off by ~1e-7; renormalise in f32
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    return EmbeddingMatrix(tuple(r.id for r in records), data), fallbacks
