"""Exact cosine nearest-neighbour pairing over caption embeddings.

Two routes compute the same thing:

* :func:`nn_oracle` scans one query against every row with a scalar loop.
* :func:`build_pair_manifest` tiles queries and candidates into blocks,
  multiplies each tile in float64 and keeps every candidate within a small
  slack of the running best. Tile rounding depends on where a row sits in
  the tile, so when more than one candidate survives they are re-scored
  with an exactly rounded dot product and the lowest index wins ties.

Rows are unit-norm so the dot product is the cosine similarity.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, NoNeighborError, ValidationError
from .io import EmbeddingMatrix, Pair, PairManifest


@dataclass(frozen=True)
class NNQueryConfig:
    exclude_self: bool = True
    block_size: int = 256
    tie_break: str = "lowest-index"

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.tie_break != "lowest-index":
            raise ConfigError(f"unsupported tie_break {self.tie_break!r}")


_scan_kernel = None


def _get_scan_kernel():
    global _scan_kernel
    if _scan_kernel is None:
        import numba

        @numba.njit(fastmath=True)
        def scan(data, q, exclude_self):
            n, d = data.shape
            best = -np.inf
            best_j = -1
            for j in range(n):
                if exclude_self and j == q:
                    continue
                s = 0.0
                for k in range(d):
                    s += data[q, k] * data[j, k]
                if s > best:
                    best = s
                    best_j = j
            return best_j, best

        @numba.njit(fastmath=True)
        def scan_all(data, exclude_self):
            n = data.shape[0]
            idx = np.empty(n, dtype=np.int64)
            sim = np.empty(n, dtype=np.float64)
            for q in range(n):
                idx[q], sim[q] = scan(data, q, exclude_self)
            return idx, sim

        _scan_kernel = (scan, scan_all)
    return _scan_kernel


def _check_query(n: int, cfg: NNQueryConfig) -> None:
    if n == 0 or (cfg.exclude_self and n < 2):
        raise NoNeighborError(f"no neighbour candidates in a {n}-row matrix")


def nn_oracle(m: EmbeddingMatrix, query_index: int, cfg: NNQueryConfig = NNQueryConfig()):
    """Reference scan: (neighbor_index, similarity) for one query row."""
    n = len(m)
    _check_query(n, cfg)
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range for {n} rows")
    scan, _ = _get_scan_kernel()
    j, s = scan(m.data.astype(np.float64), query_index, cfg.exclude_self)
    return int(j), float(s)


def nn_oracle_all(m: EmbeddingMatrix, cfg: NNQueryConfig = NNQueryConfig()):
    """:func:`nn_oracle` for every row; returns (indices, similarities)."""
    _check_query(len(m), cfg)
    _, scan_all = _get_scan_kernel()
    return scan_all(m.data.astype(np.float64), cfg.exclude_self)


# gemm rounding error is at most ~d * 2**-53 for unit rows (about 6e-14 at
# d=512); anything this close to the tile winner is re-scored exactly
TIE_SLACK = 1e-12


def _search_block(data: np.ndarray, start: int, stop: int, block: int, exclude_self: bool):
    q = data[start:stop]
    nq = stop - start
    best = np.full(nq, -np.inf)
    near_q, near_j, near_v = [], [], []
    for c0 in range(0, data.shape[0], block):
        c1 = min(c0 + block, data.shape[0])
        s = q @ data[c0:c1].T
        if exclude_self and c0 < stop and start < c1:
            # mask the diagonal where the query range overlaps this tile
            lo, hi = max(start, c0), min(stop, c1)
            r = np.arange(lo, hi)
            s[r - start, r - c0] = -np.inf
        best = np.maximum(best, s.max(axis=1))
        qi, ji = np.nonzero(s >= (best - TIE_SLACK)[:, None])
        near_q.append(qi)
        near_j.append(ji + c0)
        near_v.append(s[qi, ji])
    qi, ji, vi = (np.concatenate(a) for a in (near_q, near_j, near_v))
    keep = vi >= best[qi] - TIE_SLACK
    qi, ji = qi[keep], ji[keep]
    # candidates come out grouped by tile; order by (query, index)
    order = np.lexsort((ji, qi))
    qi, ji = qi[order], ji[order]
    best_j = np.empty(nq, dtype=np.int64)
    first = np.r_[0, np.flatnonzero(np.diff(qi)) + 1]
    last = np.r_[first[1:], qi.size]
    for a, b in zip(first, last):
        if b - a == 1:
            best_j[qi[a]] = ji[a]
            continue
        # near tie: exact dot products decide, lowest index on equality
        row = q[qi[a]]
        exact = [math.fsum(row * data[j]) for j in ji[a:b]]
        best_j[qi[a]] = ji[a + int(np.argmax(exact))]
    return best_j


def nearest_neighbors(
    data: np.ndarray, cfg: NNQueryConfig = NNQueryConfig(), threads: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Blocked exact search on a raw matrix; returns (indices, similarities)."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    n = data.shape[0]
    _check_query(n, cfg)
    block = cfg.block_size
    starts = list(range(0, n, block))
    idx = np.empty(n, dtype=np.int64)
    def work(start):
        stop = min(start + block, n)
        idx[start:stop] = _search_block(data, start, stop, block, cfg.exclude_self)

    threads = threads or os.cpu_count() or 1
    if threads > 1 and len(starts) > 1:
        # workers own disjoint query ranges, so the merge is just placement
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    # tile-level gemm rounding depends on the block layout; recompute the
    # winning similarities row by row so the reported value does not
    sim = np.einsum("ij,ij->i", data, data[idx])
    return idx, sim


def build_pair_manifest(
    m: EmbeddingMatrix, cfg: NNQueryConfig = NNQueryConfig(), threads: int | None = None
) -> PairManifest:
    idx, sim = nearest_neighbors(m.data, cfg, threads)
    ids = m.ids
    entries = []
    for q in range(len(ids)):
        s = float(np.clip(sim[q], -1.0, 1.0))
        entries.append(Pair(ids[q], ids[idx[q]], s))
    if not cfg.exclude_self:
        # a self match is legal in this mode but PairManifest forbids it
        entries = [e for e in entries if e.query_id != e.neighbor_id]
    return PairManifest(tuple(entries))


@dataclass(frozen=True)
class ManifestStats:
    count: int
    mean_similarity: float
    min_similarity: float
    same_class_rate: float | None = None


def manifest_stats(p: PairManifest, labels: Mapping[str, object] | None = None) -> ManifestStats:
    if len(p) == 0:
        raise ValidationError("empty manifest")
    sims = np.array([e.similarity for e in p.entries])
    rate = None
    if labels is not None:
        for e in p.entries:
            for i in (e.query_id, e.neighbor_id):
                if i not in labels:
                    raise ValidationError(f"no label for id {i!r}")
        same = sum(labels[e.query_id] == labels[e.neighbor_id] for e in p.entries)
        rate = same / len(p)
    return ManifestStats(len(p), float(sims.mean()), float(sims.min()), rate)
