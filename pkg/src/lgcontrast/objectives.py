"""Contrastive objectives with exact gradients.

Each loss returns ``(loss, grads)`` where ``grads`` maps input names to
arrays of the same shape. Stop-gradient inputs get arrays of exact zeros.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "ntxent"
    temperature: float = 0.1
    queue_size: int = 1024
    num_prototypes: int = 30
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3

    def __post_init__(self):
        if self.kind not in ("ntxent", "simsiam", "nnclr", "swav"):
            raise ConfigError(f"unknown objective {self.kind!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.sinkhorn_eps <= 0:
            raise ConfigError("sinkhorn_eps must be > 0")
        if self.queue_size < 1 or self.sinkhorn_iters < 1:
            raise ConfigError("queue_size and sinkhorn_iters must be >= 1")
        if self.kind == "swav" and self.num_prototypes < 2:
            raise ConfigError("swav needs at least 2 prototypes")


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ntxent_loss(z1, z2, temperature=0.1):
    """NT-Xent over the 2B views ``[z1; z2]`` (rows assumed unit-norm).

    Anchor ``i`` has positive ``i +/- B`` and the other 2B - 2 views as
    negatives; the loss is the mean cross-entropy over all 2B anchors.
    """
    z1 = np.asarray(z1)
    z2 = np.asarray(z2)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"z1 and z2 must be matching (B, d) arrays, got {z1.shape} and {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs a batch of at least 2 (no negatives otherwise)")
    z = np.concatenate([z1, z2])
    n = 2 * b
    s = (z @ z.T) / temperature
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(b, n), np.arange(b)])
    rows = np.arange(n)
    loss = float(np.mean(_logsumexp(s, 1) - s[rows, pos]))
    ds = _softmax(s, 1)
    ds[rows, pos] -= 1.0
    ds /= n
    dz = (ds + ds.T) @ z / temperature
    return loss, {"z1": dz[:b], "z2": dz[b:]}


def _rows_norm(x, name):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        raise ValidationError(f"{name} has a zero-norm row")
    return norm


def _neg_cos(p, z):
    """mean_i(-cos(p_i, z_i)) and its gradient w.r.t. p only."""
    pn = _rows_norm(p, "p")
    zn = _rows_norm(z, "z")
    ph, zh = p / pn, z / zn
    cos = (ph * zh).sum(axis=1, keepdims=True)
    b = p.shape[0]
    dp = -(zh - cos * ph) / pn / b
    return -float(cos.mean()), dp


def simsiam_loss(p1, p2, z1, z2):
    """Symmetric negative cosine with the projector outputs stop-gradiented."""
    l1, dp1 = _neg_cos(p1, z2)
    l2, dp2 = _neg_cos(p2, z1)
    return 0.5 * (l1 + l2), {
        "p1": 0.5 * dp1,
        "p2": 0.5 * dp2,
        "z1": np.zeros_like(z1),
        "z2": np.zeros_like(z2),
    }


class SupportQueue:
    """FIFO of unit-norm embeddings used as a nearest-neighbour pool."""

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._rows = deque(maxlen=capacity)

    def __len__(self):
        return len(self._rows)

    def push(self, rows):
        rows = np.asarray(rows)
        if self.dim is None:
            self.dim = rows.shape[1]
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"expected rows of width {self.dim}, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValidationError("queue rows must be unit-norm")
        for r in rows:
            self._rows.append(np.array(r, copy=True))

    def array(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim or 0))
        return np.stack(self._rows)


def queue_nearest(queries, support):
    """Index of the max-dot support row per query; lowest index wins ties."""
    s = np.asarray(queries, dtype=np.float64) @ np.asarray(support, dtype=np.float64).T
    return s.argmax(axis=1)


def nnclr_loss(z1, z2, queue: SupportQueue, temperature=0.1, update=True):
    """NT-Xent between NN(z1) drawn from ``queue`` and ``z2``.

    The looked-up neighbours are constants, so ``z1`` receives a zero
    gradient. After the loss is computed the queue is updated FIFO with z1.
    Returns ``(loss, grads, nn_indices)``.
    """
    if len(queue) == 0:
        raise ValidationError("NNCLR support queue is empty")
    support = queue.array()
    idx = queue_nearest(z1, support)
    nn = support[idx].astype(np.asarray(z2).dtype)
    loss, g = ntxent_loss(nn, z2, temperature)
    if update:
        queue.push(z1)
    return loss, {"z1": np.zeros_like(z1), "z2": g["z2"]}, idx


def sinkhorn_balance(scores, eps=0.05, iters=3, history=None):
    """Alternating row/column scaling of ``exp(scores / eps)``.

    Rows are scaled to sum 1/B, then columns to 1/K, ``iters`` times; the
    returned matrix is the state after the final column step. The scaling
    vectors are kept in log space so no row or column can underflow to an
    all-zero sum. When ``history`` is a list, the L1 row-marginal error
    after every round is appended to it.
    """
    s = np.asarray(scores, dtype=np.float64) / eps
    b, k = s.shape
    log_u = np.zeros(b)
    log_v = np.zeros(k)
    for _ in range(iters):
        log_u = -np.log(b) - _logsumexp(s + log_v[None, :], 1)
        log_v = -np.log(k) - _logsumexp(s + log_u[:, None], 0)
        if history is not None:
            q = np.exp(s + log_u[:, None] + log_v[None, :])
            history.append(float(np.abs(q.sum(axis=1) - 1.0 / b).sum()))
    return np.exp(s + log_u[:, None] + log_v[None, :])


def sinkhorn(scores, eps=0.05, iters=3):
    """Balanced soft assignment, rows rescaled to sum 1 for use as targets."""
    q = sinkhorn_balance(scores, eps, iters)
    return q / q.sum(axis=1, keepdims=True)


def swav_loss(z1, z2, prototypes, eps=0.05, iters=3, temperature=0.1, codes=None):
    """Swapped prediction loss; codes come from Sinkhorn and carry no gradient.

    ``codes=(q1, q2)`` overrides the Sinkhorn step (used to hold codes fixed).
    Returns ``(loss, grads)`` with keys ``z1``, ``z2``, ``prototypes``.
    """
    c = np.asarray(prototypes)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("swav needs at least 2 prototypes")
    s1 = z1 @ c.T
    s2 = z2 @ c.T
    if codes is None:
        q1 = sinkhorn(s1, eps, iters)
        q2 = sinkhorn(s2, eps, iters)
    else:
        q1, q2 = codes
    b = z1.shape[0]
    ls1 = s1 / temperature - _logsumexp(s1 / temperature, 1)[:, None]
    ls2 = s2 / temperature - _logsumexp(s2 / temperature, 1)[:, None]
    loss = -0.5 * float(((q2 * ls1).sum(axis=1) + (q1 * ls2).sum(axis=1)).mean())
    # d/ds of -sum_k q log softmax(s/t) is (softmax(s/t) * sum_k q - q) / t
    ds1 = (np.exp(ls1) * q2.sum(axis=1, keepdims=True) - q2) / (2 * b * temperature)
    ds2 = (np.exp(ls2) * q1.sum(axis=1, keepdims=True) - q1) / (2 * b * temperature)
    grads = {
        "z1": (ds1 @ c).astype(z1.dtype),
        "z2": (ds2 @ c).astype(z2.dtype),
        "prototypes": (ds1.T @ z1 + ds2.T @ z2).astype(c.dtype),
    }
    return loss, grads
