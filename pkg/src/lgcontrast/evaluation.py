"""Frozen-feature evaluation: linear probe, few-shot episodes, saliency AUC."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError

# ---------------------------------------------------------------- linear probe


@dataclass
class ProbeResult:
    weights: np.ndarray  # (d, n_classes)
    bias: np.ndarray  # (n_classes,)
    accuracy: float | None
    loss: float
    grad_norm: float
    iterations: int
    converged: bool
    losses: list = field(default_factory=list, repr=False)

    def predict(self, x):
        return np.argmax(np.asarray(x, np.float64) @ self.weights + self.bias, axis=1)


def probe_objective(w, b, x, y, lam):
    """Mean softmax cross-entropy plus ``lam / 2 * ||w||^2`` (bias unpenalised).

    Returns ``(loss, grad_w, grad_b)``.
    """
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(lse - z[np.arange(n), y])) + 0.5 * lam * float((w * w).sum())
    p = np.exp(z - lse[:, None])
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, x.T @ p + lam * w, p.sum(axis=0)


def linear_probe(
    features,
    labels,
    eval_features=None,
    eval_labels=None,
    lam: float = 1e-3,
    max_iters: int = 1000,
    tol: float = 1e-6,
    init=None,
    num_classes: int | None = None,
) -> ProbeResult:
    """Multinomial logistic regression by gradient descent with backtracking.

    Starts from zero weights unless ``init=(w, b)`` is given. Accuracy is
    measured on the eval split when provided, else on the training data.
    """
    x = np.asarray(features, np.float64)
    y = np.asarray(labels, np.int64)
    if not np.isfinite(x).all():
        raise ValidationError("probe features contain non-finite values")
    k = num_classes or int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValidationError("linear probe needs at least 2 classes")
    if init is None:
        w, b = np.zeros((x.shape[1], k)), np.zeros(k)
    else:
        w, b = (np.array(a, np.float64) for a in init)
    loss, gw, gb = probe_objective(w, b, x, y, lam)
    losses = [loss]
    step = 1.0
    it = 0
    gnorm = math.sqrt(float((gw * gw).sum() + (gb * gb).sum()))
    while gnorm > tol and it < max_iters:
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, ngw, ngb = probe_objective(w_new, b_new, x, y, lam)
            if new_loss <= loss - 0.5 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, ngw, ngb
        losses.append(loss)
        gnorm = math.sqrt(float((gw * gw).sum() + (gb * gb).sum()))
        step *= 2.0
        it += 1
    res = ProbeResult(w, b, None, loss, gnorm, it, gnorm <= tol, losses)
    if eval_features is not None:
        res.accuracy = float(np.mean(res.predict(eval_features) == np.asarray(eval_labels)))
    else:
        res.accuracy = float(np.mean(res.predict(x) == y))
    return res


# ---------------------------------------------------------------- few-shot


@dataclass
class FewShotResult:
    mean: float
    stderr: float
    accuracies: np.ndarray
    excluded_classes: list


def _unit(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm == 0, 1.0, norm)


def nearest_centroid_predict(support, support_labels, query, n_classes):
    """Cosine nearest-centroid; centroids are means of unit vectors, renormalised."""
    s = _unit(np.asarray(support, np.float64))
    cents = np.stack([s[support_labels == c].mean(axis=0) for c in range(n_classes)])
    cents = _unit(cents)
    return np.argmax(_unit(np.asarray(query, np.float64)) @ cents.T, axis=1)


def fewshot_eval(features, labels, episodes=600, seed=0, n_way=5, k_shot=5, n_query=15) -> FewShotResult:
    """Mean accuracy (and standard error) over N-way K-shot episodes."""
    x = np.asarray(features, np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    need = k_shot + n_query
    pool = classes[counts >= need]
    excluded = [c.item() for c in classes[counts < need]]
    if excluded:
        warnings.warn(f"{len(excluded)} class(es) have fewer than {need} examples; excluded")
    if len(pool) < n_way:
        raise ValidationError(f"only {len(pool)} classes with >= {need} examples, need {n_way}")
    members = {c.item(): np.flatnonzero(y == c) for c in pool}
    rng = np.random.default_rng(seed)
    accs = np.empty(episodes)
    for e in range(episodes):
        chosen = rng.choice(pool, n_way, replace=False)
        sup, qry, qlab = [], [], []
        for pos, c in enumerate(chosen):
            idx = rng.choice(members[c.item()], need, replace=False)
            sup.append(idx[:k_shot])
            qry.append(idx[k_shot:])
            qlab.append(np.full(n_query, pos))
        sup_lab = np.repeat(np.arange(n_way), k_shot)
        pred = nearest_centroid_predict(x[np.concatenate(sup)], sup_lab, x[np.concatenate(qry)], n_way)
        accs[e] = np.mean(pred == np.concatenate(qlab))
    stderr = float(accs.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return FewShotResult(float(accs.mean()), stderr, accs, excluded)


# ---------------------------------------------------------------- saliency AUC


def _check_binary(labels):
    labels = np.asarray(labels).ravel()
    pos = int(labels.sum())
    if pos == 0 or pos == labels.size:
        raise ValidationError("AUC undefined: targets contain a single class")
    return labels.astype(bool)


def auc_roc(scores, labels) -> float:
    """Rank-statistic AUC; tied scores receive their mid-rank."""
    s = np.asarray(scores, np.float64).ravel()
    t = _check_binary(labels)
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size)
    # mid-rank of each tie run: average of its 1-based positions
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], s.size]
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    n_pos = int(t.sum())
    n_neg = s.size - n_pos
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Step-wise area under precision-recall: sum of precision x recall increments.

    Thresholds are the unique scores taken in descending order.
    """
    s = np.asarray(scores, np.float64).ravel()
    t = _check_binary(labels)
    order = np.argsort(-s, kind="mergesort")
    ss, tt = s[order], t[order]
    last = np.r_[np.flatnonzero(ss[1:] != ss[:-1]), s.size - 1]
    tp = np.cumsum(tt)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / tt.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def saliency_auc(maps, masks, per_image: bool = False) -> tuple[float, float]:
    """(AUC-ROC, AUC-PR) of saliency maps against binary masks.

    Pixels are pooled across images unless ``per_image``, which averages
    per-image scores over images whose mask has both classes.
    """
    maps = np.asarray(maps, np.float64)
    masks = np.asarray(masks)
    if maps.shape != masks.shape:
        raise ValidationError(f"maps {maps.shape} and masks {masks.shape} do not align")
    if not per_image:
        return auc_roc(maps, masks), auc_pr(maps, masks)
    rocs, prs = [], []
    for m, t in zip(maps, masks):
        if 0 < t.sum() < t.size:
            rocs.append(auc_roc(m, t))
            prs.append(auc_pr(m, t))
    if not rocs:
        raise ValidationError("AUC undefined: no image has both foreground and background")
    return float(np.mean(rocs)), float(np.mean(prs))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    """Rows of named values plus key-value metadata.

    ``rows`` maps a row label to ``{column: value}``; ``columns`` fixes the
    column order. With ``avg`` an ``Avg`` column holds each row's mean.
    """

    task: str
    columns: list
    rows: dict
    meta: dict = field(default_factory=dict)
    row_header: str = "Model"
    avg: bool = False
    precision: int = 4

    def __post_init__(self):
        if not self.rows:
            raise ValidationError("report needs at least one row")
        for label, vals in self.rows.items():
            for v in vals.values():
                if self.task in ("linear", "fewshot") and not 0.0 <= v <= 1.0:
                    raise ValidationError(f"{label}: accuracy {v} outside [0, 1]")

    def row_mean(self, label) -> float:
        vals = [self.rows[label][c] for c in self.columns if c in self.rows[label]]
        return float(sum(vals) / len(vals))

    def table(self) -> str:
        header = [self.row_header] + list(self.columns) + (["Avg"] if self.avg else [])
        body = []
        for label, vals in self.rows.items():
            cells = [label] + [
                f"{vals[c]:.{self.precision}f}" if c in vals else "-" for c in self.columns
            ]
            if self.avg:
                cells.append(f"{self.row_mean(label):.{self.precision}f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip() for r in [header] + body]
        return "\n".join(lines) + "\n"

    def kv(self) -> str:
        lines = [f"task={self.task}"]
        lines += [f"{k}={v}" for k, v in self.meta.items()]
        for label, vals in self.rows.items():
            for c in self.columns:
                if c in vals:
                    lines.append(f"{label}.{c}={vals[c]!r}")
            if self.avg:
                lines.append(f"{label}.Avg={self.row_mean(label)!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        return self.kv() + "\n[table]\n" + self.table()


def write_report(report: MetricsReport, path, fmt: str = "both") -> None:
    text = {"both": report.to_text, "kv": report.kv, "table": report.table}[fmt]()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_report(path) -> MetricsReport:
    """Parse the key-value block of a report written by :func:`write_report`."""
    meta, rows, columns = {}, {}, []
    task = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line == "[table]":
                break
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "task":
                task = value
            elif "." in key and _is_float(value):
                label, _, col = key.rpartition(".")
                if col == "Avg":
                    continue
                rows.setdefault(label, {})[col] = float(value)
                if col not in columns:
                    columns.append(col)
            else:
                meta[key] = value
    if task is None:
        raise ValidationError(f"{path}: no task line")
    return MetricsReport(task, columns, rows, meta)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def merge_reports(reports, labels=None, avg=False, task="summary") -> MetricsReport:
    """Combine reports into one table; rows sharing a label are merged."""
    if not reports:
        raise ConfigError("nothing to merge")
    rows, columns = {}, []
    for i, rep in enumerate(reports):
        first = next(iter(rep.rows))
        label = labels[i] if labels else rep.meta.get("model", first)
        rows.setdefault(label, {}).update(rep.rows[first])
        for c in rep.columns:
            if c not in columns:
                columns.append(c)
    return MetricsReport(task, columns, rows, avg=avg)
