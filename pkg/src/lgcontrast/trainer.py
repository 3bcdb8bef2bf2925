"""Training loop: pair assembly, AdamW, warmup + cosine schedule, early stopping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, TrainingError, ValidationError
from .evaluation import linear_probe
from .io import ImageTensorSet, PairManifest
from .nn import EncoderSpec, ParamSet, backward, encode, forward, init_params
from .objectives import ObjectiveConfig, SupportQueue, nnclr_loss, ntxent_loss, simsiam_loss, swav_loss

# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class AugmentSpec:
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: float = 0.4
    noise: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "crop_ratio", tuple(self.crop_ratio))
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ConfigError(f"bad crop_ratio {self.crop_ratio}")
        if not 0 <= self.flip_p <= 1 or not 0 <= self.jitter < 1 or self.noise < 0:
            raise ConfigError("flip_p in [0, 1], jitter in [0, 1), noise >= 0 required")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, jitter=0.0, noise=0.0)


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = ObjectiveConfig()
    pair_source: str = "augment"
    manifest_path: str | None = None
    lr_peak: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int | None = None
    warmup_fraction: float = 0.05
    epochs: int = 25
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.2
    early_stop: bool = True
    encoder: EncoderSpec = EncoderSpec()
    augment: AugmentSpec = AugmentSpec()
    probe_iters: int = 100
    probe_lam: float = 1e-3
    probe_train_size: int = 500

    def __post_init__(self):
        if self.pair_source not in ("augment", "manifest"):
            raise ConfigError(f"pair_source must be augment or manifest, got {self.pair_source!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("batch_size >= 2 and epochs >= 1 required")
        if self.lr_peak < 0 or self.weight_decay < 0:
            raise ConfigError("lr_peak and weight_decay must be >= 0")
        if self.objective.kind == "nnclr" and self.objective.queue_size < self.batch_size:
            raise ConfigError("queue_size must be >= batch_size")

    def encoder_spec(self) -> EncoderSpec:
        spec = self.encoder
        if self.objective.kind == "simsiam" and spec.pred_dims is None:
            out = spec.proj_dims[-1]
            spec = replace(spec, pred_dims=(max(out // 2, 8), out))
        if self.objective.kind != "simsiam" and spec.pred_dims is not None:
            spec = replace(spec, pred_dims=None)
        return spec

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "objective":
                out["objective"] = v.kind
                out.update({k.name: getattr(v, k.name) for k in fields(v) if k.name != "kind"})
            elif f.name == "encoder":
                out["encoder"] = v.to_dict()
            elif f.name == "augment":
                out["augment"] = {k.name: getattr(v, k.name) for k in fields(v)}
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        obj_keys = {f.name for f in fields(ObjectiveConfig)} - {"kind"}
        obj = {k: d.pop(k) for k in list(d) if k in obj_keys}
        kind = d.pop("objective", "ntxent")
        kw = {"objective": ObjectiveConfig(kind=kind, **obj)}
        if "encoder" in d:
            kw["encoder"] = EncoderSpec.from_dict(d.pop("encoder"))
        if "augment" in d:
            kw["augment"] = AugmentSpec(**d.pop("augment"))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_flat(json.load(fh))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- schedule / optimizer


def lr_at(step: int, total_steps: int, warmup: int, lr_peak: float) -> float:
    """Linear warmup to ``lr_peak`` over ``warmup`` steps, then cosine decay to 0."""
    if warmup >= total_steps:
        raise ConfigError(f"warmup ({warmup}) must be < total steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return lr_peak * step / warmup
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total_steps - warmup)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: ParamSet, state: AdamState, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update from ``params.grads``; decay is decoupled."""
    for name, g in params.grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.values.items():
        g = params.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.touch()


# ---------------------------------------------------------------- batches


def augment(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip, per-channel gain jitter, noise.

    Random draws are taken for the whole batch in a fixed order (crop
    scale, ratio, offsets, flips, gains, noise), so a generator state fully
    determines the output.
    """
    n, c, h, w = images.shape
    scale = rng.uniform(*spec.crop_scale, n)
    ratio = np.exp(rng.uniform(np.log(spec.crop_ratio[0]), np.log(spec.crop_ratio[1]), n))
    fw = np.minimum(np.sqrt(scale * ratio), 1.0)
    fh = np.minimum(np.sqrt(scale / ratio), 1.0)
    top = rng.uniform(0, 1, n) * (1 - fh) * (h - 1)
    left = rng.uniform(0, 1, n) * (1 - fw) * (w - 1)
    ys = top[:, None] + np.linspace(0, 1, h)[None] * (fh * (h - 1))[:, None]
    xs = left[:, None] + np.linspace(0, 1, w)[None] * (fw * (w - 1))[:, None]
    flip = rng.uniform(0, 1, n) < spec.flip_p
    xs[flip] = xs[flip, ::-1]
    out = _bilinear_gather(images, ys, xs)
    gains = rng.uniform(1 - spec.jitter, 1 + spec.jitter, (n, c)) if spec.jitter else np.ones((n, c))
    out *= gains[:, :, None, None].astype(out.dtype)
    if spec.noise:
        out += rng.normal(0, spec.noise, out.shape).astype(out.dtype)
    return out


def _bilinear_gather(images, ys, xs):
    n, c, h, w = images.shape
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(images.dtype)[:, None, :, None]
    wx = (xs - x0).astype(images.dtype)[:, None, None, :]
    b = np.arange(n)[:, None, None]

    def g(yy, xx):
        # (n, h, w, c) gather -> (n, c, h, w)
        return images[b, :, yy[:, :, None], xx[:, None, :]].transpose(0, 3, 1, 2)

    top = g(y0, x0) * (1 - wx) + g(y0, x1) * wx
    bot = g(y1, x0) * (1 - wx) + g(y1, x1) * wx
    return top * (1 - wy) + bot * wy


def resolve_partners(dataset: ImageTensorSet, manifest: PairManifest) -> np.ndarray:
    """Index of each image's manifest neighbour (-1 when it has no entry)."""
    index = dataset.index()
    partners = np.full(len(dataset), -1, dtype=np.int64)
    for e in manifest.entries:
        if e.query_id not in index or e.neighbor_id not in index:
            missing = e.query_id if e.query_id not in index else e.neighbor_id
            raise ValidationError(f"manifest id {missing!r} is not in the dataset")
        partners[index[e.query_id]] = index[e.neighbor_id]
    return partners


def make_batch(pair_source, images: np.ndarray, indices, partners, augment_spec, rng):
    """Two views per sampled image.

    ``augment``: both views are augmentations of the same image.
    ``manifest``: view 2 is an augmentation of the image's caption neighbour.
    """
    indices = np.asarray(indices)
    if pair_source == "augment":
        second = indices
    elif pair_source == "manifest":
        second = partners[indices]
        if np.any(second < 0):
            bad = indices[np.flatnonzero(second < 0)[0]]
            raise ValidationError(f"image index {bad} has no manifest neighbour")
    else:
        raise ConfigError(f"unknown pair_source {pair_source!r}")
    v1 = augment(images[indices], augment_spec, rng)
    v2 = augment(images[second], augment_spec, rng)
    return v1, v2


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainResult:
    spec: EncoderSpec
    params: ParamSet
    best_epoch: int
    history: list
    final_params: ParamSet
    train_idx: np.ndarray
    val_idx: np.ndarray
    probe_idx: np.ndarray

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_acc,lr"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_acc!r},{r.lr!r}")
        return "\n".join(lines) + "\n"


def select_best_epoch(val_accs) -> int:
    """1-based epoch of the highest accuracy; the earliest wins ties."""
    best = 0
    for i, a in enumerate(val_accs):
        if a > val_accs[best]:
            best = i
    return best + 1


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def validation_accuracy(spec, params, images, labels, probe_idx, val_idx, lam, iters) -> float:
    f_train = encode(spec, params, images[probe_idx])
    f_val = encode(spec, params, images[val_idx])
    res = linear_probe(f_train, labels[probe_idx], f_val, labels[val_idx],
                       lam=lam, max_iters=iters, num_classes=int(labels.max()) + 1)
    return res.accuracy


def train(cfg: TrainConfig, dataset: ImageTensorSet, labels, manifest: PairManifest | None = None,
          log=None) -> TrainResult:
    """Self-supervised training with per-epoch linear-probe validation.

    ``labels`` (integer codes aligned with ``dataset``) are used only for
    validation. History row 0 is the untrained network.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(dataset):
        raise ValidationError(f"{labels.shape[0]} labels for {len(dataset)} images")
    if cfg.pair_source == "manifest":
        if manifest is None:
            raise ConfigError("pair_source=manifest needs a manifest")
        partners = resolve_partners(dataset, manifest)
    else:
        partners = None
    rng = np.random.default_rng(cfg.seed)
    images = dataset.data
    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction, rng)
    probe_idx = np.sort(rng.permutation(train_idx)[: cfg.probe_train_size])
    if cfg.pair_source == "manifest" and np.any(partners[train_idx] < 0):
        raise ValidationError("some training images have no manifest neighbour")
    bsz = cfg.batch_size
    steps_per_epoch = len(train_idx) // bsz
    if steps_per_epoch < 1:
        raise ConfigError(f"{len(train_idx)} training images cannot fill a batch of {bsz}")
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else max(1, round(cfg.warmup_fraction * total))
    lr_at(0, total, warmup, cfg.lr_peak)  # validates warmup < total

    spec = cfg.encoder_spec()
    params = init_params(spec, cfg.seed)
    obj = cfg.objective
    if obj.kind == "swav":
        protos = rng.standard_normal((obj.num_prototypes, spec.proj_dims[-1]))
        params.add("prototypes", (protos / np.linalg.norm(protos, axis=1, keepdims=True)).astype(np.float32))
    queue = SupportQueue(obj.queue_size) if obj.kind == "nnclr" else None
    state = AdamState()

    def val_acc(p):
        return validation_accuracy(spec, p, images, labels, probe_idx, val_idx, cfg.probe_lam, cfg.probe_iters)

    history = [EpochRecord(0, float("nan"), val_acc(params), 0.0)]
    best_params, best_acc, best_epoch = None, -1.0, 0
    step = 0
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for s in range(steps_per_epoch):
            lr = lr_at(step, total, warmup, cfg.lr_peak)
            idx = order[s * bsz:(s + 1) * bsz]
            v1, v2 = make_batch(cfg.pair_source, images, idx, partners, cfg.augment, rng)
            loss = _train_step(spec, params, obj, np.concatenate([v1, v2]), bsz, queue)
            if not math.isfinite(loss):
                raise TrainingError(epoch, s, f"non-finite loss {loss}")
            try:
                adamw_step(params, state, lr, cfg.weight_decay)
            except FloatingPointError as exc:
                raise TrainingError(epoch, s, str(exc)) from None
            if obj.kind == "swav":
                c = params.values["prototypes"]
                c /= np.linalg.norm(c, axis=1, keepdims=True)
            losses.append(loss)
            step += 1
        acc = val_acc(params)
        history.append(EpochRecord(epoch, float(np.mean(losses)), acc, lr))
        if log is not None:
            log(f"epoch {epoch:3d}  loss {history[-1].train_loss:.4f}  val_acc {acc:.4f}  lr {lr:.2e}")
        if acc > best_acc:
            best_acc, best_epoch, best_params = acc, epoch, params.copy()
    final = params.copy()
    if not cfg.early_stop:
        best_params, best_epoch = final, cfg.epochs
    return TrainResult(spec, best_params, best_epoch, history, final, train_idx, val_idx, probe_idx)


def _train_step(spec, params, obj, x, bsz, queue) -> float:
    params.zero_grad()
    _, z, cache = forward(spec, params, x)
    z1, z2 = z[:bsz], z[bsz:]
    if obj.kind == "ntxent":
        loss, g = ntxent_loss(z1, z2, obj.temperature)
        backward(spec, np.concatenate([g["z1"], g["z2"]]), cache, params)
    elif obj.kind == "simsiam":
        p = cache.predictions
        loss, g = simsiam_loss(p[:bsz], p[bsz:], z1, z2)
        backward(spec, {"predictions": np.concatenate([g["p1"], g["p2"]])}, cache, params)
    elif obj.kind == "nnclr":
        if len(queue) == 0:
            queue.push(z1)
        loss, g, _ = nnclr_loss(z1, z2, queue, obj.temperature)
        backward(spec, np.concatenate([g["z1"], g["z2"]]), cache, params)
    else:
        loss, g = swav_loss(z1, z2, params.values["prototypes"], obj.sinkhorn_eps,
                            obj.sinkhorn_iters, obj.temperature)
        backward(spec, np.concatenate([g["z1"], g["z2"]]), cache, params)
        params.grads["prototypes"] += g["prototypes"]
    return float(loss)
