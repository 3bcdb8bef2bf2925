"""Small convolutional encoder with hand-written reverse-mode gradients.

Every layer exposes ``forward(values, x) -> (y, cache)`` and
``backward(values, grads, dy, cache) -> dx``. ``grads`` is a dict of
gradient accumulators keyed like ``values``; pass ``None`` to skip
parameter gradients (GradCAM only needs input gradients).

The encoder is three stacks: a backbone (conv blocks, global average pool,
dense embedding), a projection head ending in L2 normalisation, and an
optional prediction head for SimSiam.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, StaleCacheError

# ---------------------------------------------------------------- layers


class Conv2d:
    def __init__(self, name, cin, cout, kernel=3, stride=1):
        self.name = name
        self.cin, self.cout, self.k, self.stride = cin, cout, kernel, stride
        self.pad = kernel // 2

    def param_shapes(self):
        return {f"{self.name}.weight": (self.cout, self.cin, self.k, self.k),
                f"{self.name}.bias": (self.cout,)}

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ConfigError(f"{self.name}: expected {self.cin} input channels, got {c}")
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{self.name}: input {h}x{w} too small")
        return self.cout, ho, wo

    def forward(self, values, x):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"{self.name}: expected (B, {self.cin}, H, W), got {x.shape}")
        k, s, p = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, self.cin * k * k)
        wmat = values[f"{self.name}.weight"].reshape(self.cout, -1)
        y = cols @ wmat.T + values[f"{self.name}.bias"]
        y = y.reshape(b, ho, wo, self.cout).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape, ho, wo)

    def backward(self, values, grads, dy, cache):
        cols, xshape, ho, wo = cache
        k, s, p = self.k, self.stride, self.pad
        b = xshape[0]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        wmat = values[f"{self.name}.weight"].reshape(self.cout, -1)
        if grads is not None:
            grads[f"{self.name}.weight"] += (dy2.T @ cols).reshape(self.cout, self.cin, k, k)
            grads[f"{self.name}.bias"] += dy2.sum(axis=0)
        dcols = (dy2 @ wmat).reshape(b, ho, wo, self.cin, k, k)
        h, w = xshape[2], xshape[3]
        dxp = np.zeros((b, self.cin, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return shape

    def forward(self, values, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, values, grads, dy, mask):
        return dy * mask


class Identity(ReLU):
    def forward(self, values, x):
        return x, None

    def backward(self, values, grads, dy, cache):
        return dy


class MaxPool2:
    """Non-overlapping 2x2 max pool; odd trailing rows/cols are dropped."""

    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ConfigError(f"max-pool input {h}x{w} too small")
        return c, h // 2, w // 2

    def forward(self, values, x):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xr = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        # first max wins on ties, so exactly one input receives the gradient
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, values, grads, dy, cache):
        idx, xshape = cache
        b, c, h, w = xshape
        h2, w2 = h // 2, w // 2
        onehot = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(onehot, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(xshape, dtype=dy.dtype)
        dx[:, :, :2 * h2, :2 * w2] = (
            onehot.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        )
        return dx


class GlobalAvgPool:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return (shape[0],)

    def forward(self, values, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, values, grads, dy, xshape):
        hw = xshape[2] * xshape[3]
        return np.broadcast_to((dy / hw)[:, :, None, None], xshape).copy()


class Dense:
    def __init__(self, name, din, dout):
        self.name, self.din, self.dout = name, din, dout

    def param_shapes(self):
        return {f"{self.name}.weight": (self.din, self.dout), f"{self.name}.bias": (self.dout,)}

    def out_shape(self, shape):
        if shape != (self.din,):
            raise ConfigError(f"{self.name}: expected input ({self.din},), got {shape}")
        return (self.dout,)

    def forward(self, values, x):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ValueError(f"{self.name}: expected (B, {self.din}), got {x.shape}")
        return x @ values[f"{self.name}.weight"] + values[f"{self.name}.bias"], x

    def backward(self, values, grads, dy, x):
        if grads is not None:
            grads[f"{self.name}.weight"] += x.T @ dy
            grads[f"{self.name}.bias"] += dy.sum(axis=0)
        return dy @ values[f"{self.name}.weight"].T


class LayerNorm:
    """Per-sample normalisation over features with gain and bias."""

    eps = 1e-5

    def __init__(self, name, dim):
        self.name, self.dim = name, dim

    def param_shapes(self):
        return {f"{self.name}.gain": (self.dim,), f"{self.name}.bias": (self.dim,)}

    def out_shape(self, shape):
        return shape

    def forward(self, values, x):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * values[f"{self.name}.gain"] + values[f"{self.name}.bias"], (xhat, inv)

    def backward(self, values, grads, dy, cache):
        xhat, inv = cache
        if grads is not None:
            grads[f"{self.name}.gain"] += (dy * xhat).sum(axis=0)
            grads[f"{self.name}.bias"] += dy.sum(axis=0)
        g = dy * values[f"{self.name}.gain"]
        return inv * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True))


class L2Normalize:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return shape

    def forward(self, values, x):
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        if np.any(norm == 0):
            raise FloatingPointError("L2Normalize: zero-norm row")
        y = x / norm
        return y, (y, norm)

    def backward(self, values, grads, dy, cache):
        y, norm = cache
        return (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def param_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def out_shape(self, shape):
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        return shape

    def forward(self, values, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(values, x)
            caches.append(c)
        return x, caches

    def backward(self, values, grads, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(values, grads, dy, c)
        return dy


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False
    activation: str = "relu"


@dataclass(frozen=True)
class EncoderSpec:
    in_shape: tuple = (3, 16, 16)
    conv_blocks: tuple = (ConvBlock(16, pool=True), ConvBlock(32, pool=True), ConvBlock(64))
    embed_dim: int = 64
    proj_dims: tuple = (64, 32)
    pred_dims: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(self.in_shape))
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "proj_dims", tuple(self.proj_dims))
        if self.pred_dims is not None:
            object.__setattr__(self, "pred_dims", tuple(self.pred_dims))
        if not blocks:
            raise ConfigError("encoder needs at least one conv block")
        if self.embed_dim < 8:
            raise ConfigError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if not self.proj_dims:
            raise ConfigError("proj_dims must be nonempty")
        for b in blocks:
            if b.activation not in ("relu", "identity"):
                raise ConfigError(f"unknown activation {b.activation!r}")
        if self.pred_dims is not None and (not self.pred_dims or self.pred_dims[-1] != self.proj_dims[-1]):
            raise ConfigError("pred_dims must end at the projection width")
        Encoder(self)  # walks the layer shapes; raises on a mismatch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Encoder:
    """Layer stacks for an :class:`EncoderSpec`."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        trunk, rest = [], []
        c = spec.in_shape[0]
        last = len(spec.conv_blocks) - 1
        for i, blk in enumerate(spec.conv_blocks):
            trunk.append(Conv2d(f"conv{i}", c, blk.out_channels, blk.kernel, blk.stride))
            trunk.append(ReLU() if blk.activation == "relu" else Identity())
            if blk.pool:
                (rest if i == last else trunk).append(MaxPool2())
            c = blk.out_channels
        rest += [GlobalAvgPool(), Dense("embed", c, spec.embed_dim)]
        # trunk ends at the last block's activation: the GradCAM tap point
        self.trunk = Sequential(trunk)
        self.rest = Sequential(rest)
        self.tap_shape = self.trunk.out_shape(spec.in_shape)
        self.rest.out_shape(self.tap_shape)
        self.projector = Sequential(_mlp("proj", spec.embed_dim, spec.proj_dims) + [L2Normalize()])
        self.predictor = None
        if spec.pred_dims is not None:
            self.predictor = Sequential(_mlp("pred", spec.proj_dims[-1], spec.pred_dims))

    def param_shapes(self):
        out = {}
        for stack in (self.trunk, self.rest, self.projector, self.predictor):
            if stack is not None:
                out.update(stack.param_shapes())
        return out


def _mlp(prefix, din, dims):
    layers = []
    for i, d in enumerate(dims):
        layers.append(Dense(f"{prefix}{i}", din, d))
        if i < len(dims) - 1:
            layers += [LayerNorm(f"{prefix}{i}.norm", d), ReLU()]
        din = d
    return layers


_ENCODERS: dict = {}


def get_encoder(spec: EncoderSpec) -> Encoder:
    enc = _ENCODERS.get(spec)
    if enc is None:
        enc = _ENCODERS[spec] = Encoder(spec)
    return enc


# ---------------------------------------------------------------- params


@dataclass
class ParamSet:
    values: dict
    grads: dict
    init_seed: int = 0
    version: int = 0

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def add(self, name, value):
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def touch(self):
        """Record that values changed; outstanding forward caches go stale."""
        self.version += 1

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.values.items()},
            {k: np.zeros_like(v) for k, v in self.values.items()},
            self.init_seed,
        )

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(
            {k: v.astype(dtype) for k, v in self.values.items()},
            {k: np.zeros(v.shape, dtype) for k, v in self.values.items()},
            self.init_seed,
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())


def init_params(spec: EncoderSpec, seed: int = 0, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in get_encoder(spec).param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            values[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".gain"):
            values[name] = np.ones(shape, dtype)
        else:
            values[name] = np.zeros(shape, dtype)
    grads = {k: np.zeros_like(v) for k, v in values.items()}
    return ParamSet(values, grads, seed)


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardCache:
    params_id: int
    version: int
    trunk: list
    rest: list
    proj: list
    pred: list | None = None
    tap: np.ndarray | None = None
    features: np.ndarray | None = None
    projections: np.ndarray | None = None
    predictions: np.ndarray | None = None
    batch_shape: tuple = field(default_factory=tuple)


def _check_batch(spec, batch):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.in_shape:
        raise ValueError(f"input: expected (B, {', '.join(map(str, spec.in_shape))}), got {batch.shape}")


def encode(spec: EncoderSpec, params: ParamSet, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Backbone features only, in chunks; no cache is kept."""
    _check_batch(spec, batch)
    enc = get_encoder(spec)
    out = []
    for i in range(0, batch.shape[0], chunk):
        x = batch[i:i + chunk].astype(params.values["embed.weight"].dtype, copy=False)
        a, _ = enc.trunk.forward(params.values, x)
        f, _ = enc.rest.forward(params.values, a)
        out.append(f)
    return np.concatenate(out) if out else np.zeros((0, spec.embed_dim))


def forward(spec: EncoderSpec, params: ParamSet, batch: np.ndarray):
    """Return ``(features, projections, cache)``.

    Projections are unit-norm. With a prediction head the predictor output
    is available as ``cache.predictions``.
    """
    _check_batch(spec, batch)
    enc = get_encoder(spec)
    v = params.values
    x = batch.astype(v["embed.weight"].dtype, copy=False)
    tap, c_trunk = enc.trunk.forward(v, x)
    feats, c_rest = enc.rest.forward(v, tap)
    proj, c_proj = enc.projector.forward(v, feats)
    cache = ForwardCache(id(params), params.version, c_trunk, c_rest, c_proj,
                         tap=tap, features=feats, projections=proj, batch_shape=batch.shape)
    if enc.predictor is not None:
        cache.predictions, cache.pred = enc.predictor.forward(v, proj)
    return feats, proj, cache


def backward(spec: EncoderSpec, loss_grad, cache: ForwardCache, params: ParamSet) -> np.ndarray:
    """Accumulate parameter gradients into ``params.grads``; return input gradient.

    ``loss_grad`` is either the gradient w.r.t. the projections or a dict
    with any of the keys ``projections``, ``predictions``, ``features``.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("forward cache is stale: parameters changed since forward()")
    if not isinstance(loss_grad, dict):
        loss_grad = {"projections": loss_grad}
    unknown = set(loss_grad) - {"projections", "predictions", "features"}
    if unknown:
        raise KeyError(f"unknown gradient keys {sorted(unknown)}")
    enc = get_encoder(spec)
    v, g = params.values, params.grads
    d_proj = np.zeros_like(cache.projections)
    if "projections" in loss_grad:
        d_proj = d_proj + loss_grad["projections"]
    if "predictions" in loss_grad:
        if enc.predictor is None:
            raise KeyError("encoder has no prediction head")
        d_proj = d_proj + enc.predictor.backward(v, g, loss_grad["predictions"], cache.pred)
    d_feat = enc.projector.backward(v, g, d_proj, cache.proj)
    if "features" in loss_grad:
        d_feat = d_feat + loss_grad["features"]
    d_tap = enc.rest.backward(v, g, d_feat, cache.rest)
    return enc.trunk.backward(v, g, d_tap, cache.trunk)


# ---------------------------------------------------------------- GradCAM


def upsample_bilinear(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D map.

    Output pixel ``(i, j)`` samples source coordinate
    ``(i * (h - 1) / (height - 1), j * (w - 1) / (width - 1))``; a size-1
    axis on either side maps every pixel to source index 0.
    """
    h, w = m.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    raw: np.ndarray  # channel-weighted sum before ReLU, at tap resolution
    channel_weights: np.ndarray
    all_zero: bool


def gradcam(spec, params, image, class_weights, target_class, class_bias=None) -> SaliencyMap:
    """GradCAM at the last conv block for a linear probe's class score.

    ``class_weights`` is the probe matrix of shape (embed_dim, n_classes).
    """
    enc = get_encoder(spec)
    v = params.values
    dtype = v["embed.weight"].dtype
    x = np.asarray(image, dtype=dtype)[None]
    _check_batch(spec, x)
    class_weights = np.asarray(class_weights)
    if not 0 <= target_class < class_weights.shape[1]:
        raise IndexError(f"target_class {target_class} out of range")
    tap, _ = enc.trunk.forward(v, x)
    _, c_rest = enc.rest.forward(v, tap)
    # class score = features @ W[:, t] + b[t]; its feature gradient is W[:, t]
    d_feat = class_weights[:, target_class].astype(dtype)[None]
    d_tap = enc.rest.backward(v, None, d_feat, c_rest)[0]
    weights = d_tap.mean(axis=(1, 2))
    raw = np.tensordot(weights, tap[0], axes=1)
    cam = upsample_bilinear(np.maximum(raw, 0), spec.in_shape[1], spec.in_shape[2])
    peak = cam.max()
    if peak > 0:
        return SaliencyMap(cam / peak, raw, weights, False)
    return SaliencyMap(np.zeros_like(cam), raw, weights, True)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CKPT"


def save_checkpoint(path, spec: EncoderSpec, params: ParamSet, meta: dict | None = None) -> None:
    header = json.dumps({"spec": spec.to_dict(), "init_seed": params.init_seed, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(struct.pack("<I", len(params.values)))
        for name in sorted(params.values):
            arr = params.values[name]
            bname = name.encode("utf-8")
            fh.write(struct.pack("<H", len(bname)) + bname)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[EncoderSpec, ParamSet, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        off = 8 + hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        values = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape))
            if off + 4 * size > len(buf):
                raise FormatError(f"{path}: truncated parameter {name!r}")
            values[name] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    spec = EncoderSpec.from_dict(header["spec"])
    params = ParamSet(values, {k: np.zeros_like(a) for k, a in values.items()}, header["init_seed"])
    missing = set(get_encoder(spec).param_shapes()) - set(values)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    return spec, params, header["meta"]
