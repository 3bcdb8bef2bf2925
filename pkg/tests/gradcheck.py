"""Central finite-difference checks for layers, the composed encoder and the losses.

Shared by the unit tests (a few instances) and the acceptance gate (>= 20
instances). ReLU and max-pool are piecewise linear, so a coordinate whose
+/-h perturbation flips any ReLU mask or max-pool winner is skipped: the
finite difference straddles a kink there and is not a valid oracle. Callers
bound the fraction of skipped coordinates.
"""

from dataclasses import dataclass

import numpy as np

from lgcontrast import nn
from lgcontrast.objectives import SupportQueue, nnclr_loss, ntxent_loss, simsiam_loss, sinkhorn, swav_loss

from helpers import rel_error, unit_rows

H = 1e-5


@dataclass
class CheckResult:
    max_rel: float
    checked: int
    skipped: int


def kink_signature(obj, out=None):
    """Boolean masks and integer argmax indices found in a nested cache."""
    if out is None:
        out = []
    if isinstance(obj, np.ndarray):
        if obj.dtype == bool or obj.dtype.kind in "iu":
            out.append(obj.copy())
    elif isinstance(obj, (list, tuple)):
        for o in obj:
            kink_signature(o, out)
    return out


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_compare(evaluate, targets, h=H):
    """``evaluate() -> (loss, signature)``; ``targets`` is a list of (array, analytic grad)."""
    _, base = evaluate()
    worst, checked, skipped = 0.0, 0, 0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        a = np.asarray(analytic, np.float64).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp, sp = evaluate()
            flat[i] = old - h
            fm, sm = evaluate()
            flat[i] = old
            if not (_same(base, sp) and _same(base, sm)):
                skipped += 1
                continue
            worst = max(worst, rel_error(a[i], (fp - fm) / (2 * h)))
            checked += 1
    return CheckResult(worst, checked, skipped)


# ---------------------------------------------------------------- layers

LAYER_KINDS = ("conv", "relu", "identity", "maxpool", "gap", "dense", "layernorm", "l2norm")


def make_layer(kind, rng):
    """Random (layer, values, input) instance of one layer type, in float64."""
    b = int(rng.integers(1, 4))
    if kind == "conv":
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        layer = nn.Conv2d("c", cin, cout, k, stride)
        x = rng.standard_normal((b, cin, int(rng.integers(3, 7)), int(rng.integers(3, 7))))
    elif kind in ("relu", "identity", "maxpool", "gap"):
        layer = {"relu": nn.ReLU, "identity": nn.Identity, "maxpool": nn.MaxPool2, "gap": nn.GlobalAvgPool}[kind]()
        x = rng.standard_normal((b, int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7))))
    elif kind == "dense":
        din, dout = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        layer = nn.Dense("d", din, dout)
        x = rng.standard_normal((b, din))
    elif kind == "layernorm":
        d = int(rng.integers(2, 9))
        layer = nn.LayerNorm("n", d)
        x = rng.standard_normal((b, d))
    elif kind == "l2norm":
        layer = nn.L2Normalize()
        x = rng.standard_normal((b, int(rng.integers(1, 9))))
    else:
        raise ValueError(kind)
    values = {name: rng.standard_normal(shape) for name, shape in layer.param_shapes().items()}
    return layer, values, x


def check_layer(layer, values, x, rng):
    y, cache = layer.forward(values, x)
    r = rng.standard_normal(y.shape)
    grads = {k: np.zeros_like(v) for k, v in values.items()}
    dx = layer.backward(values, grads, r, cache)

    def evaluate():
        y2, c2 = layer.forward(values, x)
        return float((y2 * r).sum()), kink_signature(c2)

    targets = [(x, dx)] + [(values[k], grads[k]) for k in values]
    return fd_compare(evaluate, targets)


# ---------------------------------------------------------------- composed encoder


def random_spec(rng, predictor=True):
    c = int(rng.integers(1, 4))
    hw = int(rng.integers(6, 11))
    blocks = [nn.ConvBlock(int(rng.integers(2, 6)), kernel=int(rng.choice([1, 3])), pool=True),
              nn.ConvBlock(int(rng.integers(2, 7)), kernel=3, stride=int(rng.integers(1, 3)),
                           pool=bool(rng.integers(0, 2)))]
    embed = int(rng.integers(8, 13))
    proj = (int(rng.integers(4, 10)), int(rng.integers(3, 8)))
    pred = (int(rng.integers(3, 7)), proj[-1]) if predictor else None
    return nn.EncoderSpec((c, hw, hw), tuple(blocks), embed, proj, pred)


def _encoder_signature(cache):
    return kink_signature([cache.trunk, cache.rest, cache.proj, cache.pred])


def check_encoder(spec, rng, batch=3):
    params = nn.init_params(spec, int(rng.integers(1 << 30)), dtype=np.float64)
    for v in params.values.values():
        v += 0.1 * rng.standard_normal(v.shape)  # move gains/biases off their init values
    x = rng.standard_normal((batch,) + spec.in_shape)
    feats, proj, cache = nn.forward(spec, params, x)
    r = {"features": rng.standard_normal(feats.shape), "projections": rng.standard_normal(proj.shape)}
    if cache.predictions is not None:
        r["predictions"] = rng.standard_normal(cache.predictions.shape)
    dx = nn.backward(spec, r, cache, params)

    def evaluate():
        f, p, c = nn.forward(spec, params, x)
        loss = (f * r["features"]).sum() + (p * r["projections"]).sum()
        if c.predictions is not None:
            loss += (c.predictions * r["predictions"]).sum()
        return float(loss), _encoder_signature(c)

    targets = [(x, dx)] + [(params.values[k], params.grads[k]) for k in params.values]
    return fd_compare(evaluate, targets), params.num_params()


# ---------------------------------------------------------------- objectives


def check_ntxent(rng):
    b, d = int(rng.integers(2, 7)), int(rng.integers(2, 9))
    tau = float(rng.uniform(0.1, 1.0))
    z1, z2 = unit_rows(rng, b, d), unit_rows(rng, b, d)
    _, g = ntxent_loss(z1, z2, tau)
    return fd_compare(lambda: (ntxent_loss(z1, z2, tau)[0], []), [(z1, g["z1"]), (z2, g["z2"])])


def check_simsiam(rng):
    b, d = int(rng.integers(1, 6)), int(rng.integers(2, 9))
    p1, p2, z1, z2 = (rng.standard_normal((b, d)) for _ in range(4))
    _, g = simsiam_loss(p1, p2, z1, z2)
    zero = not g["z1"].any() and not g["z2"].any()
    res = fd_compare(lambda: (simsiam_loss(p1, p2, z1, z2)[0], []), [(p1, g["p1"]), (p2, g["p2"])])
    return res, zero


def check_nnclr(rng):
    b, d = int(rng.integers(2, 6)), int(rng.integers(2, 9))
    queue = SupportQueue(int(rng.integers(b, 4 * b + 1)))
    queue.push(unit_rows(rng, queue.capacity, d))
    z1, z2 = unit_rows(rng, b, d), unit_rows(rng, b, d)
    tau = float(rng.uniform(0.1, 1.0))
    _, g, _ = nnclr_loss(z1, z2, queue, tau, update=False)

    def evaluate():
        loss, _, idx = nnclr_loss(z1, z2, queue, tau, update=False)
        return loss, [idx]

    # z1 only selects neighbours, so its finite difference is exactly 0 away from switches
    return fd_compare(evaluate, [(z1, g["z1"]), (z2, g["z2"])]), not g["z1"].any()


def check_swav(rng):
    b, k, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 9))
    z1, z2, c = unit_rows(rng, b, d), unit_rows(rng, b, d), unit_rows(rng, k, d)
    tau = float(rng.uniform(0.1, 1.0))
    codes = (sinkhorn(z1 @ c.T), sinkhorn(z2 @ c.T))
    _, g = swav_loss(z1, z2, c, temperature=tau, codes=codes)
    # codes are constants: recomputing them inside the loss must not change any gradient
    _, g_free = swav_loss(z1, z2, c, temperature=tau)
    code_path_zero = all(np.array_equal(g[key], g_free[key]) for key in g)
    res = fd_compare(lambda: (swav_loss(z1, z2, c, temperature=tau, codes=codes)[0], []),
                     [(z1, g["z1"]), (z2, g["z2"]), (c, g["prototypes"])])
    return res, code_path_zero
