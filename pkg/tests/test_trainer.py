import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from helpers import rel_error
from lgcontrast import trainer
from lgcontrast.errors import ConfigError, TrainingError, ValidationError
from lgcontrast.io import Pair, PairManifest
from lgcontrast.nn import EncoderSpec, ConvBlock, ParamSet, init_params
from lgcontrast.objectives import ObjectiveConfig, SupportQueue
from lgcontrast.pairs import build_pair_manifest
from lgcontrast.synthetic import gen_synthetic
from lgcontrast.text import embed_captions
from lgcontrast.trainer import (
    AdamState, AugmentSpec, TrainConfig, adamw_step, lr_at, make_batch, resolve_partners,
    select_best_epoch, train,
)

SMALL = EncoderSpec((3, 16, 16), (ConvBlock(4, pool=True), ConvBlock(8, pool=True)), 8, (8, 8))


def test_lr_schedule_points():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(10, 100, 10, 1e-3) == 1e-3
    assert lr_at(100, 100, 10, 1e-3) == 0.0
    assert lr_at(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(55, 100, 10, 1e-3) == pytest.approx(5e-4)


def test_lr_continuous_at_warmup_end():
    w, total, peak = 50, 1000, 2e-3
    warm = peak * w / w  # warmup branch evaluated at step W
    cos = peak * 0.5 * (1 + math.cos(0.0))  # cosine branch at step W
    assert warm == cos == lr_at(w, total, w, peak)
    assert abs(lr_at(w - 1, total, w, peak) - peak) <= peak / w + 1e-15


def test_lr_errors():
    with pytest.raises(ConfigError):
        lr_at(0, 10, 10, 1.0)
    with pytest.raises(ValueError):
        lr_at(11, 10, 2, 1.0)


@given(st.integers(1, 500), st.integers(2, 5000), st.floats(0, 1))
def test_lr_bounded(warmup, extra, frac):
    total = warmup + extra
    step = int(frac * total)
    assert 0.0 <= lr_at(step, total, warmup, 0.1) <= 0.1


def _scalar(value, grad=0.0):
    return ParamSet({"w": np.array([value])}, {"w": np.array([grad])})


def test_adamw_zero_grad_no_decay_is_fixed_point():
    p = _scalar(0.7)
    adamw_step(p, AdamState(), lr=0.1, weight_decay=0.0)
    assert p.values["w"][0] == 0.7


def test_adamw_zero_grad_decay_scales_exactly():
    p = _scalar(0.7)
    adamw_step(p, AdamState(), lr=0.1, weight_decay=0.01)
    assert p.values["w"][0] == 0.7 * (1 - 0.1 * 0.01)


def adam_reference(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta * (1 - lr * wd)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_three_steps_match_formula(wd):
    grads = [0.1, -0.3, 0.2]
    p = _scalar(0.5)
    state = AdamState()
    got = []
    for g in grads:
        p.grads["w"][0] = g
        adamw_step(p, state, lr=0.01, weight_decay=wd)
        got.append(float(p.values["w"][0]))
    assert got == pytest.approx(adam_reference(0.5, grads, 0.01, wd), rel=1e-14, abs=1e-16)


def test_adamw_vector_matches_scalar_reference():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(4)
    gs = rng.standard_normal((5, 4))
    p = ParamSet({"w": theta.copy()}, {"w": np.zeros(4)})
    state = AdamState()
    for g in gs:
        p.grads["w"][...] = g
        adamw_step(p, state, lr=0.003, weight_decay=0.0)
    for i in range(4):
        ref = adam_reference(theta[i], gs[:, i], 0.003, 0.0)[-1]
        assert p.values["w"][i] == pytest.approx(ref, rel=1e-13)


def test_adamw_non_finite_grad_names_parameter():
    p = ParamSet({"a": np.zeros(2), "conv0.weight": np.zeros(2)},
                 {"a": np.zeros(2), "conv0.weight": np.array([0.0, np.inf])})
    with pytest.raises(FloatingPointError, match="conv0.weight"):
        adamw_step(p, AdamState(), 0.1)


def test_degenerate_augment_views_equal():
    d = gen_synthetic(2, 4, seed=0)
    imgs = d.images.data
    v1, v2 = make_batch("augment", imgs, np.arange(8), None, AugmentSpec.identity(), np.random.default_rng(0))
    assert np.array_equal(v1, v2)
    assert np.allclose(v1, imgs, atol=1e-5)


def test_manifest_wiring():
    d = gen_synthetic(2, 4, seed=0)
    manifest = PairManifest(tuple(Pair(i, d.images.ids[(k + 3) % 8], 0.5) for k, i in enumerate(d.images.ids)))
    partners = resolve_partners(d.images, manifest)
    assert partners.tolist() == [(k + 3) % 8 for k in range(8)]
    v1, v2 = make_batch("manifest", d.images.data, np.array([0, 2]), partners, AugmentSpec.identity(),
                        np.random.default_rng(0))
    assert np.allclose(v1, d.images.data[[0, 2]], atol=1e-5)
    assert np.allclose(v2, d.images.data[[3, 5]], atol=1e-5)


def test_unresolvable_manifest_id():
    d = gen_synthetic(2, 2, seed=0)
    with pytest.raises(ValidationError, match="ghost"):
        resolve_partners(d.images, PairManifest((Pair(d.images.ids[0], "ghost", 0.1),)))


def test_batches_deterministic_and_augmented():
    d = gen_synthetic(2, 4, seed=0)
    a = make_batch("augment", d.images.data, np.arange(8), None, AugmentSpec(), np.random.default_rng(3))
    b = make_batch("augment", d.images.data, np.arange(8), None, AugmentSpec(), np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == d.images.data.shape
    assert not np.array_equal(a[0], a[1])


def test_select_best_epoch():
    assert select_best_epoch([0.4, 0.7, 0.6]) == 2
    assert select_best_epoch([0.5, 0.7, 0.7, 0.1]) == 2
    assert select_best_epoch([0.3]) == 1


def _cfg(**kw):
    base = {"epochs": 2, "batch_size": 8, "seed": 0, "encoder": SMALL.to_dict(), "probe_iters": 20}
    base.update(kw)
    return TrainConfig.from_flat(base)


def _data(k=3, n=16, seed=0):
    d = gen_synthetic(k, n, seed=seed)
    m, _ = embed_captions(d.captions, 64)
    return d, build_pair_manifest(m)


def test_zero_lr_leaves_params_unchanged():
    d, _ = _data()
    res = train(_cfg(lr_peak=0.0), d.images, d.labels)
    init = init_params(res.spec, 0)
    for k, v in init.values.items():
        assert np.array_equal(res.final_params.values[k], v)
    accs = [r.val_acc for r in res.history]
    assert len(set(accs)) == 1
    assert len(res.history) == 3 and res.history[0].epoch == 0


@pytest.mark.parametrize("kind", ["ntxent", "simsiam", "nnclr", "swav"])
def test_every_objective_trains(kind):
    d, manifest = _data()
    res = train(_cfg(objective=kind, queue_size=16, num_prototypes=5, pair_source="manifest"),
                d.images, d.labels, manifest)
    assert all(math.isfinite(r.train_loss) for r in res.history[1:])
    assert 1 <= res.best_epoch <= 2
    if kind == "swav":
        c = res.final_params.values["prototypes"]
        assert np.allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-5)
    if kind == "simsiam":
        assert res.spec.pred_dims is not None


def test_full_run_determinism():
    d, manifest = _data()
    a = train(_cfg(pair_source="manifest"), d.images, d.labels, manifest)
    b = train(_cfg(pair_source="manifest"), d.images, d.labels, manifest)
    assert a.history_csv() == b.history_csv()
    for k in a.params.values:
        assert np.array_equal(a.params.values[k], b.params.values[k])


def test_best_checkpoint_at_least_final():
    d, manifest = _data()
    res = train(_cfg(epochs=4, lr_peak=5e-3), d.images, d.labels, manifest)
    accs = [r.val_acc for r in res.history[1:]]
    assert res.best_epoch == select_best_epoch(accs)
    assert accs[res.best_epoch - 1] >= accs[-1]


def test_non_finite_loss_aborts(monkeypatch):
    d, _ = _data()

    def broken(z1, z2, temperature):
        return float("nan"), {"z1": np.zeros_like(z1), "z2": np.zeros_like(z2)}

    monkeypatch.setattr(trainer, "ntxent_loss", broken)
    with pytest.raises(TrainingError) as exc:
        train(_cfg(), d.images, d.labels)
    assert exc.value.epoch == 1 and exc.value.step == 0


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(pair_source="captions")
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"learning_rate": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig(objective=ObjectiveConfig("nnclr", queue_size=8), batch_size=16)
    d, _ = _data()
    with pytest.raises(ConfigError):
        train(_cfg(pair_source="manifest"), d.images, d.labels)


def test_config_flat_round_trip(tmp_path):
    cfg = _cfg(objective="swav", num_prototypes=7, warmup_steps=3)
    flat = cfg.to_flat()
    assert flat["objective"] == "swav" and flat["num_prototypes"] == 7
    path = tmp_path / "c.json"
    path.write_text(json.dumps(flat))
    assert TrainConfig.from_json(path) == cfg


def _step_fd(kind, seed):
    """Finite differences of one full training step's loss w.r.t. parameters."""
    rng = np.random.default_rng(seed)
    spec = gradcheck.random_spec(rng, predictor=False)
    params = init_params(spec, seed, np.float64)
    obj = ObjectiveConfig(kind, temperature=0.5)
    bsz = 3
    x = rng.standard_normal((2 * bsz,) + spec.in_shape)
    queue0 = SupportQueue(8)
    if kind == "nnclr":
        queue0.push(gradcheck.unit_rows(rng, 8, spec.proj_dims[-1]))
    trainer._train_step(spec, params, obj, x, bsz, copy.deepcopy(queue0))
    analytic = {k: g.copy() for k, g in params.grads.items()}
    worst = 0.0
    for name, value in params.values.items():
        flat = value.reshape(-1)
        for i in rng.choice(flat.size, min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            fp = trainer._train_step(spec, params, obj, x, bsz, copy.deepcopy(queue0))
            flat[i] = old - 1e-5
            fm = trainer._train_step(spec, params, obj, x, bsz, copy.deepcopy(queue0))
            flat[i] = old
            worst = max(worst, rel_error(analytic[name].reshape(-1)[i], (fp - fm) / 2e-5))
    return worst


@pytest.mark.parametrize("kind", ["ntxent", "nnclr"])
def test_train_step_gradients_end_to_end(kind):
    assert _step_fd(kind, 4) < 1e-4


def test_language_guided_training_beats_random_init():
    d = gen_synthetic(5, 200, seed=0)
    m, _ = embed_captions(d.captions, 128)
    cfg = TrainConfig(pair_source="manifest", epochs=10, seed=0)
    res = train(cfg, d.images, d.labels, build_pair_manifest(m))
    assert res.history[-1].val_acc > res.history[0].val_acc
