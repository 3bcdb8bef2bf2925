"""Self-contained synthetic image/caption dataset.

Each class owns a small binary shape. An image paints a few random
clutter rectangles, then the class shape at a random position in a random
colour, then adds Gaussian noise. The mask marks the shape's pixels. The
class templates depend only on the class index, so datasets generated with
different seeds share the same classes.

Captions combine three words from a class vocabulary with distractor words
drawn from a vocabulary shared by all classes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .io import CaptionRecord, ImageTensorSet, MaskSet

TEMPLATE_SIZE = 7


def _ring(t):
    m = np.zeros((t, t), bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m


def _cross(t):
    m = np.zeros((t, t), bool)
    m[t // 2, :] = m[:, t // 2] = True
    return m


def _saltire(t):
    m = np.eye(t, dtype=bool)
    return m | m[:, ::-1]


def _disk(t):
    r = (t - 1) / 2
    yy, xx = np.mgrid[:t, :t]
    return (yy - r) ** 2 + (xx - r) ** 2 <= r * r + 0.5


def _hbars(t):
    m = np.zeros((t, t), bool)
    m[::2, :] = True
    return m


def _vbars(t):
    return _hbars(t).T.copy()


def _checker(t):
    yy, xx = np.mgrid[:t, :t]
    return (yy + xx) % 2 == 0


def _tee(t):
    m = np.zeros((t, t), bool)
    m[0, :] = True
    m[:, t // 2] = True
    return m


SHAPES = [
    ("ring", _ring, ["ring", "hoop", "loop", "frame"]),
    ("cross", _cross, ["cross", "plus", "crux", "junction"]),
    ("saltire", _saltire, ["saltire", "diagonals", "crisscross", "xmark"]),
    ("disk", _disk, ["disk", "blob", "circle", "round"]),
    ("hbars", _hbars, ["stripes", "lines", "rows", "horizontal"]),
    ("vbars", _vbars, ["columns", "pillars", "bars", "vertical"]),
    ("checker", _checker, ["checker", "chess", "grid", "tiles"]),
    ("tee", _tee, ["tee", "crossbar", "anchor", "hammer"]),
]

DISTRACTORS = (
    "my cute look today found this old new great little big so happy weekend "
    "finally nice pretty amazing morning evening best friend home first day "
    "got some love made our just really one more time out here after work "
    "sunday park beautiful"
).split()

CAPTION_PREFIX = "a photo of"


def class_template(c: int, size: int = TEMPLATE_SIZE) -> np.ndarray:
    if c < len(SHAPES):
        return SHAPES[c][1](size)
    rng = np.random.default_rng(10_000 + c)
    m = rng.random((size, size)) < 0.5
    m[size // 2, size // 2] = True
    return m


def class_name(c: int) -> str:
    return SHAPES[c][0] if c < len(SHAPES) else f"kind{c}"


def class_words(c: int) -> list[str]:
    if c < len(SHAPES):
        return list(SHAPES[c][2])
    return [f"kind{c}{s}" for s in "abcd"]


@dataclass(frozen=True)
class CaptionVocab:
    class_words_per_caption: int = 3
    distractors: int = 4
    distractor_vocab: int = len(DISTRACTORS)


def make_caption(c: int, vocab: CaptionVocab, rng: np.random.Generator) -> str:
    words = class_words(c)
    picked = [words[i] for i in rng.choice(len(words), vocab.class_words_per_caption, replace=False)]
    pool = DISTRACTORS[: vocab.distractor_vocab]
    extra = [pool[i] for i in rng.integers(0, len(pool), vocab.distractors)]
    return " ".join([CAPTION_PREFIX] + picked + extra)


@dataclass(frozen=True)
class SyntheticData:
    images: ImageTensorSet
    captions: list
    masks: MaskSet
    labels: np.ndarray
    class_names: list

    def label_map(self) -> dict[str, str]:
        return {i: self.class_names[k] for i, k in zip(self.images.ids, self.labels)}


def gen_synthetic(
    num_classes: int = 5,
    per_class: int = 100,
    image_shape=(3, 16, 16),
    vocab: CaptionVocab = CaptionVocab(),
    noise: float = 0.1,
    seed: int = 0,
    clutter: int = 2,
    vary: bool = True,
    id_prefix: str = "img",
) -> SyntheticData:
    """Generate ``num_classes * per_class`` labelled images with captions and masks.

    Record ``i`` belongs to class ``i % num_classes``. With ``vary`` the
    shape position and colour are drawn per image; otherwise the shape is
    centred and white.
    """
    if num_classes < 2 or per_class < 2:
        raise ConfigError("need at least 2 classes and 2 images per class")
    ch, h, w = image_shape
    t = TEMPLATE_SIZE
    if h < t + 1 or w < t + 1:
        raise ConfigError(f"image {h}x{w} too small for a {t}x{t} template")
    if noise < 0 or clutter < 0:
        raise ConfigError("noise and clutter must be >= 0")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    templates = [class_template(c) for c in range(num_classes)]
    images = np.zeros((n, ch, h, w), np.float32)
    masks = np.zeros((n, h, w), np.uint8)
    labels = np.arange(n) % num_classes
    captions = []
    width = len(str(n - 1))
    for i in range(n):
        c = labels[i]
        img = images[i]
        for _ in range(clutter):
            rh, rw = rng.integers(2, h // 2 + 1), rng.integers(2, w // 2 + 1)
            r0, c0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
            img[:, r0:r0 + rh, c0:c0 + rw] = rng.uniform(0.2, 1.0, ch)[:, None, None]
        if vary:
            r0, c0 = rng.integers(0, h - t + 1), rng.integers(0, w - t + 1)
            colour = rng.uniform(0.5, 1.0, ch)
        else:
            r0, c0 = (h - t) // 2, (w - t) // 2
            colour = np.ones(ch)
        region = img[:, r0:r0 + t, c0:c0 + t]
        region[:, templates[c]] = colour[:, None]
        masks[i, r0:r0 + t, c0:c0 + t] = templates[c]
        if noise > 0:
            img += rng.normal(0.0, noise, img.shape).astype(np.float32)
        captions.append(
            CaptionRecord(
                id=f"{id_prefix}{i:0{width}d}",
                caption=make_caption(c, vocab, rng),
                class_hint=class_name(c),
            )
        )
    ids = tuple(r.id for r in captions)
    names = [class_name(c) for c in range(num_classes)]
    return SyntheticData(ImageTensorSet(ids, images), captions, MaskSet(ids, masks), labels, names)


def caption_nn_rate(captions, dim: int = 128, seed: int = 0) -> float:
    """Fraction of records whose caption nearest neighbour shares its class_hint."""
    from .pairs import build_pair_manifest, manifest_stats
    from .text import embed_captions

    m, _ = embed_captions(captions, dim, seed)
    hints = {r.id: r.class_hint for r in captions}
    return manifest_stats(build_pair_manifest(m), hints).same_class_rate


def corrupt_captions(
    captions, fraction: float = 0.5, vocab: CaptionVocab = CaptionVocab(), seed: int = 0
) -> list[CaptionRecord]:
    """Replace a fraction of original captions with text from another class.

    Every returned record also carries a clean ``generated_caption`` and ITM
    scores that favour whichever caption matches the true class, standing in
    for a captioning model plus an ITM scorer.
    """
    rng = np.random.default_rng(seed)
    names = sorted({r.class_hint for r in captions})
    index = {nm: k for k, nm in enumerate(names)}
    classes = [_class_index(nm) for nm in names]
    n = len(captions)
    bad = np.zeros(n, bool)
    bad[rng.choice(n, int(round(fraction * n)), replace=False)] = True
    out = []
    for rec, is_bad in zip(captions, bad):
        true_c = classes[index[rec.class_hint]]
        generated = make_caption(true_c, vocab, rng)
        if is_bad:
            others = [c for c in classes if c != true_c]
            wrong = others[rng.integers(len(others))]
            original = make_caption(wrong, vocab, rng)
            s_orig, s_gen = rng.uniform(0.05, 0.35), rng.uniform(0.55, 0.95)
        else:
            original = rec.caption
            s_orig, s_gen = rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)
        out.append(dataclasses.replace(
            rec, caption=original, generated_caption=generated,
            itm_original=round(float(s_orig), 4), itm_generated=round(float(s_gen), 4), source=None,
        ))
    return out


def _class_index(name: str) -> int:
    for c, (nm, _, _) in enumerate(SHAPES):
        if nm == name:
            return c
    if name.startswith("kind"):
        return int(name[4:])
    raise ValueError(f"unknown class name {name!r}")
