"""Command-line entry point: ``lgcontrast <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 invalid data or configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .captions import FilterPolicy, filter_captions
from .errors import DataError, ValidationError
from .evaluation import (
    MetricsReport,
    fewshot_eval,
    linear_probe,
    merge_reports,
    read_report,
    saliency_auc,
    write_report,
)
from .nn import encode, gradcam, load_checkpoint, save_checkpoint
from .pairs import NNQueryConfig, build_pair_manifest
from .synthetic import caption_nn_rate, gen_synthetic
from .text import embed_captions
from .trainer import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgcontrast", description="Language-guided contrastive learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate the synthetic image/caption dataset")
    g.add_argument("--classes", type=int, required=True, help="number of classes (>= 2)")
    g.add_argument("--per-class", type=int, required=True, help="images per class (>= 2)")
    g.add_argument("--seed", type=int, required=True, help="generator seed")
    g.add_argument("--out-dir", required=True, help="output directory")
    g.add_argument("--noise", type=float, default=0.1, help="additive noise std (default 0.1)")
    g.add_argument("--clutter", type=int, default=2, help="clutter rectangles per image (default 2)")
    g.add_argument("--size", type=int, default=16, help="image height and width (default 16)")

    e = sub.add_parser("embed", help="embed captions with the hashing embedder")
    e.add_argument("--captions", required=True, help="captions JSON-lines file")
    e.add_argument("--out", required=True, help="output embeddings file (EMB1)")
    e.add_argument("--ids", help="ids sidecar path (default <out>.ids)")
    e.add_argument("--dim", type=int, default=128, help="embedding width (default 128)")
    e.add_argument("--seed", type=int, default=0, help="hash seed (default 0)")

    s = sub.add_parser("sample-pairs", help="build the nearest-neighbour pair manifest")
    s.add_argument("--embeddings", required=True, help="embeddings file (EMB1)")
    s.add_argument("--ids", required=True, help="ids sidecar file")
    s.add_argument("--out", required=True, help="output manifest")
    s.add_argument("--block-size", type=_positive_int, default=256, help="search tile size (default 256)")
    s.add_argument("--no-exclude-self", action="store_true", help="allow a row to match itself")
    s.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker threads (default: available cores); output does not depend on it")

    f = sub.add_parser("filter-captions", help="keep the higher-ITM caption per record")
    f.add_argument("--in", dest="inp", required=True, help="input captions file")
    f.add_argument("--out", required=True, help="output captions file")
    f.add_argument("--min-score", type=float, help="drop records whose retained score is below this")
    f.add_argument("--report", required=True, help="key-value report path")

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--config", required=True, help="flat JSON training config")
    t.add_argument("--dataset", required=True, help="images file (IMG1)")
    t.add_argument("--captions", required=True, help="captions file (used to pair when no manifest is given)")
    t.add_argument("--manifest", help="pair manifest for pair_source=manifest")
    t.add_argument("--labels", required=True, help="labels file, used for validation only")
    t.add_argument("--out-dir", required=True, help="output directory")
    t.add_argument("--seed", type=int, required=True, help="training seed (overrides the config)")

    sa = sub.add_parser("saliency", help="write GradCAM maps for every image")
    _eval_common(sa)
    sa.add_argument("--out", required=True, help="output maps file (IMG1, C=1)")

    ev = sub.add_parser("eval", help="evaluate frozen features")
    evs = ev.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    lin = evs.add_parser("linear", help="linear probe accuracy")
    _eval_common(lin)
    lin.add_argument("--test-fraction", type=float, default=0.25, help="held-out share per class")
    lin.add_argument("--lam", type=float, default=1e-3, help="L2 strength (default 1e-3)")
    fs = evs.add_parser("fewshot", help="5-way 5-shot nearest-centroid accuracy")
    _eval_common(fs)
    fs.add_argument("--seed", type=int, required=True, help="episode sampling seed")
    fs.add_argument("--episodes", type=_positive_int, default=600, help="episodes (default 600)")
    fs.add_argument("--way", type=_positive_int, default=5)
    fs.add_argument("--shot", type=_positive_int, default=5)
    fs.add_argument("--query", type=_positive_int, default=15)
    sal = evs.add_parser("saliency", help="saliency-map AUC-ROC / AUC-PR against masks")
    _eval_common(sal)
    sal.add_argument("--masks", required=True, help="masks file (MSK1)")
    sal.add_argument("--per-image", action="store_true", help="average per image instead of pooling pixels")
    for sp in (lin, fs, sal):
        sp.add_argument("--out", required=True, help="report path")
        sp.add_argument("--model", default="model", help="row label in the report")

    r = sub.add_parser("report", help="merge report files into one table")
    r.add_argument("--inputs", nargs="+", required=True, help="report files")
    r.add_argument("--out", required=True, help="output path")
    r.add_argument("--format", choices=("table", "kv"), default="table")
    r.add_argument("--avg", action="store_true", help="append an Avg column")
    r.add_argument("--names", nargs="+", help="row labels, one per input")
    return p


def _eval_common(sp):
    sp.add_argument("--checkpoint", required=True, help="checkpoint file (CKPT)")
    sp.add_argument("--dataset", required=True, help="images file (IMG1)")
    sp.add_argument("--labels", required=True, help="labels file")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(a):
    data = gen_synthetic(a.classes, a.per_class, image_shape=(3, a.size, a.size),
                         noise=a.noise, clutter=a.clutter, seed=a.seed)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_images(data.images, out / "images.img")
    io.write_masks(data.masks, out / "masks.msk")
    io.write_captions(data.captions, out / "captions.jsonl")
    io.write_labels(data.images.ids, [data.class_names[k] for k in data.labels], out / "labels.tsv")
    rate = caption_nn_rate(data.captions)
    (out / "summary.txt").write_text(
        f"images={len(data.images)}\nclasses={a.classes}\nseed={a.seed}\ncaption_nn_same_class_rate={rate!r}\n",
        encoding="utf-8")


def cmd_embed(a):
    records = io.read_captions(a.captions)
    m, fallbacks = embed_captions(records, a.dim, a.seed)
    io.write_embeddings(m, a.out, a.ids)
    for i in fallbacks:
        print(f"warning: caption of {i!r} has no tokens; used the fallback vector", file=sys.stderr)


def cmd_sample_pairs(a):
    m = io.read_embeddings(a.embeddings, a.ids)
    cfg = NNQueryConfig(exclude_self=not a.no_exclude_self, block_size=a.block_size)
    io.write_manifest(build_pair_manifest(m, cfg, threads=a.threads), a.out)


def cmd_filter(a):
    records = io.read_captions(a.inp)
    kept, report = filter_captions(records, FilterPolicy(a.min_score))
    io.write_captions(kept, a.out)
    Path(a.report).write_text(report.to_text(), encoding="utf-8")


def _labels_for(ids, path):
    codes, classes = io.encode_labels(ids, io.read_labels(path))
    return codes, classes


def cmd_train(a):
    cfg = TrainConfig.from_json(a.config)
    cfg = TrainConfig.from_flat({**cfg.to_flat(), "seed": a.seed})
    images = io.read_images(a.dataset)
    captions = io.read_captions(a.captions)
    labels, _ = _labels_for(images.ids, a.labels)
    manifest = None
    if cfg.pair_source == "manifest":
        manifest_file = a.manifest or cfg.manifest_path
        if manifest_file:
            manifest = io.read_manifest(manifest_file)
        else:
            manifest = build_pair_manifest(embed_captions(captions)[0])
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, images, labels, manifest, log=lambda s: print(s, file=sys.stderr))
    meta = {"best_epoch": result.best_epoch, "seed": a.seed}
    save_checkpoint(out / "checkpoint.ckpt", result.spec, result.params, meta)
    save_checkpoint(out / "final.ckpt", result.spec, result.final_params, {"epoch": cfg.epochs, "seed": a.seed})
    (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_features(a):
    spec, params, _ = load_checkpoint(a.checkpoint)
    images = io.read_images(a.dataset)
    labels, classes = _labels_for(images.ids, a.labels)
    return spec, params, images, labels, classes, encode(spec, params, images.data)


def _saliency_maps(spec, params, images, labels, feats):
    probe = linear_probe(feats, labels, lam=1e-3, max_iters=500, num_classes=int(labels.max()) + 1)
    if not probe.converged:
        print(f"warning: linear probe stopped at {probe.iterations} iterations "
              f"(grad norm {probe.grad_norm:.2e})", file=sys.stderr)
    maps = np.stack([gradcam(spec, params, img, probe.weights, int(y)).values
                     for img, y in zip(images.data, labels)])
    return maps.astype(np.float32)


def cmd_saliency(a):
    spec, params, images, labels, _, feats = _load_features(a)
    maps = _saliency_maps(spec, params, images, labels, feats)
    io.write_images(io.ImageTensorSet(images.ids, maps[:, None]), a.out)


def _stratified_split(labels, test_fraction):
    test = np.zeros(labels.shape[0], bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = max(1, int(round(len(members) * test_fraction)))
        test[members[-k:]] = True
    return np.flatnonzero(~test), np.flatnonzero(test)


def cmd_eval(a):
    spec, params, images, labels, _, feats = _load_features(a)
    meta = {"model": a.model, "checkpoint": Path(a.checkpoint).name, "dataset": Path(a.dataset).name}
    if a.mode == "linear":
        tr, te = _stratified_split(labels, a.test_fraction)
        res = linear_probe(feats[tr], labels[tr], feats[te], labels[te], lam=a.lam,
                           num_classes=int(labels.max()) + 1)
        meta.update(lam=a.lam, converged=res.converged, iterations=res.iterations)
        report = MetricsReport("linear", ["linear"], {a.model: {"linear": res.accuracy}}, meta)
    elif a.mode == "fewshot":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = fewshot_eval(feats, labels, a.episodes, a.seed, a.way, a.shot, a.query)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        meta.update(seed=a.seed, episodes=a.episodes, way=a.way, shot=a.shot, query=a.query,
                    stderr=repr(res.stderr))
        report = MetricsReport("fewshot", ["fewshot"], {a.model: {"fewshot": res.mean}}, meta)
    else:
        masks = io.read_masks(a.masks)
        if masks.ids != images.ids:
            raise ValidationError("mask ids do not match image ids")
        maps = _saliency_maps(spec, params, images, labels, feats)
        roc, pr = saliency_auc(maps, masks.data, per_image=a.per_image)
        meta.update(pooling="per-image" if a.per_image else "pooled")
        report = MetricsReport("saliency", ["AUC-ROC", "AUC-PR"], {a.model: {"AUC-ROC": roc, "AUC-PR": pr}}, meta)
    write_report(report, a.out)


def cmd_report(a):
    reports = [read_report(p) for p in a.inputs]
    if a.names and len(a.names) != len(reports):
        raise UsageError("--names needs one label per input")
    merged = merge_reports(reports, labels=a.names, avg=a.avg)
    write_report(merged, a.out, fmt=a.format)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "embed": cmd_embed,
    "sample-pairs": cmd_sample_pairs,
    "filter-captions": cmd_filter,
    "train": cmd_train,
    "saliency": cmd_saliency,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
