import json
import subprocess
import sys
from pathlib import Path

from lgcontrast.cli import main
from lgcontrast.nn import ConvBlock, EncoderSpec


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-synth", "--classes", 5, "--per-class", 100, "--seed", 7, "--out-dir", tmp_path / name) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b
    assert set(a) == {"images.img", "images.img.ids", "masks.msk", "masks.msk.ids", "captions.jsonl",
                      "labels.tsv", "summary.txt"}
    rate = float(a["summary.txt"].decode().split("caption_nn_same_class_rate=")[1])
    assert rate >= 0.95


def test_train_requires_seed(tmp_path, capsys):
    code = run("train", "--config", "c.json", "--dataset", "x.img", "--captions", "c.jsonl",
               "--labels", "l.tsv", "--out-dir", tmp_path)
    assert code == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert run("shuffle") == 1
    assert run("embed", "--captions", "a", "--out", "b", "--bogus") == 1
    assert "usage" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "c.jsonl"
    bad.write_text('{"caption": "no id"}\n')
    assert run("embed", "--captions", bad, "--out", tmp_path / "e.emb") == 2
    assert ":1:" in capsys.readouterr().err
    assert run("embed", "--captions", tmp_path / "missing.jsonl", "--out", tmp_path / "e.emb") == 2


def test_help_documents_flags():
    proc = subprocess.run([sys.executable, "-m", "lgcontrast.cli", "sample-pairs", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--embeddings", "--ids", "--out", "--block-size", "--no-exclude-self", "--threads"):
        assert flag in proc.stdout


def test_filter_captions_command(tmp_path):
    fixture = Path(__file__).parent / "fixtures" / "itm_captions.jsonl"
    assert run("filter-captions", "--in", fixture, "--out", tmp_path / "f.jsonl", "--min-score", 0.4,
               "--report", tmp_path / "r.txt") == 0
    report = dict(line.split("=") for line in (tmp_path / "r.txt").read_text().splitlines())
    assert report["dropped"] == "3" and report["kept"] == "7" and report["thresholding"] == "on"
    assert len((tmp_path / "f.jsonl").read_text().splitlines()) == 7


def test_sample_pairs_threads_do_not_matter(tmp_path):
    d = tmp_path / "d"
    run("gen-synth", "--classes", 3, "--per-class", 20, "--seed", 1, "--out-dir", d)
    run("embed", "--captions", d / "captions.jsonl", "--out", d / "e.emb")
    outs = []
    for threads, block in ((1, 256), (3, 7)):
        out = tmp_path / f"m{threads}.tsv"
        assert run("sample-pairs", "--embeddings", d / "e.emb", "--ids", d / "e.emb.ids", "--out", out,
                   "--threads", threads, "--block-size", block) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def _pipeline(root):
    d = root / "data"
    small = EncoderSpec((3, 16, 16), (ConvBlock(4, pool=True), ConvBlock(8, pool=True)), 8, (8, 8))
    cfg = {"pair_source": "manifest", "epochs": 2, "batch_size": 16, "encoder": small.to_dict(),
           "probe_iters": 30}
    (root / "config.json").write_text(json.dumps(cfg))
    steps = [
        ("gen-synth", "--classes", 5, "--per-class", 30, "--seed", 3, "--out-dir", d),
        ("embed", "--captions", d / "captions.jsonl", "--out", root / "emb" / "e.emb"),
        ("sample-pairs", "--embeddings", root / "emb" / "e.emb", "--ids", root / "emb" / "e.emb.ids",
         "--out", root / "pairs.tsv"),
        ("train", "--config", root / "config.json", "--dataset", d / "images.img", "--captions",
         d / "captions.jsonl", "--manifest", root / "pairs.tsv", "--labels", d / "labels.tsv",
         "--out-dir", root / "run", "--seed", 0),
        ("eval", "linear", "--checkpoint", root / "run" / "checkpoint.ckpt", "--dataset", d / "images.img",
         "--labels", d / "labels.tsv", "--out", root / "linear.txt", "--model", "lg"),
        ("eval", "fewshot", "--checkpoint", root / "run" / "checkpoint.ckpt", "--dataset", d / "images.img",
         "--labels", d / "labels.tsv", "--out", root / "fewshot.txt", "--seed", 0, "--episodes", 50,
         "--model", "lg"),
        ("eval", "saliency", "--checkpoint", root / "run" / "checkpoint.ckpt", "--dataset", d / "images.img",
         "--labels", d / "labels.tsv", "--masks", d / "masks.msk", "--out", root / "saliency.txt",
         "--model", "lg"),
        ("saliency", "--checkpoint", root / "run" / "checkpoint.ckpt", "--dataset", d / "images.img",
         "--labels", d / "labels.tsv", "--out", root / "maps.img"),
        ("report", "--inputs", root / "linear.txt", root / "fewshot.txt", "--out", root / "summary.txt",
         "--avg"),
    ]
    (root / "emb").mkdir()
    for argv in steps:
        assert run(*argv) == 0, argv[0]


def test_full_pipeline(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    fa, fb = files(a), files(b)
    assert fa == fb
    expected = {"config.json", "pairs.tsv", "emb/e.emb", "emb/e.emb.ids", "linear.txt", "fewshot.txt",
                "saliency.txt", "maps.img", "maps.img.ids", "summary.txt", "run/checkpoint.ckpt",
                "run/final.ckpt", "run/history.csv", "run/config.json"}
    assert expected <= set(fa)
    assert set(fa) - expected == {k for k in fa if k.startswith("data/")}
    summary = fa["summary.txt"].decode().splitlines()
    assert summary[0].split() == ["Model", "linear", "fewshot", "Avg"]
    assert summary[1].split()[0] == "lg"
    history = fa["run/history.csv"].decode().splitlines()
    assert history[0] == "epoch,train_loss,val_acc,lr" and len(history) == 4
    assert "AUC-ROC" in fa["saliency.txt"].decode()


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(["lgcontrast", "report", "--inputs", str(tmp_path / "nope.txt"),
                           "--out", str(tmp_path / "o.txt")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "nope.txt" in proc.stderr
