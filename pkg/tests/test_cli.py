import csv
import io
import os

import numpy as np
import pytest

from cnnf import weights_io as W
from cnnf.cli import main
from cnnf.data import CLASS_NAMES, load_manifest
from conftest import write_toy_tree

BENCH = [
    [49, 4, 11, 8, 0, 15, 5],
    [5, 53, 9, 2, 4, 8, 14],
    [5, 10, 88, 1, 7, 4, 4],
    [11, 0, 2, 63, 1, 5, 10],
    [1, 4, 4, 4, 47, 2, 2],
    [16, 21, 17, 10, 14, 100, 34],
    [11, 9, 11, 9, 6, 33, 108],
]


@pytest.fixture(autouse=True)
def no_out_env(monkeypatch):
    monkeypatch.delenv("CNNF_OUT_DIR", raising=False)


def prepare(tmp_path, name="prep", seed="0", per_class=10, extra=()):
    root = tmp_path / "data"
    if not root.exists():
        write_toy_tree(root, per_class=per_class, hw=12)
    out = tmp_path / name
    rc = main(["prepare", str(root), "--out", str(out), "--seed", seed,
               "--image-size", "16", *extra])
    assert rc == 0
    return root, out


def train(tmp_path, prep_dir, name="run", seed="0", epochs="3", extra=()):
    out = tmp_path / name
    rc = main(["train", "--manifest", str(prep_dir / "manifest.json"),
               "--data-root", str(tmp_path / "data"), "--out", str(out),
               "--seed", seed, "--arch", "mini", "--epochs", epochs,
               "--lr", "0.01", "--input-scale", "255", *extra])
    assert rc == 0
    return out


def test_prepare_outputs(tmp_path, capsys):
    _, out = prepare(tmp_path)
    for artifact in ("manifest.json", "mean.cnnf", "class_counts.csv", "config.ini"):
        assert (out / artifact).exists()
    manifest = load_manifest(out / "manifest.json")
    assert manifest.image_size == 16
    assert len(manifest.val) == 7  # one per class from 10 at 90/10
    assert all(e.provenance == "original" for e in manifest.val)
    mean = W.load(str(out / "mean.cnnf")).tensors[W.MEAN_NAME]
    assert mean.shape == (1, 16, 16, 3)


def test_prepare_balance_equalizes_counts(tmp_path):
    _, out = prepare(tmp_path)
    with open(out / "class_counts.csv") as f:
        rows = list(csv.DictReader(f))
    balanced = next(r for r in rows if r["stage"] == "train_balanced")
    counts = [int(balanced[c]) for c in CLASS_NAMES]
    assert len(set(counts)) == 1


def test_prepare_augment_target_exact(tmp_path):
    _, out = prepare(tmp_path, name="prep_t", extra=("--augment-target", "100"))
    manifest = load_manifest(out / "manifest.json")
    n_aug = sum(1 for e in manifest.train if e.provenance == "augmented")
    n_orig = sum(1 for e in manifest.train if e.provenance == "original")
    assert n_orig + n_aug == 100  # balancing happens after the exact-size step


def test_prepare_same_seed_identical_manifest(tmp_path):
    _, out1 = prepare(tmp_path, name="p1", seed="5")
    _, out2 = prepare(tmp_path, name="p2", seed="5")
    assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()
    assert (out1 / "mean.cnnf").read_bytes() == (out2 / "mean.cnnf").read_bytes()


def test_prepare_rejects_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\nimage_sise = 16\n")
    root = tmp_path / "data"
    write_toy_tree(root, per_class=2, hw=8)
    rc = main(["prepare", str(root), "--out", str(tmp_path / "o"),
               "--config", str(cfg)])
    assert rc == 2


def test_train_artifacts_and_frozen_convs(tmp_path):
    _, prep = prepare(tmp_path)
    run = train(tmp_path, prep)
    for artifact in ("curves.csv", "checkpoint_initial.cnnf",
                     "checkpoint_final.cnnf", "checkpoint_best.cnnf", "config.ini"):
        assert (run / artifact).exists()
    initial = W.load(str(run / "checkpoint_initial.cnnf"))
    final = W.load(str(run / "checkpoint_final.cnnf"))
    for name in ("conv1", "conv2", "conv3", "conv4", "conv5"):
        assert initial.tensors[f"{name}.weights"].tobytes() == \
            final.tensors[f"{name}.weights"].tobytes()
    # trained layers did move
    assert initial.tensors["fc8.weights"].tobytes() != \
        final.tensors["fc8.weights"].tobytes()
    lines = (run / "curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_top1,val_top1,lr"
    assert len(lines) == 4


def test_train_without_pretrained_runs_from_scratch(tmp_path):
    _, prep = prepare(tmp_path)
    run = train(tmp_path, prep, name="scratch")
    assert (run / "checkpoint_final.cnnf").exists()
    structure = (run / "structure.txt").read_text()
    assert "conv1" in structure and "fc8" in structure


def test_train_overfit_via_cli(tmp_path):
    # the documented workflow end to end: a small separable set must be
    # memorized (train top-1 <= 0.05) within 200 epochs
    root = tmp_path / "data"
    write_toy_tree(root, per_class=5, hw=24)
    prep = tmp_path / "prep"
    assert main(["prepare", str(root), "--out", str(prep), "--seed", "1",
                 "--image-size", "32", "--train-frac", "0.8",
                 "--transforms", ""]) == 0
    run = tmp_path / "overfit"
    assert main(["train", "--manifest", str(prep / "manifest.json"),
                 "--data-root", str(root), "--out", str(run), "--seed", "1",
                 "--arch", "mini", "--epochs", "200", "--lr", "0.01",
                 "--input-scale", "255"]) == 0
    with open(run / "curves.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 200
    assert float(rows[-1]["train_top1"]) <= 0.05


def test_train_with_pretrained_imports_leniently(tmp_path, capsys):
    _, prep = prepare(tmp_path)
    first = train(tmp_path, prep, name="first")
    capsys.readouterr()
    second = train(tmp_path, prep, name="second", extra=(
        "--pretrained", str(first / "checkpoint_final.cnnf")))
    msgs = capsys.readouterr().out
    # donor has bn1/bn2 records that the fresh (pre-surgery) net lacks
    assert "skipped" in msgs
    donor = W.load(str(first / "checkpoint_final.cnnf"))
    result = W.load(str(second / "checkpoint_initial.cnnf"))
    assert donor.tensors["fc6.weights"].tobytes() == \
        result.tensors["fc6.weights"].tobytes()


def test_full_determinism_prepare_and_train(tmp_path):
    _, prep1 = prepare(tmp_path, name="pa", seed="3")
    _, prep2 = prepare(tmp_path, name="pb", seed="3")
    run1 = train(tmp_path, prep1, name="ra", seed="3")
    run2 = train(tmp_path, prep2, name="rb", seed="3")
    assert (prep1 / "manifest.json").read_bytes() == (prep2 / "manifest.json").read_bytes()
    assert (run1 / "curves.csv").read_bytes() == (run2 / "curves.csv").read_bytes()
    for ckpt in ("checkpoint_initial.cnnf", "checkpoint_final.cnnf",
                 "checkpoint_best.cnnf"):
        assert (run1 / ckpt).read_bytes() == (run2 / ckpt).read_bytes()


def test_eval_checkpoint_on_test_dir(tmp_path, capsys):
    _, prep = prepare(tmp_path)
    run = train(tmp_path, prep, epochs="10")
    test_root = tmp_path / "held_out"
    write_toy_tree(test_root, per_class=2, hw=12, seed=99)
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(run / "checkpoint_best.cnnf"),
               "--test-dir", str(test_root), "--out", str(out)])
    assert rc == 0
    assert "samples evaluated: 14" in capsys.readouterr().out
    assert (out / "report.txt").exists()
    assert (out / "report.csv").exists()
    with open(out / "predictions.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 14
    assert {r["true"] for r in rows} == set(CLASS_NAMES)


def test_eval_empty_test_dir_exits_3(tmp_path):
    _, prep = prepare(tmp_path)
    run = train(tmp_path, prep)
    empty = tmp_path / "empty"
    for cls in CLASS_NAMES:
        (empty / cls).mkdir(parents=True)
    rc = main(["eval", "--checkpoint", str(run / "checkpoint_best.cnnf"),
               "--test-dir", str(empty), "--out", str(tmp_path / "ev")])
    assert rc == 3


def test_eval_predictions_file_reproduces_benchmark(tmp_path, capsys):
    pred_csv = tmp_path / "preds.csv"
    with open(pred_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true", "predicted"])
        for p in range(7):
            for t in range(7):
                for _ in range(BENCH[p][t]):
                    writer.writerow([CLASS_NAMES[t], CLASS_NAMES[p]])
    out = tmp_path / "eval"
    rc = main(["eval", "--predictions", str(pred_csv), "--out", str(out)])
    assert rc == 0
    text = (out / "report.txt").read_text()
    for token in ("53.261%", "55.789%", "73.95%", "68.478%", "73.438%", "47.17%",
                  "57.754%", "50%", "52.475%", "61.972%", "64.948%", "59.494%",
                  "59.88%", "61.017%", "59.001% (508/861)"):
        assert token in text
    assert "samples evaluated: 861" in capsys.readouterr().out


def test_eval_requires_exactly_one_source(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "e")]) == 2


def test_report_renders_plot(tmp_path):
    _, prep = prepare(tmp_path)
    run = train(tmp_path, prep)
    out = tmp_path / "rep"
    rc = main(["report", "--history", str(run / "curves.csv"), "--out", str(out)])
    assert rc == 0
    assert (out / "curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_malformed_csv_exits_5(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,train_top1,val_top1,lr\n1,a,b,c\n")
    rc = main(["report", "--history", str(bad), "--out", str(tmp_path / "r")])
    assert rc == 5
    assert "line 2" in capsys.readouterr().err


def test_report_missing_column_named(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,train_top1,lr\n1,0.1,0.001\n")
    rc = main(["report", "--history", str(bad), "--out", str(tmp_path / "r")])
    assert rc == 5
    assert "val_top1" in capsys.readouterr().err


def test_out_dir_env_override(tmp_path, monkeypatch):
    root = tmp_path / "data"
    write_toy_tree(root, per_class=2, hw=8)
    env_out = tmp_path / "env_out"
    monkeypatch.setenv("CNNF_OUT_DIR", str(env_out))
    rc = main(["prepare", str(root), "--out", str(tmp_path / "ignored"),
               "--image-size", "8"])
    assert rc == 0
    assert (env_out / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_config_file_feeds_train(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\nepochs = 2\nlr = 0.02\n\n[schedule]\npatience = 4\n")
    _, prep = prepare(tmp_path)
    out = tmp_path / "cfgrun"
    rc = main(["train", "--manifest", str(prep / "manifest.json"),
               "--data-root", str(tmp_path / "data"), "--out", str(out),
               "--arch", "mini", "--config", str(cfg), "--input-scale", "255"])
    assert rc == 0
    lines = (out / "curves.csv").read_text().splitlines()
    assert len(lines) == 3  # header + 2 epochs
    echoed = (out / "config.ini").read_text()
    assert "lr = 0.02" in echoed and "patience = 4" in echoed
    assert "input_scale = 255" in echoed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_4(tmp_path, capsys):
    _, prep = prepare(tmp_path)
    rc = main(["train", "--manifest", str(prep / "manifest.json"),
               "--data-root", str(tmp_path / "data"), "--out", str(tmp_path / "dv"),
               "--seed", "0", "--arch", "mini", "--epochs", "5", "--lr", "1e18"])
    assert rc == 4
    err = capsys.readouterr().err
    assert "epoch" in err and "batch" in err


def test_installed_entry_point_help():
    import subprocess

    proc = subprocess.run(["cnnf", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("prepare", "train", "eval", "report"):
        assert sub in proc.stdout


def test_unknown_optimizer_exits_2(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\noptimizer = adam\n")
    _, prep = prepare(tmp_path)
    rc = main(["train", "--manifest", str(prep / "manifest.json"),
               "--data-root", str(tmp_path / "data"),
               "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert rc == 2
