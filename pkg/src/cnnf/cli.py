"""Command-line workflow: `prepare` a dataset, `train` (fine-tune), `eval`
a checkpoint on a held-out directory, `report` training curves.

Configuration is layered: built-in defaults, then an INI-style config file
(`key = value` under [data] / [train] / [schedule]), then command-line
flags.  The fully resolved config is echoed into every run's output
directory, and every command is reproducible from that echo plus its seed.
The CNNF_OUT_DIR environment variable overrides --out.

Exit codes: 0 success, 2 config error, 3 data error, 4 training
divergence, 5 artifact format error, 1 anything else.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import sys
from typing import Optional

import numpy as np

from . import data as D
from . import layers as L
from . import metrics as ME
from . import model as MO
from . import optim as O
from . import weights_io as W
from .errors import (
    CnnfError,
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
)

OUT_DIR_ENV = "CNNF_OUT_DIR"

EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (DivergenceError, 4),
    (FormatError, 5),
)

DEFAULTS = {
    "data": {
        "image_size": "224",
        "train_frac": "0.9",
        "transforms": "flip_h,rot90,rot180,rot270",
        "augment_target": "",  # empty: apply every transform to every image
        "balance": "true",
        "mean_mode": "pixel",
    },
    "train": {
        "arch": "cnnf",
        "classes": "7",
        "epochs": "400",
        "batch_size": "50",
        "lr": "0.001",
        "momentum": "0.5",
        "weight_decay": "0.0005",
        "optimizer": "sgd",
        "batchnorm": "true",
        "freeze": "conv1,conv2,conv3,conv4,conv5",
        "dropout": "0.5",
        "init_variance": "0.01",
        "input_scale": "1.0",
        "early_stop": "",
    },
    "schedule": {
        "decay_factor": "10",
        "patience": "10",
        "min_lr": "1e-6",
    },
}


class RunConfig:
    """Typed view over defaults <- config file <- CLI overrides."""

    def __init__(self, config_path: Optional[str] = None):
        self.parser = configparser.ConfigParser()
        self.parser.read_dict(DEFAULTS)
        if config_path:
            if not os.path.isfile(config_path):
                raise ConfigError(f"config file {config_path!r} does not exist")
            try:
                self.parser.read(config_path)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {config_path!r}: {exc}") from None
        for section in self.parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key in self.parser[section]:
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")

    def override(self, section: str, key: str, value) -> None:
        if value is not None:
            self.parser[section][key] = str(value)

    def _get(self, section: str, key: str, conv, kind: str):
        raw = self.parser[section][key]
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: {raw!r} is not {kind}") from None

    def get_int(self, section: str, key: str) -> int:
        return self._get(section, key, int, "an integer")

    def get_float(self, section: str, key: str) -> float:
        return self._get(section, key, float, "a number")

    def get_bool(self, section: str, key: str) -> bool:
        raw = self.parser[section][key].strip().lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{section}.{key}: {raw!r} is not a boolean")

    def get_str(self, section: str, key: str) -> str:
        return self.parser[section][key].strip()

    def get_list(self, section: str, key: str) -> list:
        raw = self.get_str(section, key)
        return [item.strip() for item in raw.split(",") if item.strip()]

    def get_optional_int(self, section: str, key: str) -> Optional[int]:
        return self.get_int(section, key) if self.get_str(section, key) else None

    def echo(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            self.parser.write(f)


def _resolve_out_dir(args) -> str:
    out = os.environ.get(OUT_DIR_ENV) or args.out
    if not out:
        raise ConfigError(f"--out (or {OUT_DIR_ENV}) is required")
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args, overrides) -> RunConfig:
    cfg = RunConfig(getattr(args, "config", None))
    for section, key, attr in overrides:
        cfg.override(section, key, getattr(args, attr, None))
    return cfg


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

PREPARE_OVERRIDES = [
    ("data", "image_size", "image_size"),
    ("data", "train_frac", "train_frac"),
    ("data", "transforms", "transforms"),
    ("data", "augment_target", "augment_target"),
    ("data", "balance", "balance"),
    ("data", "mean_mode", "mean_mode"),
]


def cmd_prepare(args) -> int:
    cfg = _load_config(args, PREPARE_OVERRIDES)
    out = _resolve_out_dir(args)
    seed = args.seed
    image_size = cfg.get_int("data", "image_size")

    dataset, report = D.load_dataset(args.data_root, image_size=image_size)
    if not dataset.samples:
        raise DataError(f"no usable images under {args.data_root!r}")
    stages = [("loaded", dataset.class_counts())]

    train_ds, val_ds, manifest = D.split(
        dataset, train_frac=cfg.get_float("data", "train_frac"), seed=seed)
    manifest.image_size = image_size
    stages.append(("train_split", train_ds.class_counts()))
    stages.append(("val_split", val_ds.class_counts()))

    transforms = cfg.get_list("data", "transforms")
    if transforms:
        target = cfg.get_optional_int("data", "augment_target")
        train_ds = D.augment(train_ds, D.AugmentConfig(
            transforms=transforms, target_size=target, seed=seed))
        stages.append(("train_augmented", train_ds.class_counts()))

    if cfg.get_bool("data", "balance"):
        train_ds = D.oversample_balance(train_ds, seed=seed, classes=range(7))
        stages.append(("train_balanced", train_ds.class_counts()))

    mean = D.compute_mean(train_ds.samples, mode=cfg.get_str("data", "mean_mode"))

    manifest.train = [D.ManifestEntry.from_sample(s) for s in train_ds.samples]
    manifest.val = [D.ManifestEntry.from_sample(s) for s in val_ds.samples]
    D.save_manifest(manifest, os.path.join(out, "manifest.json"))
    W.save(W.Checkpoint(tensors={W.MEAN_NAME: mean},
                        metadata={"seed": seed, "image_size": image_size,
                                  "mean_mode": cfg.get_str("data", "mean_mode")}),
           os.path.join(out, "mean.cnnf"))

    with open(os.path.join(out, "class_counts.csv"), "w", encoding="utf-8",
              newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", *D.CLASS_NAMES, "total"])
        for stage, counts in stages:
            row = [counts.get(label, 0) for label in range(7)]
            writer.writerow([stage, *row, sum(row)])
    cfg.echo(os.path.join(out, "config.ini"))

    print(f"loaded {report.loaded} images "
          f"({len(report.skipped)} skipped, {len(report.empty_classes)} empty classes)")
    print(f"train {len(train_ds)} / val {len(val_ds)} samples -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_OVERRIDES = [
    ("train", "arch", "arch"),
    ("train", "classes", "classes"),
    ("train", "epochs", "epochs"),
    ("train", "batch_size", "batch_size"),
    ("train", "lr", "lr"),
    ("train", "momentum", "momentum"),
    ("train", "weight_decay", "weight_decay"),
    ("train", "batchnorm", "batchnorm"),
    ("train", "freeze", "freeze"),
    ("train", "dropout", "dropout"),
    ("train", "input_scale", "input_scale"),
    ("train", "early_stop", "early_stop"),
    ("schedule", "patience", "patience"),
    ("schedule", "min_lr", "min_lr"),
    ("schedule", "decay_factor", "decay_factor"),
]


def _build_base_network(cfg: RunConfig, image_size: int, seed: int):
    arch = cfg.get_str("train", "arch")
    dropout_rate = cfg.get_float("train", "dropout")
    if arch == "cnnf":
        if image_size != 224:
            raise ConfigError(
                f"arch 'cnnf' requires 224x224 inputs, manifest says {image_size}")
        return MO.build_cnnf(seed=seed, dropout_rate=dropout_rate)
    if arch == "mini":
        return MO.build_mini_cnnf(seed=seed, input_hw=image_size,
                                  dropout_rate=dropout_rate)
    raise ConfigError(f"unknown arch {arch!r} (expected 'cnnf' or 'mini')")


def _normalized_split(manifest, data_root, which, mean, input_scale):
    ds = D.materialize(manifest, data_root, which)
    ds = D.normalize_dataset(ds, mean)
    if input_scale != 1.0:
        scale = np.float32(input_scale)
        for s in ds.samples:
            s.image = s.image / scale
    return ds


def cmd_train(args) -> int:
    cfg = _load_config(args, TRAIN_OVERRIDES)
    if cfg.get_str("train", "optimizer") != "sgd":
        raise ConfigError("only the 'sgd' optimizer is implemented")
    out = _resolve_out_dir(args)
    seed = args.seed

    manifest = D.load_manifest(args.manifest)
    mean_path = args.mean or os.path.join(os.path.dirname(args.manifest), "mean.cnnf")
    if not os.path.isfile(mean_path):
        raise DataError(f"mean tensor {mean_path!r} not found (run prepare first)")
    mean = W.load(mean_path).tensors[W.MEAN_NAME]
    input_scale = cfg.get_float("train", "input_scale")

    train_ds = _normalized_split(manifest, args.data_root, "train", mean, input_scale)
    val_ds = _normalized_split(manifest, args.data_root, "val", mean, input_scale)

    net = _build_base_network(cfg, manifest.image_size, seed)
    if args.pretrained:
        ckpt = W.load(args.pretrained)
        records = {name: arr for name, arr in ckpt.tensors.items()
                   if not name.startswith(W.VELOCITY_PREFIX) and name != W.MEAN_NAME}
        net, skipped = W.import_pretrained(net, records, strict=False)
        for name, reason in skipped:
            print(f"pretrained import skipped {name}: {reason}")

    net = MO.replace_head(net, cfg.get_int("train", "classes"),
                          cfg.get_float("train", "init_variance"), seed)
    if cfg.get_bool("train", "batchnorm"):
        net = MO.insert_batchnorm(net)
    freeze = cfg.get_list("train", "freeze")
    if freeze:
        net = MO.set_trainable(net, freeze)

    sgd = O.SGDConfig(lr=cfg.get_float("train", "lr"),
                      momentum=cfg.get_float("train", "momentum"),
                      weight_decay=cfg.get_float("train", "weight_decay"),
                      batch_size=cfg.get_int("train", "batch_size"),
                      epochs=cfg.get_int("train", "epochs"),
                      early_stop_patience=cfg.get_optional_int("train", "early_stop"))
    sched = O.LRSchedule(decay_factor=cfg.get_float("schedule", "decay_factor"),
                         patience=cfg.get_int("schedule", "patience"),
                         min_lr=cfg.get_float("schedule", "min_lr"))

    run_meta = {"seed": seed, "image_size": manifest.image_size,
                "input_scale": input_scale}
    W.save(W.checkpoint_for_network(net, metadata={**run_meta, "epoch": 0,
                                                   "lr": sgd.lr},
                                    extra_tensors={W.MEAN_NAME: mean}),
           os.path.join(out, "checkpoint_initial.cnnf"))
    with open(os.path.join(out, "structure.txt"), "w", encoding="utf-8") as f:
        f.write(net.describe() + "\n")
    cfg.echo(os.path.join(out, "config.ini"))

    best = {"val": float("inf"), "records": None, "velocities": None,
            "epoch": 0, "lr": sgd.lr}

    def on_epoch(current, record, velocities):
        print(f"epoch {record.epoch}/{sgd.epochs}  "
              f"train {record.train_top1:.4f}  val {record.val_top1:.4f}  "
              f"lr {record.lr:.6g}")
        if record.val_top1 < best["val"]:
            best.update(val=record.val_top1,
                        records=W.network_records(current).copy(),
                        velocities=dict(velocities),
                        epoch=record.epoch, lr=record.lr)

    net, history, velocities = O.train(net, train_ds, val_ds, sgd, sched,
                                       seed=seed, on_epoch=on_epoch)

    with open(os.path.join(out, "curves.csv"), "wb") as f:
        f.write(ME.emit_curves(history))
    W.save(W.checkpoint_for_network(net, metadata={**run_meta,
                                                   "epoch": history[-1].epoch,
                                                   "lr": history[-1].lr},
                                    velocities=velocities,
                                    extra_tensors={W.MEAN_NAME: mean}),
           os.path.join(out, "checkpoint_final.cnnf"))
    best_net, _ = W.import_pretrained(net, best["records"], strict=True)
    W.save(W.checkpoint_for_network(best_net, metadata={**run_meta,
                                                        "epoch": best["epoch"],
                                                        "lr": best["lr"]},
                                    velocities=best["velocities"],
                                    extra_tensors={W.MEAN_NAME: mean}),
           os.path.join(out, "checkpoint_best.cnnf"))
    print(f"best val top-1 {best['val']:.4f} at epoch {best['epoch']} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _read_predictions_csv(path):
    def to_label(token: str) -> int:
        token = token.strip()
        if token.isdigit():
            label = int(token)
            if not 0 <= label < 7:
                raise DataError(f"{path}: label {label} out of range")
            return label
        return int(D.ClassLabel.from_name(token))

    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "true"):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'true,predicted'")
            pairs.append((to_label(row[0]), to_label(row[1])))
    if not pairs:
        raise DataError(f"{path}: no prediction rows")
    return pairs


def cmd_eval(args) -> int:
    out = _resolve_out_dir(args)
    if bool(args.predictions) == bool(args.checkpoint):
        raise ConfigError("provide exactly one of --checkpoint or --predictions")

    rows = None
    if args.predictions:
        pairs = _read_predictions_csv(args.predictions)
        cm = ME.ConfusionMatrix()
        for true_label, pred in pairs:
            cm.add(pred, true_label)
        report = ME.report_from_matrix(cm)
    else:
        ckpt = W.load(args.checkpoint)
        net, _, extras = W.network_from_checkpoint(ckpt)
        if W.MEAN_NAME not in extras:
            raise DataError(f"checkpoint {args.checkpoint!r} carries no "
                            f"{W.MEAN_NAME} record")
        mean = extras[W.MEAN_NAME]
        if not args.test_dir:
            raise ConfigError("--test-dir is required with --checkpoint")
        dataset, _ = D.load_dataset(args.test_dir, image_size=net.input_hw)
        if not dataset.samples:
            raise DataError(f"no usable test images under {args.test_dir!r}")
        dataset = D.normalize_dataset(dataset, mean)
        scale = float(ckpt.metadata.get("input_scale", 1.0))
        if scale != 1.0:
            for s in dataset.samples:
                s.image = s.image / np.float32(scale)
        cm = ME.ConfusionMatrix()
        batch = int(args.batch_size)
        rows = []
        for start in range(0, len(dataset.samples), batch):
            chunk = dataset.samples[start:start + batch]
            x = np.concatenate([s.image for s in chunk], axis=0)
            preds = ME.predictions(net.forward(x, L.EVAL))
            for s, p in zip(chunk, preds):
                cm.add(int(p), s.label)
                rows.append((s.path, D.CLASS_NAMES[s.label], D.CLASS_NAMES[int(p)]))
        report = ME.report_from_matrix(cm)

    text = ME.emit_report(report, "text")
    with open(os.path.join(out, "report.txt"), "wb") as f:
        f.write(text)
    with open(os.path.join(out, "report.csv"), "wb") as f:
        f.write(ME.emit_report(report, "csv"))
    if rows is not None:
        with open(os.path.join(out, "predictions.csv"), "w", encoding="utf-8",
                  newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["path", "true", "predicted"])
            writer.writerows(rows)
    sys.stdout.write(text.decode("utf-8"))
    print(f"samples evaluated: {report.sample_count}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    out = _resolve_out_dir(args)
    with open(args.history, "rb") as f:
        rows = ME.parse_curves_csv(f.read())
    plot_path = os.path.join(out, "curves.png")
    ME.plot_curves(rows, plot_path)
    print(f"{len(rows)} epochs -> {plot_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cnnf",
        description="Fine-tune, evaluate and report on the CNN-F food-state "
                    "classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="resize, split, augment, balance, compute mean")
    p.add_argument("data_root", help="directory tree root/<class>/<image>")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--transforms", help="comma list from flip_h,rot90,rot180,rot270")
    p.add_argument("--augment-target", dest="augment_target", type=int,
                   help="exact post-augmentation training-set size")
    p.add_argument("--balance", choices=("true", "false"))
    p.add_argument("--mean-mode", dest="mean_mode", choices=("pixel", "channel"))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune on a prepared manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", dest="data_root", required=True)
    p.add_argument("--mean", help="mean tensor file (default: next to manifest)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--pretrained", help="checkpoint to import (lenient)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=("cnnf", "mini"))
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-lr", dest="min_lr", type=float)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--batchnorm", choices=("true", "false"))
    p.add_argument("--freeze", help="comma list of layers to freeze ('' for none)")
    p.add_argument("--dropout", type=float)
    p.add_argument("--input-scale", dest="input_scale", type=float,
                   help="divide normalized pixels by this (CI fixtures use 255)")
    p.add_argument("--early-stop", dest="early_stop", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion-matrix report for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--test-dir", dest="test_dir")
    p.add_argument("--predictions",
                   help="CSV of true,predicted pairs instead of a model run")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=50)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render training curves to an image")
    p.add_argument("--history", required=True, help="curves.csv from train")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CnnfError as exc:
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
