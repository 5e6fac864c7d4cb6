"""Image ingestion and the training-data pipeline: bicubic resize to the
network's square input, right-angle rotation / horizontal-flip
augmentation, oversampling to balance classes, stratified train/val
splits, training-mean normalization, and seeded batching.

Pipeline order (fixed to prevent leakage):

    load -> resize -> split -> augment(train) -> oversample(train)
         -> compute/subtract mean -> batches

Augmentation and oversampling never touch the validation split, and the
normalization mean comes from the final training split only.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    BalanceError,
    DataError,
    InvalidArgumentError,
    InvalidImageError,
    LabelError,
    ShapeError,
)
from .tensor import Rng, derive_seed

log = logging.getLogger(__name__)

CLASS_NAMES = ("creamy", "diced", "grated", "juiced", "julienne", "sliced", "whole")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class ClassLabel(enum.IntEnum):
    CREAMY = 0
    DICED = 1
    GRATED = 2
    JUICED = 3
    JULIENNE = 4
    SLICED = 5
    WHOLE = 6

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise LabelError(f"unknown class name {name!r}; expected one of "
                             f"{CLASS_NAMES}") from None


ORIGINAL = "original"
AUGMENTED = "augmented"
OVERSAMPLED = "oversampled-copy"


@dataclass
class Sample:
    image: np.ndarray  # (1, h, w, 3) float32, values in [0, 255] pre-normalization
    label: int
    path: str  # relative "<class>/<file>"
    provenance: str = ORIGINAL
    transform: Optional[str] = None  # e.g. "rot90", "flip_h", "rot90+flip_h"


@dataclass
class Dataset:
    samples: List[Sample] = field(default_factory=list)
    mean: Optional[np.ndarray] = None  # (1, h, w, 3) from the training split

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: List[Tuple[str, str]] = field(default_factory=list)  # (path, reason)
    empty_classes: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# decoding and geometry
# ---------------------------------------------------------------------------


def decode_image(path: str) -> np.ndarray:
    """8-bit RGB pixels from a PNG or JPEG file."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in IMAGE_EXTENSIONS:
        raise InvalidImageError(f"{path}: unsupported extension {ext!r} "
                                f"(PNG and JPEG only)")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except InvalidImageError:
        raise
    except Exception as exc:
        raise InvalidImageError(f"{path}: cannot decode ({exc})") from exc


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bicubic resize of an (h, w, 3) uint8 image to (size, size, 3)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidImageError(f"expected (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise InvalidImageError("image has a zero dimension")
    pil = Image.fromarray(image, mode="RGB")
    return np.asarray(pil.resize((size, size), Image.BICUBIC), dtype=np.uint8)


def resize_to_224(image: np.ndarray) -> np.ndarray:
    return resize_image(image, 224)


def rotate(image: np.ndarray, angle: int) -> np.ndarray:
    """Right-angle rotation as an exact pixel permutation.

    Works on (h, w, c) or (n, h, w, c); 90/270 require a square image.
    """
    if angle not in (90, 180, 270):
        raise InvalidArgumentError(f"angle must be 90, 180 or 270, got {angle}")
    h, w = image.shape[-3], image.shape[-2]
    if angle in (90, 270) and h != w:
        raise InvalidArgumentError("90/270-degree rotation requires a square image")
    return np.ascontiguousarray(np.rot90(image, angle // 90, axes=(-3, -2)))


def flip_h(image: np.ndarray) -> np.ndarray:
    """Horizontal mirror (exact pixel permutation)."""
    return np.ascontiguousarray(np.flip(image, axis=-2))


def flip_v(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.flip(image, axis=-3))


TRANSFORMS = {
    "flip_h": flip_h,
    "rot90": lambda img: rotate(img, 90),
    "rot180": lambda img: rotate(img, 180),
    "rot270": lambda img: rotate(img, 270),
}

DEFAULT_TRANSFORMS = ("flip_h", "rot90", "rot180", "rot270")


def apply_transform(image: np.ndarray, transform: Optional[str]) -> np.ndarray:
    """Apply a transform tag, possibly a "+"-joined chain."""
    if not transform:
        return image
    for step in transform.split("+"):
        if step not in TRANSFORMS:
            raise InvalidArgumentError(f"unknown transform {step!r}")
        image = TRANSFORMS[step](image)
    return image


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def load_dataset(root: str, image_size: int = 224) -> Tuple[Dataset, LoadReport]:
    """Load `root/<class>/<image>` into path-sorted, resized samples.

    Undecodable files are skipped with a warning and counted in the
    report; an unknown class directory is an error.
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    report = LoadReport()
    samples: List[Sample] = []
    for entry in sorted(os.listdir(root)):
        full = os.path.join(root, entry)
        if not os.path.isdir(full):
            continue
        label = int(ClassLabel.from_name(entry))
        files = sorted(os.listdir(full))
        count_before = len(samples)
        for fname in files:
            rel = f"{entry}/{fname}"
            try:
                pixels = decode_image(os.path.join(full, fname))
                resized = resize_image(pixels, image_size)
            except InvalidImageError as exc:
                log.warning("skipping %s: %s", rel, exc)
                report.skipped.append((rel, str(exc)))
                continue
            samples.append(Sample(image=resized.astype(np.float32)[None],
                                  label=label, path=rel))
        if len(samples) == count_before:
            log.warning("class directory %r contributed no samples", entry)
            report.empty_classes.append(entry)
    report.loaded = len(samples)
    return Dataset(samples=samples), report


# ---------------------------------------------------------------------------
# augmentation and balancing
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    transforms: Sequence[str] = DEFAULT_TRANSFORMS
    target_size: Optional[int] = None  # None: apply every transform to every image
    seed: int = 0

    def __post_init__(self):
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise InvalidArgumentError(f"unknown transform {t!r}")


def _transformed(sample: Sample, name: str) -> Sample:
    chain = name if sample.transform is None else f"{sample.transform}+{name}"
    return Sample(image=TRANSFORMS[name](sample.image), label=sample.label,
                  path=sample.path, provenance=AUGMENTED, transform=chain)


def augment(dataset: Dataset, config: AugmentConfig) -> Dataset:
    """Expand with label-preserving transformed copies.

    With a target size, candidates are sampled (seeded, without
    replacement) so the output has exactly `target_size` samples;
    otherwise every transform is applied to every image.
    """
    n = len(dataset.samples)
    candidates = [(i, t) for i in range(n) for t in config.transforms]
    if config.target_size is None:
        chosen = candidates
    else:
        need = config.target_size - n
        if need < 0:
            raise InvalidArgumentError(
                f"target_size {config.target_size} is below the original count {n}")
        if need > len(candidates):
            raise InvalidArgumentError(
                f"target_size {config.target_size} exceeds the reachable "
                f"{n + len(candidates)} samples")
        perm = Rng(derive_seed(config.seed, "augment")).permutation(len(candidates))
        chosen = [candidates[int(j)] for j in sorted(perm[:need].tolist())]
    out = list(dataset.samples)
    out.extend(_transformed(dataset.samples[i], t) for i, t in chosen)
    return Dataset(samples=out, mean=dataset.mean)


def oversample_balance(dataset: Dataset, seed: int = 0,
                       classes: Optional[Sequence[int]] = None) -> Dataset:
    """Duplicate minority-class samples until every class count equals the max.

    `classes` widens the check beyond the labels present (the CLI passes
    all seven); a listed class with no samples is an error.
    """
    counts = dataset.class_counts()
    if classes is not None:
        for c in classes:
            if counts.get(int(c), 0) == 0:
                raise BalanceError(
                    f"class {CLASS_NAMES[int(c)]!r} has no samples to oversample")
    if not counts:
        raise DataError("cannot balance an empty dataset")
    target = max(counts.values())
    rng = Rng(derive_seed(seed, "oversample"))
    out = list(dataset.samples)
    by_class: Dict[int, List[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(i)
    for label in sorted(by_class):
        pool = by_class[label]
        for _ in range(target - len(pool)):
            src = dataset.samples[pool[rng.randint_below(len(pool))]]
            out.append(Sample(image=src.image, label=src.label, path=src.path,
                              provenance=OVERSAMPLED, transform=src.transform))
    return Dataset(samples=out, mean=dataset.mean)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    label: str  # class name
    provenance: str = ORIGINAL
    transform: Optional[str] = None

    def to_json(self) -> dict:
        d = {"path": self.path, "label": self.label, "provenance": self.provenance}
        if self.transform:
            d["transform"] = self.transform
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        return cls(path=d["path"], label=d["label"],
                   provenance=d.get("provenance", ORIGINAL),
                   transform=d.get("transform"))

    @classmethod
    def from_sample(cls, s: Sample) -> "ManifestEntry":
        return cls(path=s.path, label=CLASS_NAMES[s.label],
                   provenance=s.provenance, transform=s.transform)


@dataclass
class SplitManifest:
    seed: int
    train_frac: float
    image_size: int = 224
    train: List[ManifestEntry] = field(default_factory=list)
    val: List[ManifestEntry] = field(default_factory=list)
    test: List[ManifestEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": {"train": self.train_frac,
                          "val": round(1.0 - self.train_frac, 12)},
            "image_size": self.image_size,
            "train": [e.to_json() for e in self.train],
            "val": [e.to_json() for e in self.val],
            "test": [e.to_json() for e in self.test],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SplitManifest":
        return cls(seed=d["seed"], train_frac=d["fractions"]["train"],
                   image_size=d.get("image_size", 224),
                   train=[ManifestEntry.from_json(e) for e in d["train"]],
                   val=[ManifestEntry.from_json(e) for e in d["val"]],
                   test=[ManifestEntry.from_json(e) for e in d.get("test", [])])


def save_manifest(manifest: SplitManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path: str) -> SplitManifest:
    with open(path, "r", encoding="utf-8") as f:
        return SplitManifest.from_json(json.load(f))


def split(dataset: Dataset, train_frac: float = 0.9,
          seed: int = 0) -> Tuple[Dataset, Dataset, SplitManifest]:
    """Stratified per-class split; per-class train count = round(frac * n)."""
    if not dataset.samples:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < train_frac < 1.0:
        raise InvalidArgumentError("train_frac must lie in (0, 1)")
    by_class: Dict[int, List[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(i)
    train_idx: List[int] = []
    val_idx: List[int] = []
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < 2:
            log.warning("class %s has %d sample(s); assigning to train",
                        CLASS_NAMES[label], len(idxs))
            train_idx.extend(idxs)
            continue
        perm = Rng(derive_seed(seed, f"split/{CLASS_NAMES[label]}")).permutation(len(idxs))
        n_train = int(train_frac * len(idxs) + 0.5)  # round half up
        shuffled = [idxs[int(j)] for j in perm]
        train_idx.extend(shuffled[:n_train])
        val_idx.extend(shuffled[n_train:])
    train_ds = Dataset(samples=[dataset.samples[i] for i in train_idx])
    val_ds = Dataset(samples=[dataset.samples[i] for i in val_idx])
    manifest = SplitManifest(
        seed=seed, train_frac=train_frac,
        train=[ManifestEntry.from_sample(s) for s in train_ds.samples],
        val=[ManifestEntry.from_sample(s) for s in val_ds.samples])
    return train_ds, val_ds, manifest


def materialize(manifest: SplitManifest, root: str, which: str = "train") -> Dataset:
    """Rebuild a split's samples from the manifest and the original images."""
    entries = getattr(manifest, which)
    cache: Dict[str, np.ndarray] = {}
    samples = []
    for e in entries:
        if e.path not in cache:
            pixels = decode_image(os.path.join(root, e.path))
            cache[e.path] = resize_image(pixels, manifest.image_size)
        img = apply_transform(cache[e.path], e.transform).astype(np.float32)[None]
        samples.append(Sample(image=img, label=int(ClassLabel.from_name(e.label)),
                              path=e.path, provenance=e.provenance,
                              transform=e.transform))
    return Dataset(samples=samples)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def compute_mean(samples: Sequence[Sample], mode: str = "pixel") -> np.ndarray:
    """Mean image of the (final) training split; float64 accumulation."""
    if not samples:
        raise DataError("cannot compute the mean of zero samples")
    acc = np.zeros(samples[0].image.shape, dtype=np.float64)
    for s in samples:
        if s.image.shape != acc.shape:
            raise ShapeError(f"sample {s.path} has shape {s.image.shape}, "
                             f"expected {acc.shape}")
        acc += s.image
    mean = (acc / len(samples)).astype(np.float32)
    if mode == "channel":
        mean = mean.mean(axis=(0, 1, 2), keepdims=True).astype(np.float32)
    elif mode != "pixel":
        raise InvalidArgumentError("mean mode must be 'pixel' or 'channel'")
    return mean


def subtract_mean(image: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Center an image (or batch) with the stored training mean."""
    if mean.shape[1:3] not in (image.shape[1:3], (1, 1)):
        raise ShapeError(f"mean shape {mean.shape} does not match image "
                         f"shape {image.shape}")
    return image - mean


def normalize_dataset(dataset: Dataset, mean: np.ndarray) -> Dataset:
    samples = [Sample(image=subtract_mean(s.image, mean), label=s.label,
                      path=s.path, provenance=s.provenance, transform=s.transform)
               for s in dataset.samples]
    return Dataset(samples=samples, mean=mean)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def make_batches(samples: Sequence[Sample], batch_size: int = 50, seed: int = 0,
                 epoch: int = 1) -> Iterator[Tuple[np.ndarray, np.ndarray, List[int]]]:
    """Seeded per-epoch shuffle into (images, labels, indices) batches.

    The final partial batch is included; the union of batches is exactly
    the input multiset.
    """
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    n = len(samples)
    perm = Rng(derive_seed(seed, f"batches/{epoch}")).permutation(n)
    for start in range(0, n, batch_size):
        idx = [int(i) for i in perm[start:start + batch_size]]
        x = np.concatenate([samples[i].image for i in idx], axis=0)
        y = np.array([samples[i].label for i in idx], dtype=np.int64)
        yield x, y, idx
