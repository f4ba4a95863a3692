"""Datasets: synthetic 2-D blobs, 8x8 digit images, a CIFAR-10 binary-format
subset reader, crop/flip augmentation, persistence, and merging of
human-accepted adversarial examples back into training data.

All images live in [0,1] as float64; a dataset is immutable after
construction and safe to share read-only."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


class DataError(ValueError):
    """Malformed dataset input or incompatible annotation."""


@dataclass
class Example:
    id: str
    image: np.ndarray
    label: int
    origin: str = "base"  # or "annotation"


class Dataset:
    """Immutable collection of labeled images of one shape."""

    def __init__(self, name: str, n_classes: int, examples: list[Example]):
        self.name = name
        self.n_classes = int(n_classes)
        self.examples = list(examples)
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate example ids")
        for e in self.examples:
            if not 0 <= e.label < self.n_classes:
                raise DataError(f"label {e.label} out of range for {e.id}")
            if e.image.min() < 0 or e.image.max() > 1:
                raise DataError(f"image {e.id} leaves [0,1]")
        self.images = np.stack([e.image for e in self.examples]) \
            if self.examples else np.zeros((0,))
        self.labels = np.array([e.label for e in self.examples], dtype=np.int64)

    def __len__(self):
        return len(self.examples)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def iterate_batches(self, batch_size: int, rng: np.random.Generator):
        """Shuffled (X, t) batches; order is a pure function of the rng state."""
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_tensor(directory / "images.aetn", self.images)
        manifest = {
            "format": "robustkit-dataset",
            "version": 1,
            "name": self.name,
            "n_classes": self.n_classes,
            "ids": [e.id for e in self.examples],
            "labels": [int(e.label) for e in self.examples],
            "origins": [e.origin for e in self.examples],
        }
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
        return directory

    @staticmethod
    def load(directory) -> "Dataset":
        directory = Path(directory)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("format") != "robustkit-dataset":
            raise DataError(f"{directory} is not a dataset directory")
        images = ad.load_tensor(directory / "images.aetn")
        examples = [Example(i, img, lab, org) for i, img, lab, org in
                    zip(manifest["ids"], images, manifest["labels"],
                        manifest["origins"])]
        return Dataset(manifest["name"], manifest["n_classes"], examples)


# ---------------------------------------------------------------------------
# Generators / loaders


def gen_blobs(n_classes: int, per_class: int, spread: float,
              seed: int) -> Dataset:
    """Gaussian clusters in [0,1]^2 with class centers on a circle.

    ``spread`` is roughly a cluster diameter: points scatter with standard
    deviation spread/2 around their center, then clip to the unit square.
    Deterministic for a fixed seed.
    """
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    angles = 2 * math.pi * np.arange(n_classes) / n_classes + math.pi / 2
    centers = 0.5 + 0.35 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    examples = []
    for cls in range(n_classes):
        pts = centers[cls] + (spread / 2.0) * rng.standard_normal((per_class, 2))
        pts = np.clip(pts, 0.0, 1.0)
        for i, p in enumerate(pts):
            examples.append(Example(f"blob-{cls}-{i}", p, cls))
    return Dataset("blobs", n_classes, examples)


def blob_separation(n_classes: int) -> float:
    """Distance between adjacent class centers of :func:`gen_blobs`."""
    return 2 * 0.35 * math.sin(math.pi / n_classes)


def load_digits_dataset(per_class: int | None = None) -> Dataset:
    """8x8 grayscale digit images (from scikit-learn's bundled copy), scaled
    to [0,1] and shaped (1,8,8)."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images / 16.0
    labels = raw.target
    examples = []
    counts = {c: 0 for c in range(10)}
    for i, (img, lab) in enumerate(zip(images, labels)):
        if per_class is not None and counts[int(lab)] >= per_class:
            continue
        counts[int(lab)] += 1
        examples.append(Example(f"digit-{i}", img[None, :, :], int(lab)))
    return Dataset("digits", 10, examples)


_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes, channel-planar


def load_cifar_subset(path, per_class: int) -> Dataset:
    """Read CIFAR-10 binary batch file(s), keeping the first ``per_class``
    examples of each class, pixels scaled to [0,1]."""
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no .bin files under {path}")
    examples = []
    counts = {c: 0 for c in range(10)}
    for fpath in files:
        blob = fpath.read_bytes()
        if len(blob) % _CIFAR_RECORD:
            offset = len(blob) - (len(blob) % _CIFAR_RECORD)
            raise DataError(
                f"{fpath}: truncated record at byte offset {offset} "
                f"(file size {len(blob)} is not a multiple of {_CIFAR_RECORD})")
        n_records = len(blob) // _CIFAR_RECORD
        for r in range(n_records):
            rec = blob[r * _CIFAR_RECORD:(r + 1) * _CIFAR_RECORD]
            label = rec[0]
            if label > 9:
                raise DataError(f"{fpath}: bad label {label} at record {r}")
            if per_class is not None and counts[label] >= per_class:
                continue
            counts[label] += 1
            pixels = np.frombuffer(rec, dtype=np.uint8, offset=1)
            img = pixels.reshape(3, 32, 32).astype(np.float64) / 255.0
            examples.append(Example(f"{fpath.stem}-{r}", img, int(label)))
    return Dataset("cifar10", 10, examples)


def cifar_record_count(path) -> int:
    blob = Path(path).read_bytes()
    if len(blob) % _CIFAR_RECORD:
        raise DataError(f"{path}: size {len(blob)} not a multiple of {_CIFAR_RECORD}")
    return len(blob) // _CIFAR_RECORD


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    pad: int = 0
    flip_prob: float = 0.5

    def validate(self):
        if self.pad < 0:
            raise DataError("pad must be nonnegative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataError("flip probability must be in [0,1]")


def augment(image: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random crop back to the original size, and horizontal
    flip with the configured probability.  Output shape equals input shape.
    Non-image (flat) inputs only admit the identity configuration."""
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        if cfg.pad != 0:
            raise DataError("padding requires (C,H,W) images")
        return image.copy()
    out = image
    if cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p)), mode="reflect")
        oy = rng.integers(0, 2 * p + 1)
        ox = rng.integers(0, 2 * p + 1)
        h, w = image.shape[1:]
        out = padded[:, oy:oy + h, ox:ox + w]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    return out.copy()


# ---------------------------------------------------------------------------
# Active-learning merge


def merge_annotations(base: Dataset, records, images_root=None) -> Dataset:
    """Append human-reviewed adversarial images marked "unchanged" to the
    dataset, labeled with their original class.  "unsure" and "changed"
    records are dropped; records whose id already exists are skipped, so
    merging the same log twice is a no-op."""
    existing = {e.id for e in base.examples}
    added = []
    for rec in records:
        decision = rec["decision"]
        if decision not in ("unchanged", "unsure", "changed"):
            raise DataError(f"unknown decision {decision!r}")
        if decision != "unchanged":
            continue
        rid = rec["id"]
        if rid in existing:
            continue
        img_path = Path(rec["adversarial_image"])
        if images_root is not None and not img_path.is_absolute():
            img_path = Path(images_root) / img_path
        image = ad.load_tensor(img_path)
        if image.shape != base.input_shape:
            raise DataError(
                f"annotation {rid}: image shape {image.shape} does not match "
                f"dataset shape {base.input_shape}")
        added.append(Example(rid, np.clip(image, 0.0, 1.0),
                             int(rec["original_label"]), origin="annotation"))
        existing.add(rid)
    if not added:
        return base
    return Dataset(base.name, base.n_classes, base.examples + added)
