"""Dataset ingestion: CIFAR-style binaries, image folders, and a synthetic generator.

Samples are stored as 8-bit channel-first images and normalized at batch time
with the manifest's per-channel constants. The synthetic generator exists so
the whole pipeline can be exercised on CPU in seconds: each class gets a
seeded template pattern, and a separation knob controls how far apart the
templates sit relative to the per-image noise.

On-disk layouts:

* ``cifar_binary`` — records of ``1 label byte + 3072 pixel bytes`` (CIFAR-10
  style; CIFAR-100 files carry a coarse label byte first, which is skipped).
  Train files are ``data_batch_*.bin`` or ``train.bin``; validation is
  ``test_batch.bin`` or ``test.bin``.
* ``image_folder`` — ``root/<split>/<class_name>/<file>`` with splits
  ``train`` and ``val``; class ids follow sorted directory names. Images are
  resized to the manifest resolution on load.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

__all__ = [
    "DatasetManifest",
    "SyntheticSpec",
    "SampleSource",
    "load_dataset",
    "generate_synthetic",
    "epoch_iterator",
    "batch_tensors",
    "substream_seed",
]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    resolution: int = 32
    seed: int = 0
    class_separation: float = 3.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.samples_per_class < 1 or self.resolution < 8:
            raise ValueError("need samples_per_class >= 1 and resolution >= 8")
        if self.class_separation < 0:
            raise ValueError("class_separation must be non-negative")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    num_classes: int
    train_count: int
    val_count: int
    resolution: int
    normalization: tuple  # ((mean_r, mean_g, mean_b), (std_r, std_g, std_b))
    source: str  # cifar_binary | image_folder | synthetic
    synthetic: Optional[SyntheticSpec] = field(default=None)

    def __post_init__(self):
        if self.source not in ("cifar_binary", "image_folder", "synthetic"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.num_classes < 2 or self.train_count <= 0 or self.val_count <= 0:
            raise ValueError("need num_classes >= 2 and positive split counts")
        if self.source == "synthetic" and self.synthetic is None:
            raise ValueError("synthetic source requires a SyntheticSpec")


class SampleSource:
    """Random-access (index -> uint8 image, label) container for one split."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, manifest: DatasetManifest):
        if images.dtype != np.uint8 or images.ndim != 4 or images.shape[1] != 3:
            raise ValueError("images must be uint8 with shape (n, 3, h, w)")
        if len(images) != len(labels):
            raise ValueError("image/label count mismatch")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= manifest.num_classes:
            raise ValueError("label outside [0, num_classes)")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int):
        return self.images[index], int(self.labels[index])


def substream_seed(seed: int, *tags) -> int:
    """Independent 32-bit seed for a named random stream.

    Keeps the data-order, augmentation, and penalty-epsilon streams decoupled,
    so consuming one never shifts another.
    """
    digest = hashlib.sha256(("|".join([str(seed), *map(str, tags)])).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def generate_synthetic(spec: SyntheticSpec) -> tuple[SampleSource, SampleSource, DatasetManifest]:
    """Deterministic class-template images: (train, val, manifest).

    Each class gets a fixed random pattern scaled by ``class_separation``;
    samples add unit pixel noise on top. Validation holds one quarter of the
    per-class train count (at least one sample per class).
    """
    rng = np.random.default_rng(substream_seed(spec.seed, "synthetic-templates"))
    shape = (3, spec.resolution, spec.resolution)
    templates = rng.standard_normal((spec.num_classes, *shape))

    val_per_class = max(spec.samples_per_class // 4, 1)

    def _materialize(count_per_class: int, tag: str) -> tuple[np.ndarray, np.ndarray]:
        sample_rng = np.random.default_rng(substream_seed(spec.seed, "synthetic", tag))
        images = np.empty((spec.num_classes * count_per_class, *shape), dtype=np.uint8)
        labels = np.empty(spec.num_classes * count_per_class, dtype=np.int64)
        i = 0
        for cls in range(spec.num_classes):
            signal = spec.class_separation * templates[cls]
            for _ in range(count_per_class):
                noise = sample_rng.standard_normal(shape)
                pixels = 128.0 + 24.0 * (signal + noise)
                images[i] = np.clip(pixels, 0, 255).astype(np.uint8)
                labels[i] = cls
                i += 1
        return images, labels

    train_x, train_y = _materialize(spec.samples_per_class, "train")
    val_x, val_y = _materialize(val_per_class, "val")

    mean = tuple(round(float(m), 6) for m in (train_x / 255.0).mean(axis=(0, 2, 3)))
    std = tuple(round(float(s), 6) for s in (train_x / 255.0).std(axis=(0, 2, 3)))
    manifest = DatasetManifest(
        name=f"synthetic{spec.num_classes}",
        num_classes=spec.num_classes,
        train_count=len(train_x),
        val_count=len(val_x),
        resolution=spec.resolution,
        normalization=(mean, std),
        source="synthetic",
        synthetic=spec,
    )
    return SampleSource(train_x, train_y, manifest), SampleSource(val_x, val_y, manifest), manifest


def load_dataset(manifest: DatasetManifest, root: Optional[Path] = None):
    """Materialize (train, val) sample sources for a manifest.

    Counts and label ranges are validated against the manifest; mismatches
    are load errors, not warnings.
    """
    if manifest.source == "synthetic":
        train, val, generated = generate_synthetic(manifest.synthetic)
        if generated.train_count != manifest.train_count or generated.val_count != manifest.val_count:
            raise ValueError(
                f"manifest counts ({manifest.train_count}/{manifest.val_count}) do not match "
                f"generated counts ({generated.train_count}/{generated.val_count})"
            )
        return train, val
    if root is None:
        raise ValueError(f"source {manifest.source!r} requires a data root")
    root = Path(root)
    if manifest.source == "cifar_binary":
        loader = _load_cifar_binary
    else:
        loader = _load_image_folder
    train, val = loader(manifest, root)
    if len(train) != manifest.train_count or len(val) != manifest.val_count:
        raise ValueError(
            f"manifest counts ({manifest.train_count}/{manifest.val_count}) do not match "
            f"files on disk ({len(train)}/{len(val)})"
        )
    return train, val


def _load_cifar_binary(manifest: DatasetManifest, root: Path):
    train_files = sorted(root.glob("data_batch_*.bin")) or [root / "train.bin"]
    val_files = [root / "test_batch.bin"]
    if not val_files[0].is_file():
        val_files = [root / "test.bin"]
    # CIFAR-100 records carry a throwaway coarse-label byte before the fine label.
    label_bytes = 2 if manifest.num_classes == 100 else 1
    splits = []
    for files in (train_files, val_files):
        images, labels = [], []
        for f in files:
            if not f.is_file():
                raise FileNotFoundError(f"missing dataset file {f}")
            raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
            record = label_bytes + 3072
            if len(raw) % record != 0:
                raise ValueError(f"{f} is not a whole number of {record}-byte records")
            raw = raw.reshape(-1, record)
            labels.append(raw[:, label_bytes - 1].astype(np.int64))
            images.append(raw[:, label_bytes:].reshape(-1, 3, 32, 32))
        splits.append((np.concatenate(images), np.concatenate(labels)))
    (train_x, train_y), (val_x, val_y) = splits
    return (
        SampleSource(train_x, train_y, manifest),
        SampleSource(val_x, val_y, manifest),
    )


def _load_image_folder(manifest: DatasetManifest, root: Path):
    from PIL import Image

    splits = []
    for split in ("train", "val"):
        split_dir = root / split
        if not split_dir.is_dir():
            raise FileNotFoundError(f"missing split directory {split_dir}")
        class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
        if len(class_dirs) > manifest.num_classes:
            raise ValueError(
                f"{len(class_dirs)} class directories exceed num_classes={manifest.num_classes}"
            )
        images, labels = [], []
        for label, class_dir in enumerate(class_dirs):
            for f in sorted(class_dir.iterdir()):
                with Image.open(f) as img:
                    img = img.convert("RGB").resize(
                        (manifest.resolution, manifest.resolution), Image.BILINEAR
                    )
                    images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
                labels.append(label)
        splits.append(
            (np.stack(images), np.asarray(labels, dtype=np.int64))
        )
    (train_x, train_y), (val_x, val_y) = splits
    return (
        SampleSource(train_x, train_y, manifest),
        SampleSource(val_x, val_y, manifest),
    )


def epoch_iterator(
    source: SampleSource, batch_size: int, seed: int, epoch: int
) -> Iterator[np.ndarray]:
    """Yield index batches in a (seed, epoch)-determined shuffled order.

    The final partial batch is kept; every index appears exactly once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng(substream_seed(seed, "data-order", epoch)).permutation(
        len(source)
    )
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def batch_tensors(
    source: SampleSource, indices: Sequence[int], normalize: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """Materialize a batch as (float images, labels); images scaled to [0, 1]
    and, when asked, normalized with the manifest's constants."""
    images = torch.from_numpy(source.images[np.asarray(indices)]).float() / 255.0
    labels = torch.from_numpy(source.labels[np.asarray(indices)])
    if normalize:
        images = normalize_images(images, source.manifest)
    return images, labels


def normalize_images(images: torch.Tensor, manifest: DatasetManifest) -> torch.Tensor:
    mean, std = manifest.normalization
    mean_t = torch.tensor(mean, dtype=images.dtype).view(1, 3, 1, 1)
    std_t = torch.tensor(std, dtype=images.dtype).view(1, 3, 1, 1)
    return (images - mean_t) / std_t
