"""Dataset loading, generation, augmentation, splitting and trigger poisoning.

Datasets hold float64 images in [0, 1], NCHW.  Everything that draws
randomness takes an explicit seed, so loaders, splits, the synthetic
generator and poisoning are all reproducible bit-for-bit.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, num_classes)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(
                f"label out of range [0, {self.num_classes}): "
                f"found {int(self.labels.min())}..{int(self.labels.max())}"
            )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            num_classes=self.num_classes,
            split=self.split if split is None else split,
        )

    def head(self, n: int, split: str | None = None) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))), split=split)


@dataclass
class UnlabeledImages:
    """A holdout that exposes images only; no label ever crosses this type."""

    images: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _open_maybe_gz(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expect_magic: int, rank: int) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        head = f.read(4 * (1 + rank))
        if len(head) < 4 * (1 + rank):
            raise DataError(f"{path}: truncated header at byte {len(head)}")
        fields = struct.unpack(f">{1 + rank}I", head)
        if fields[0] != expect_magic:
            raise DataError(
                f"{path}: bad magic 0x{fields[0]:08x} at byte 0, expected 0x{expect_magic:08x}"
            )
        dims = fields[1:]
        count = int(np.prod(dims))
        payload = f.read(count)
        if len(payload) != count:
            raise DataError(
                f"{path}: truncated payload at byte {4 * (1 + rank) + len(payload)}, "
                f"expected {count} value bytes"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    raw = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(raw) != len(labels):
        raise DataError(
            f"{images_path} has {len(raw)} images but {labels_path} has {len(labels)} labels"
        )
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes, split=split)


def save_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write single-channel images and labels as (optionally gzipped) IDX files."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataError(f"IDX export supports single-channel images, got {c} channels")
    pixels = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    for path, magic, dims, payload in (
        (Path(images_path), IDX_IMAGES_MAGIC, (n, h, w), pixels),
        (Path(labels_path), IDX_LABELS_MAGIC, (n,), dataset.labels.astype(np.uint8)),
    ):
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = struct.pack(f">{1 + len(dims)}I", magic, *dims) + payload.tobytes()
        if str(path).endswith(".gz"):
            # fixed mtime so identical datasets produce identical files
            with open(path, "wb") as f:
                with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                    gz.write(blob)
        else:
            path.write_bytes(blob)


def load_idx_dir(directory, num_classes: int = 10) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the conventional train/test IDX file pairs from one directory."""
    directory = Path(directory)

    def find(stem: str) -> Path:
        for suffix in ("", ".gz"):
            p = directory / f"{stem}{suffix}"
            if p.exists():
                return p
        raise DataError(f"missing IDX file {directory / stem}[.gz]")

    train = load_idx(
        find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
        num_classes=num_classes, split="train",
    )
    test = load_idx(
        find("test-images-idx3-ubyte"), find("test-labels-idx1-ubyte"),
        num_classes=num_classes, split="test",
    )
    return train, test


SHAPE_NAMES = ("circle", "square", "cross", "triangle")
SHAPE_SIZE = 16


def _render_shape(kind: int, cx: float, cy: float, r: float, intensity: float) -> np.ndarray:
    """Draw one anti-aliased shape on a 16x16 canvas via 4x supersampling."""
    ss = 4
    n = SHAPE_SIZE * ss
    ys, xs = np.mgrid[0:n, 0:n]
    x = (xs + 0.5) / ss
    y = (ys + 0.5) / ss
    if kind == 0:  # circle
        mask = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    elif kind == 1:  # square
        mask = (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
    elif kind == 2:  # cross
        arm = max(r / 3.0, 0.6)
        mask = ((np.abs(x - cx) <= arm) & (np.abs(y - cy) <= r)) | (
            (np.abs(y - cy) <= arm) & (np.abs(x - cx) <= r)
        )
    elif kind == 3:  # triangle, apex up
        half = r
        inside_y = (y >= cy - r) & (y <= cy + r)
        frac = np.clip((y - (cy - r)) / (2 * r), 0.0, 1.0)
        mask = inside_y & (np.abs(x - cx) <= half * frac)
    else:
        raise ConfigurationError(f"no shape kind {kind}")
    img = mask.reshape(SHAPE_SIZE, ss, SHAPE_SIZE, ss).mean(axis=(1, 3))
    return img * intensity


def synthetic_shapes(n: int, num_classes: int, seed: int) -> LabeledDataset:
    """Deterministic 1x16x16 shape corpus, class-balanced within one sample."""
    if not (2 <= num_classes <= len(SHAPE_NAMES)):
        raise ConfigurationError(
            f"synthetic shapes supports 2..{len(SHAPE_NAMES)} classes, got {num_classes}"
        )
    rng = np.random.default_rng(seed)
    counts = [n // num_classes + (1 if i < n % num_classes else 0) for i in range(num_classes)]
    labels = np.concatenate([np.full(c, i, dtype=np.int64) for i, c in enumerate(counts)])
    order = rng.permutation(n)
    labels = labels[order]
    images = np.zeros((n, 1, SHAPE_SIZE, SHAPE_SIZE))
    for i, lab in enumerate(labels):
        cx = 8.0 + rng.uniform(-1.5, 1.5)
        cy = 8.0 + rng.uniform(-1.5, 1.5)
        r = rng.uniform(3.5, 5.8)
        intensity = rng.uniform(0.85, 1.0)
        images[i, 0] = _render_shape(int(lab), cx, cy, r, intensity)
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes, split="train")


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4, hflip: bool = False) -> np.ndarray:
    """Pad with zeros and randomly crop back to the original size; optional
    horizontal flips with p = 0.5.  Training-time only."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        oy, ox = offs[i]
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    if hflip:
        flips = rng.random(n) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    return out


def split_holdout(dataset: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, UnlabeledImages]:
    """Carve an unlabeled holdout off a training set; the two are disjoint."""
    if not (0.0 < fraction <= 0.5):
        raise ConfigurationError(f"holdout fraction {fraction} outside (0, 0.5]")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    k = int(round(fraction * n))
    perm = rng.permutation(n)
    hold, keep = perm[:k], np.sort(perm[k:])
    train = dataset.subset(keep, split="train")
    return train, UnlabeledImages(images=dataset.images[np.sort(hold)].copy())


@dataclass(frozen=True)
class TriggerSpec:
    """A white square stamped at the bottom-right corner."""

    patch_size: int = 3
    target: int = 0
    rate: float = 0.05
    value: float = 1.0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigurationError(f"patch size must be positive, got {self.patch_size}")
        # rate 0 is allowed so an unpoisoned control can share the spec
        if not (0.0 <= self.rate < 1.0):
            raise ConfigurationError(f"poison rate {self.rate} outside [0, 1)")


def apply_trigger(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Stamp the trigger patch; idempotent, labels untouched."""
    p = trigger.patch_size
    h, w = images.shape[-2:]
    if p > h or p > w:
        raise ConfigurationError(f"trigger patch {p} exceeds image size {h}x{w}")
    out = images.copy()
    out[..., h - p :, w - p :] = trigger.value
    return out


def poison(dataset: LabeledDataset, trigger: TriggerSpec, seed: int) -> LabeledDataset:
    """Stamp and relabel a seeded round(rate*n) subset of a training set."""
    if dataset.split != "train":
        raise ConfigurationError(f"poisoning is for the train split, got {dataset.split!r}")
    if trigger.rate <= 0.0:
        raise ConfigurationError("poisoning needs a positive rate")
    if not (0 <= trigger.target < dataset.num_classes):
        raise ConfigurationError(
            f"trigger target {trigger.target} outside [0, {dataset.num_classes})"
        )
    rng = np.random.default_rng(seed)
    n = len(dataset)
    k = int(round(trigger.rate * n))
    picked = rng.permutation(n)[:k]
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[picked] = apply_trigger(images[picked], trigger)
    labels[picked] = trigger.target
    return LabeledDataset(images=images, labels=labels, num_classes=dataset.num_classes, split="train")
