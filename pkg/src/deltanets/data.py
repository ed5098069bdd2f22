"""Datasets: IDX ingestion, procedurally rendered pattern tasks, class splits."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .init import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_IDX_ITEMS = 1 << 28


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    stats: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"{self.name}: labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise DataError(f"{what}: truncated at byte 0 (need 4-byte magic)")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise DataError(f"{what}: bad magic 0x{got:08x} at byte 0, expected 0x{magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise DataError(f"{what}: truncated header at byte {len(buf)} (need {4 + 4 * ndim})")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if d > MAX_IDX_ITEMS or total > MAX_IDX_ITEMS * 4096:
            raise DataError(f"{what}: dimension {d} at byte {4 + 4 * i} overflows the size limit")
    expected = 4 + 4 * ndim + total
    if len(buf) < expected:
        raise DataError(f"{what}: truncated payload at byte {len(buf)}, expected {expected} bytes")
    if len(buf) > expected:
        raise DataError(f"{what}: {len(buf) - expected} trailing bytes after offset {expected}")
    return dims


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, h, w = _read_header(buf, IDX_IMAGES_MAGIC, 3, str(path))
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, IDX_LABELS_MAGIC, 1, str(path))
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_idx(images_path, labels_path, name: str | None = None, split: str = "train",
             class_count: int | None = None) -> Dataset:
    """Grayscale IDX pair -> Dataset with pixels scaled to [0, 1] and C = 1."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise DataError(f"{len(raw)} images but {len(labels)} labels")
    images = (raw.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    classes = class_count if class_count is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(name or Path(images_path).stem, split, images, labels, classes)


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-channel standardization with statistics from ``train`` only."""
    mean = train.images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = train.images.std(axis=(0, 2, 3)).astype(np.float32)
    std = np.where(std > 1e-6, std, 1.0).astype(np.float32)

    def apply(d: Dataset) -> Dataset:
        x = (d.images - mean[None, :, None, None]) / std[None, :, None, None]
        return replace(d, images=x.astype(np.float32), stats=(mean, std))

    return [apply(train)] + [apply(d) for d in others]


def split_classes(ds: Dataset, class_subsets) -> list[Dataset]:
    """One dataset per subset, labels remapped to [0, len(subset)) in sorted subset order."""
    subsets = [sorted(set(s)) for s in class_subsets]
    seen: set[int] = set()
    for s in subsets:
        if seen & set(s):
            raise DataError(f"class subsets overlap on {sorted(seen & set(s))}")
        if any(c < 0 or c >= ds.class_count for c in s):
            raise DataError(f"class subset {s} outside [0, {ds.class_count})")
        seen |= set(s)
    out = []
    for k, s in enumerate(subsets):
        lut = np.full(ds.class_count, -1, dtype=np.int64)
        lut[s] = np.arange(len(s))
        mask = lut[ds.labels] >= 0
        out.append(Dataset(f"{ds.name}[{k}]", ds.split, ds.images[mask], lut[ds.labels[mask]], len(s), ds.stats))
    return out


# -- procedurally rendered pattern tasks ------------------------------------------------------

def _pattern_pool() -> list[tuple[str, tuple]]:
    pool = []
    for angle in range(0, 180, 30):
        for freq in (1.5, 3.0):
            pool.append(("bars", (math.radians(angle), freq)))
    for radius in (0.3, 0.5, 0.7):
        for width in (0.08, 0.2):
            pool.append(("rings", (radius, width)))
    for count in (1, 2, 3):
        for spread in (0.35, 0.6):
            pool.append(("blobs", (count, spread)))
    for cell in (0.25, 0.4, 0.6):
        for rot in (0.0, math.pi / 4):
            pool.append(("checkers", (cell, rot)))
    return pool


PATTERN_POOL = _pattern_pool()


def render_pattern(kind: str, params: tuple, size: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered sample of a pattern class, values in [0, 1] before noise."""
    ax = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, 2)
    if kind == "bars":
        angle, freq = params
        a = angle + rng.normal(0.0, math.radians(10))
        f = freq * (1.0 + rng.normal(0.0, 0.12))
        img = 0.5 + 0.5 * np.sin(2 * math.pi * f * (xx * math.cos(a) + yy * math.sin(a)) / 2 + rng.uniform(0, 2 * math.pi))
    elif kind == "rings":
        radius, width = params
        r = np.hypot(xx - cx, yy - cy)
        r0 = radius * (1.0 + rng.normal(0.0, 0.1))
        img = np.exp(-(((r - r0) / width) ** 2))
    elif kind == "blobs":
        count, spread = params
        rot = rng.uniform(0, 2 * math.pi)
        img = np.zeros_like(xx)
        for j in range(count):
            t = rot + 2 * math.pi * j / count
            s = spread if count > 1 else 0.0
            bx, by = cx + s * math.cos(t), cy + s * math.sin(t)
            sig = 0.22 * (1.0 + rng.normal(0.0, 0.15))
            img = np.maximum(img, np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sig ** 2)))
    elif kind == "checkers":
        cell, rot = params
        a = rot + rng.normal(0.0, math.radians(8))
        c = cell * (1.0 + rng.normal(0.0, 0.1))
        u = (xx * math.cos(a) + yy * math.sin(a) + cx) / c
        v = (-xx * math.sin(a) + yy * math.cos(a) + cy) / c
        img = 0.5 + 0.5 * np.tanh(4 * np.sin(math.pi * u) * np.sin(math.pi * v))
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    return img


def _render_split(classes, size, per_class, noise, rng) -> tuple[np.ndarray, np.ndarray]:
    imgs, labels = [], []
    for label, (kind, params) in enumerate(classes):
        for _ in range(per_class):
            img = render_pattern(kind, params, size, rng)
            contrast = rng.uniform(0.5, 1.0)
            img = 0.5 + contrast * (img - 0.5) + rng.uniform(-0.1, 0.1)
            img = img + rng.normal(0.0, noise, img.shape)
            imgs.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
    images = np.asarray(imgs, dtype=np.float32)[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    return images[order], labels[order]


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Pixel-space nearest-centroid classifier; a detector for trivially easy tasks."""
    xtr = train.images.reshape(len(train), -1).astype(np.float64)
    xte = test.images.reshape(len(test), -1).astype(np.float64)
    cents = np.stack([xtr[train.labels == c].mean(axis=0) for c in range(train.class_count)])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())


def synth_tasks(seed: int, task_count: int, classes_per_task: int, samples_per_class: int, image_size: int,
                test_per_class: int | None = None, noise: float = 0.25, max_centroid_acc: float = 0.95,
                attempts: int = 8) -> list[tuple[Dataset, Dataset]]:
    """``task_count`` class-disjoint (train, test) pairs of rendered patterns.

    Class identities are drawn without replacement from a fixed pattern pool.
    Each task is checked with a nearest-centroid pixel classifier; a draw that
    reaches ``max_centroid_acc`` is discarded and re-rendered from the next
    sub-stream.
    """
    if min(task_count, classes_per_task, samples_per_class, image_size) <= 0:
        raise DataError("synth_tasks parameters must be positive")
    need = task_count * classes_per_task
    if need > len(PATTERN_POOL):
        raise DataError(f"{need} classes requested but the pattern pool holds {len(PATTERN_POOL)}")
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    order = make_rng(seed, 0).permutation(len(PATTERN_POOL))[:need]
    tasks = []
    for k in range(task_count):
        classes = [PATTERN_POOL[i] for i in order[k * classes_per_task:(k + 1) * classes_per_task]]
        for attempt in range(attempts):
            rng = make_rng(seed, 1, k, attempt)
            xtr, ytr = _render_split(classes, image_size, samples_per_class, noise, rng)
            xte, yte = _render_split(classes, image_size, test_per_class, noise, rng)
            train = Dataset(f"synth{seed}-task{k}", "train", xtr, ytr, classes_per_task)
            test = Dataset(f"synth{seed}-task{k}", "test", xte, yte, classes_per_task)
            if nearest_centroid_accuracy(train, test) < max_centroid_acc:
                break
        else:
            raise DataError(f"task {k}: could not render a non-trivial task in {attempts} attempts")
        tasks.append(tuple(standardize(train, test)))
    return tasks
