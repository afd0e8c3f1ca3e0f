"""Dataset ingestion: IDX image/label files, seeded synthetic blobs, CSV
tables, the small scikit-learn digits set, and pre-binned event frames.

Every loader returns ``(images, labels)`` with images shaped [N, C, H, W]
(float32 in [0, 1] for pixel data) and integer labels, or a five-dimensional
[N, T, C, H, W] tensor for per-timestep event frames.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetSpec",
    "load_idx",
    "load_idx_pair",
    "synthetic_blobs",
    "load_csv",
    "load_digits_split",
    "load_event_frames",
    "load_dataset",
]

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class DatasetSpec:
    """What to load and how.

    ``kind`` is one of ``mnist-idx``, ``csv``, ``synthetic``, ``digits`` or
    ``event-frames``. Path fields are interpreted per kind; ``normalize``
    holds (mean, std) applied after scaling pixels to [0, 1].
    """

    kind: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    num_classes: int = 2
    input_hw: tuple[int, int] = (16, 16)
    normalize: tuple[float, float] = (0.0, 1.0)
    samples: int = 256  # synthetic only: per split
    frames: int = 0  # event-frames only: expected frames per sample (T)

    def __post_init__(self) -> None:
        kinds = ("mnist-idx", "csv", "synthetic", "digits", "event-frames")
        if self.kind not in kinds:
            raise ValueError(f"dataset kind must be one of {kinds}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        mean, std = self.normalize
        if std <= 0:
            raise ValueError(f"normalization std must be > 0, got {std}")


def _open_maybe_gzip(path: str | Path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file (plain or gzipped) bit-exactly.

    Big-endian magic 0x00000803 marks image tensors (ubyte, [N, H, W]) and
    0x00000801 marks label vectors (ubyte, [N]). Anything else is rejected.
    """
    with _open_maybe_gzip(path) as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
        if magic == IDX_MAGIC_IMAGES:
            n, h, w = struct.unpack(">III", fh.read(12))
            raw = fh.read(n * h * w)
            if len(raw) != n * h * w:
                raise ValueError(f"{path}: truncated image payload")
            return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
        if magic == IDX_MAGIC_LABELS:
            (n,) = struct.unpack(">I", fh.read(4))
            raw = fh.read(n)
            if len(raw) != n:
                raise ValueError(f"{path}: truncated label payload")
            return np.frombuffer(raw, dtype=np.uint8).copy()
        raise ValueError(f"{path}: unknown IDX magic 0x{magic:08x}")


def load_idx_pair(images_path: str | Path, labels_path: str | Path,
                  normalize: tuple[float, float] = (0.0, 1.0)):
    """Load an (images, labels) IDX pair; pixels scaled to [0,1] then normalized."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path} is not a label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    mean, std = normalize
    x = images.astype(np.float32)[:, None] / np.float32(255.0)
    x = (x - np.float32(mean)) / np.float32(std)
    return x, labels.astype(np.int64)


def synthetic_blobs(n: int, num_classes: int, hw: tuple[int, int], seed: int,
                    spread: float = 0.12):
    """Seeded Gaussian-blob images: class k scatters k+1 bright blobs.

    The class is coded by blob count (total image mass), not position, so a
    translation-invariant classifier (conv + global pooling) can solve it —
    it is linearly separable from mean intensity alone.
    """
    if n < num_classes:
        raise ValueError(f"need at least one sample per class ({num_classes}), got {n}")
    h, w = hw
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, 1, h, w), dtype=np.float32)
    sigma = spread * min(h, w)
    for i, k in enumerate(labels):
        img = 0.05 * rng.standard_normal((h, w))
        for _ in range(k + 1):
            cy = h * (0.15 + 0.7 * rng.random())
            cx = w * (0.15 + 0.7 * rng.random())
            img = img + np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        images[i, 0] = img
    return images.astype(np.float32), labels.astype(np.int64)


def load_csv(path: str | Path, hw: tuple[int, int]):
    """Flat CSV: one row per sample, label in the first column, pixels after."""
    h, w = hw
    rows = []
    labels = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            labels.append(int(row[0]))
            pix = np.array(row[1:], dtype=np.float32)
            if pix.size != h * w:
                raise ValueError(f"{path}: row has {pix.size} pixels, expected {h * w}")
            rows.append(pix.reshape(1, h, w))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.stack(rows), np.array(labels, dtype=np.int64)


def load_digits_split(seed: int = 0, test_fraction: float = 0.25,
                      hw: tuple[int, int] = (8, 8)):
    """Deterministic train/test split of the bundled 8x8 digits set.

    Images are rescaled to [0, 1] and optionally resized (nearest neighbor)
    to ``hw``. Returns (x_train, y_train, x_test, y_test).
    """
    from sklearn.datasets import load_digits

    from .tensor import resize_nearest

    bunch = load_digits()
    x = (bunch.images / 16.0).astype(np.float32)[:, None]
    y = bunch.target.astype(np.int64)
    if hw != (8, 8):
        x = resize_nearest(x, *hw)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_test = int(len(x) * test_fraction)
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def load_event_frames(path: str | Path):
    """Pre-binned event frames from a checkpoint container.

    The container must hold ``frames`` [N, T, C, H, W] and ``labels`` [N]
    (labels stored as float, cast back to int).
    """
    from .checkpoint import load_arrays

    arrays = load_arrays(path)
    if "frames" not in arrays or "labels" not in arrays:
        raise ValueError(f"{path}: event-frame container needs 'frames' and 'labels'")
    frames = arrays["frames"]
    labels = arrays["labels"]
    if frames.ndim != 5:
        raise ValueError(f"{path}: frames must be [N, T, C, H, W], got shape {frames.shape}")
    if labels.shape[0] != frames.shape[0]:
        raise ValueError(f"{path}: {frames.shape[0]} frame stacks vs {labels.shape[0]} labels")
    return frames.astype(np.float32), np.round(labels).astype(np.int64).ravel()


def load_dataset(spec: DatasetSpec, seed: int = 0):
    """Materialize (x_train, y_train, x_test, y_test) per the spec.

    The spec's (mean, std) normalization applies to every kind; the IDX
    loader additionally scales raw pixels to [0, 1] first.
    """
    x_tr, y_tr, x_te, y_te = _load_raw(spec, seed)
    mean, std = spec.normalize
    if (mean, std) != (0.0, 1.0) and spec.kind != "mnist-idx":  # idx path normalizes itself
        x_tr = (x_tr - np.float32(mean)) / np.float32(std)
        x_te = (x_te - np.float32(mean)) / np.float32(std)
    return x_tr, y_tr, x_te, y_te


def _load_raw(spec: DatasetSpec, seed: int):
    if spec.kind == "synthetic":
        x_tr, y_tr = synthetic_blobs(spec.samples, spec.num_classes, spec.input_hw, seed)
        x_te, y_te = synthetic_blobs(spec.samples // 2 or 1, spec.num_classes,
                                     spec.input_hw, seed + 1)
        return x_tr, y_tr, x_te, y_te
    if spec.kind == "digits":
        return load_digits_split(seed=seed, hw=spec.input_hw)
    if spec.kind == "mnist-idx":
        x_tr, y_tr = load_idx_pair(spec.train_images, spec.train_labels, spec.normalize)
        x_te, y_te = load_idx_pair(spec.test_images, spec.test_labels, spec.normalize)
        return x_tr, y_tr, x_te, y_te
    if spec.kind == "csv":
        x_tr, y_tr = load_csv(spec.train_images, spec.input_hw)
        x_te, y_te = load_csv(spec.test_images, spec.input_hw)
        return x_tr, y_tr, x_te, y_te
    if spec.kind == "event-frames":
        x_tr, y_tr = load_event_frames(spec.train_images)
        x_te, y_te = load_event_frames(spec.test_images)
        if spec.frames and x_tr.shape[1] != spec.frames:
            raise ValueError(
                f"event frames per sample {x_tr.shape[1]} != configured timesteps {spec.frames}"
            )
        return x_tr, y_tr, x_te, y_te
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def _class_bounds_check(labels: np.ndarray, num_classes: int) -> None:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels outside [0, {num_classes}): min {labels.min()}, max {labels.max()}"
        )
