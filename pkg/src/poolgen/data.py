"""Dataset loaders, a synthetic shapes generator, and geometric transforms."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Raw images in [0, 1] plus the per-channel means used for centering."""

    images: np.ndarray
    labels: np.ndarray
    channel_means: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def centered(self) -> np.ndarray:
        return subtract_mean(self.images, self.channel_means)

    def with_means(self, means) -> "Dataset":
        return Dataset(self.images, self.labels, np.asarray(means, dtype=np.float64), self.num_classes)


def channel_means(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 2, 3))


def subtract_mean(images, means) -> np.ndarray:
    return images - np.asarray(means)[None, :, None, None]


def add_mean(images, means) -> np.ndarray:
    return images + np.asarray(means)[None, :, None, None]


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DatasetError(f"{path}: payload is {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError(f"image count {len(images)} != label count {len(labels)}")
    if labels.size and labels.max() > 9:
        raise DatasetError("MNIST label byte above 9")
    x = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), channel_means(x), 10)


def load_cifar10_bin(path) -> Dataset:
    """Parse a CIFAR-10 binary batch: records of 1 label byte + R, G, B 32x32 planes."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label byte {labels.max()} > 9")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, channel_means(x), 10)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays ``(n, h, w)`` / ``(n,)`` in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def write_cifar10_bin(images: np.ndarray, labels: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# -- synthetic shapes -------------------------------------------------------

SHAPE_CLASSES = ("filled_square", "hollow_square", "diagonal_bar", "disk")
SYNTH_SIZE = 16
MAX_JITTER = 3


def shape_template(cls: int, dy: int = 0, dx: int = 0, size: int = SYNTH_SIZE) -> np.ndarray:
    """Noise-free image of class ``cls`` centred at ``(size-1)/2 + (dy, dx)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (size - 1) / 2 + dy, (size - 1) / 2 + dx
    ay, ax = np.abs(yy - cy), np.abs(xx - cx)
    if cls == 0:
        img = (ay <= 3) & (ax <= 3)
    elif cls == 1:
        img = ((ay <= 3.5) & (ax <= 3.5)) & ~((ay <= 1.5) & (ax <= 1.5))
    elif cls == 2:
        img = (np.abs((yy - cy) - (xx - cx)) <= 1.0) & (ay <= 4) & (ax <= 4)
    elif cls == 3:
        img = (yy - cy) ** 2 + (xx - cx) ** 2 <= 3.6 ** 2
    else:
        raise ValueError(f"unknown shape class {cls}")
    return img.astype(np.float64)


def synthesize_shapes(n: int, seed: int = 0, noise: float = 0.1,
                      jitter: int = MAX_JITTER) -> Dataset:
    """Balanced 4-class 1x16x16 shapes with integer position jitter and Gaussian noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPE_CLASSES))
    offsets = rng.integers(-jitter, jitter + 1, size=(n, 2))
    images = np.empty((n, 1, SYNTH_SIZE, SYNTH_SIZE))
    for i in range(n):
        images[i, 0] = shape_template(int(labels[i]), int(offsets[i, 0]), int(offsets[i, 1]))
    if noise:
        images += rng.normal(0.0, noise, images.shape)
        np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels.astype(np.int64), channel_means(images), len(SHAPE_CLASSES))


def nearest_template_classify(images: np.ndarray, jitter: int = MAX_JITTER) -> np.ndarray:
    """Brute-force classifier: closest template over all classes and offsets."""
    temps, owners = [], []
    for cls in range(len(SHAPE_CLASSES)):
        for dy in range(-jitter, jitter + 1):
            for dx in range(-jitter, jitter + 1):
                temps.append(shape_template(cls, dy, dx).ravel())
                owners.append(cls)
    temps = np.array(temps)
    flat = images.reshape(len(images), -1)
    d = ((flat[:, None, :] - temps[None]) ** 2).sum(axis=-1)
    return np.array(owners)[d.argmin(axis=1)]


# -- geometric transforms ---------------------------------------------------

@dataclass(frozen=True)
class TransformSpec:
    kind: str  # "rotate" | "translate" | "scale"
    amount: float

    def __post_init__(self):
        if self.kind not in ("rotate", "translate", "scale"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "scale" and self.amount <= 0:
            raise ValueError("scale factor must be positive")
        if self.kind == "translate" and float(self.amount) != int(self.amount):
            raise ValueError("vertical translation must be a whole number of pixels")


def bilinear_sample(images: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample every image at fractional ``(rows, cols)`` with zeros outside."""
    n, c, h, w = images.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0
    out = np.zeros((n, c) + rows.shape)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = images[:, :, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(ok, wr * wc, 0.0) * vals
    return out


def apply_transform(images, spec: TransformSpec) -> np.ndarray:
    """Rotate (degrees, about the centre), shift vertically (pixels, +down),
    or scale (factor, about the centre); uncovered pixels become 0."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if spec.kind == "translate":
        k = int(spec.amount)
        out = np.zeros_like(images)
        if abs(k) >= h:
            return out
        if k >= 0:
            out[:, :, k:] = images[:, :, :h - k]
        else:
            out[:, :, :h + k] = images[:, :, -k:]
        return out
    if (spec.kind == "rotate" and spec.amount == 0) or (spec.kind == "scale" and spec.amount == 1):
        return images.copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = yy - cy, xx - cx
    if spec.kind == "rotate":
        t = math.radians(spec.amount)
        # inverse map: output pixel samples the input rotated back by -t
        src_y = cy + math.cos(t) * dy - math.sin(t) * dx
        src_x = cx + math.sin(t) * dy + math.cos(t) * dx
    else:
        src_y = cy + dy / spec.amount
        src_x = cx + dx / spec.amount
    return bilinear_sample(images, src_y, src_x)


def standard_sweep_grid() -> list[TransformSpec]:
    """Rotation 0-40 deg by 5, vertical shift 0-8 px by 1, scale 0.6-1.4 by 0.1."""
    grid = [TransformSpec("rotate", float(a)) for a in range(0, 45, 5)]
    grid += [TransformSpec("translate", float(k)) for k in range(0, 9)]
    grid += [TransformSpec("scale", round(0.6 + 0.1 * k, 1)) for k in range(9)]
    return grid


def invariance_sweep(net, dataset: Dataset, specs, batch_size: int = 256) -> list[tuple[TransformSpec, float]]:
    """Test accuracy on transformed copies of ``dataset``, in sweep order.

    Transforms act on raw images; the dataset's channel means are subtracted after.
    """
    if tuple(dataset.images.shape[1:]) != tuple(net.input_shape):
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not fit network input "
                         f"{net.input_shape}")
    if dataset.num_classes != net.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, network {net.num_classes}")
    rows = []
    for spec in specs:
        x = subtract_mean(apply_transform(dataset.images, spec), dataset.channel_means)
        rows.append((spec, net.accuracy(x, dataset.labels, batch_size)))
    return rows
