"""Dense 4-D tensors and pooling-window geometry.

A tensor here is a C-contiguous ``float64`` numpy array of shape
``(n, c, h, w)``.  Pooling windows are materialized as region vectors of
length ``N = region_h * region_w`` in row-major slot order; padded slots hold
``0.0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a contiguous float64 4-D array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}; need 4 dims, all >= 1")
    return shape


def zeros(shape) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def gaussian_init(shape, mean: float = 0.0, std: float = 0.5, seed: int = 0) -> np.ndarray:
    """I.i.d. N(mean, std^2) samples from a seeded PCG64 generator.

    ``std == 0`` returns the constant ``mean`` exactly.
    """
    shape = _check_shape(shape)
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(shape, float(mean), dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.normal(mean, std, size=shape)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


@dataclass(frozen=True)
class PoolGeometry:
    region_h: int
    region_w: int
    stride: int = 2
    padding: int = 0

    def __post_init__(self):
        if self.region_h < 1 or self.region_w < 1:
            raise ValueError("region dimensions must be positive")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def square(cls, size: int, stride: int = 2, padding: int = 0) -> "PoolGeometry":
        return cls(size, size, stride, padding)

    @property
    def n(self) -> int:
        """Pooled-vector length N."""
        return self.region_h * self.region_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.region_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.region_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"geometry {self} yields empty output for a {h}x{w} input"
            )
        return oh, ow


def padding_mask(in_hw: tuple[int, int], geom: PoolGeometry) -> np.ndarray:
    """Boolean ``(out_h, out_w, N)`` array, True where a slot falls in padding."""
    h, w = in_hw
    oh, ow = geom.output_hw(h, w)
    rows = np.arange(oh)[:, None] * geom.stride + np.arange(geom.region_h)[None, :] - geom.padding
    cols = np.arange(ow)[:, None] * geom.stride + np.arange(geom.region_w)[None, :] - geom.padding
    row_out = (rows < 0) | (rows >= h)
    col_out = (cols < 0) | (cols >= w)
    mask = row_out[:, None, :, None] | col_out[None, :, None, :]
    return mask.reshape(oh, ow, geom.n)


def extract_regions(x: np.ndarray, geom: PoolGeometry) -> np.ndarray:
    """Gather every pooling window into an ``(n, c, out_h, out_w, N)`` array."""
    h, w = x.shape[2:]
    oh, ow = geom.output_hw(h, w)
    p, s = geom.padding, geom.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (geom.region_h, geom.region_w), axis=(2, 3))
    win = win[:, :, : s * (oh - 1) + 1 : s, : s * (ow - 1) + 1 : s]
    return win.reshape(win.shape[:4] + (geom.n,))


def scatter_regions(grad_regions: np.ndarray, in_shape, geom: PoolGeometry) -> np.ndarray:
    """Adjoint of :func:`extract_regions`: sum slot gradients back onto the input.

    Overlapping windows accumulate in fixed slot order; gradients landing on
    padding are dropped.
    """
    return scatter_slots(np.moveaxis(grad_regions, -1, 0), in_shape, geom)


def scatter_slots(slots: np.ndarray, in_shape, geom: PoolGeometry) -> np.ndarray:
    """Like :func:`scatter_regions` but takes the slot axis first: ``(N, n, c, oh, ow)``."""
    n, c, h, w = in_shape
    oh, ow = slots.shape[3:5]
    p, s = geom.padding, geom.stride
    buf = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    k = 0
    for i in range(geom.region_h):
        for j in range(geom.region_w):
            buf[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += slots[k]
            k += 1
    if p:
        buf = buf[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(buf)


def region_iter(x, geom: PoolGeometry) -> Iterator[tuple[int, int, int, int, np.ndarray, np.ndarray]]:
    """Yield ``(n, c, out_row, out_col, region, is_padding)`` in lexicographic order."""
    x = as_tensor(x, "input")
    regions = extract_regions(x, geom)
    pad = padding_mask(x.shape[2:], geom)
    n, c, oh, ow, _ = regions.shape
    for b in range(n):
        for ch in range(c):
            for r in range(oh):
                for q in range(ow):
                    yield b, ch, r, q, regions[b, ch, r, q].copy(), pad[r, q].copy()


def seq_sum(v: np.ndarray) -> np.ndarray:
    """Sum over the last axis strictly left to right.

    numpy's pairwise ``sum`` reorders additions once the axis reaches eight
    elements; a fixed order keeps results reproducible against per-region loops.
    """
    acc = v[..., 0].copy()
    for k in range(1, v.shape[-1]):
        acc = acc + v[..., k]
    return acc


def seq_dot(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Inner product over the last axis, accumulated left to right."""
    acc = x[..., 0] * w[..., 0]
    for k in range(1, x.shape[-1]):
        acc = acc + x[..., k] * w[..., k]
    return acc


def sigmoid(z):
    """Overflow-safe logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
