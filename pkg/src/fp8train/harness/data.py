"""Toy datasets, an IDX reader and the CSV feature format.

CSV feature format: one sample per line, comma-separated features followed
by the label as the last column. A first line that does not parse as
numbers is treated as a header and skipped. Classification labels must be
non-negative integers.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "make_blobs",
    "make_rings",
    "make_bars",
    "make_linear",
    "read_idx",
    "load_idx_dataset",
    "read_csv_dataset",
    "split",
    "GENERATORS",
]


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    name: str = "dataset"

    def __post_init__(self) -> None:
        if len(self.x_train) == 0:
            raise ValueError("training set is empty")
        if len(self.x_train) != len(self.y_train) or len(self.x_val) != len(self.y_val):
            raise ValueError("feature/label length mismatch")


def split(x, y, val_fraction: float = 0.25, seed: int = 0, name: str = "dataset") -> Dataset:
    idx = np.random.default_rng(seed).permutation(len(x))
    n_val = int(round(len(x) * val_fraction))
    va, tr = idx[:n_val], idx[n_val:]
    return Dataset(x[tr], y[tr], x[va], y[va], name)


def make_blobs(n: int = 768, seed: int = 0, sep: float = 1.5, noise: float = 1.0, dim: int = 2) -> Dataset:
    """Two Gaussian classes with means at ``+-sep/2`` along a random unit direction."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, dim)) * noise + np.outer(np.where(y == 1, 0.5, -0.5) * sep, u)
    return split(x.astype(np.float32), y.astype(np.int64), seed=seed, name="blobs")


def make_rings(n: int = 768, seed: int = 0, noise: float = 0.15) -> Dataset:
    """Inner disc (class 0) vs. surrounding annulus (class 1)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    r = np.where(y == 1, 2.0, 1.0) + rng.standard_normal(n) * noise
    t = rng.uniform(0, 2 * np.pi, n)
    x = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    return split(x.astype(np.float32), y.astype(np.int64), seed=seed, name="rings")


def make_bars(n: int = 512, seed: int = 0, size: int = 8, noise: float = 0.3) -> Dataset:
    """``[N,1,size,size]`` images holding one horizontal (0) or vertical (1) bar."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    pos = rng.integers(1, size - 1, n)
    x = rng.standard_normal((n, 1, size, size)) * noise
    for i in range(n):
        if y[i] == 0:
            x[i, 0, pos[i], :] += 1.0
        else:
            x[i, 0, :, pos[i]] += 1.0
    return split(x.astype(np.float32), y.astype(np.int64), seed=seed, name="bars")


def make_linear(n: int = 256, seed: int = 0, dim: int = 4, noise: float = 0.1) -> Dataset:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dim)
    x = rng.standard_normal((n, dim))
    y = x @ w + 0.5 + noise * rng.standard_normal(n)
    return split(x.astype(np.float32), y.astype(np.float32)[:, None], seed=seed, name="linear")


GENERATORS = {"blobs": make_blobs, "rings": make_rings, "bars": make_bars, "linear": make_linear}

_IDX_TYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX element type {code:#x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = np.dtype(_IDX_TYPES[code])
    off = 4 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - off != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dt, count, off).reshape(dims)


def load_idx_dataset(images, labels, seed: int = 0, val_fraction: float = 0.25) -> Dataset:
    x = read_idx(images).astype(np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.max() > 1.0:
        x = x / 255.0
    y = read_idx(labels).astype(np.int64)
    return split(x, y, val_fraction, seed, name=Path(images).stem)


def read_csv_dataset(path, seed: int = 0, val_fraction: float = 0.25, regression: bool = False) -> Dataset:
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if lines:
        try:
            [float(v) for v in lines[0].split(",")]
        except ValueError:
            lines = lines[1:]
    if not lines:
        raise ValueError(f"{path}: no samples")
    try:
        arr = np.array([[float(v) for v in l.split(",")] for l in lines], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed CSV row ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    x = arr[:, :-1].astype(np.float32)
    if regression:
        y = arr[:, -1:].astype(np.float32)
    else:
        if np.any(arr[:, -1] < 0) or np.any(arr[:, -1] != np.round(arr[:, -1])):
            raise ValueError(f"{path}: labels must be non-negative integers")
        y = arr[:, -1].astype(np.int64)
    return split(x, y, val_fraction, seed, name=Path(path).stem)

