"""Synthetic tasks: Gaussian-mixture classification and Voronoi grid segmentation.

All inputs use the (n, C, W, H) layout; classification is the 1x1 grid case,
so every loss sums over cells the same way.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_rng

MAGIC = b"OISD"
FORMAT_VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray       # (n, C, W, H) float64
    y: np.ndarray       # (n, W, H) int64 labels in [0, K)
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or self.y.ndim != 3:
            raise ValueError(f"bad dataset shapes x{self.x.shape} y{self.y.shape}")
        if len(self.x) != len(self.y) or len(self.x) == 0:
            raise ValueError("dataset must be nonempty with one label grid per sample")
        if self.x.shape[2:] != self.y.shape[1:]:
            raise ValueError("input grid and label grid differ")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError("labels outside [0, K)")

    def __len__(self):
        return len(self.y)

    @property
    def grid(self) -> tuple:
        return self.y.shape[1:]

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y.ravel(), minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def sample_labels(self) -> np.ndarray:
        """Majority label per sample (the label itself for classification)."""
        flat = self.y.reshape(len(self), -1)
        return np.array([np.bincount(r, minlength=self.num_classes).argmax() for r in flat])

    def one_hot(self) -> np.ndarray:
        """(n, K, W, H) one-hot labels."""
        return np.moveaxis(np.eye(self.num_classes)[self.y], -1, 1)


def gen_classification(K: int, dims: int, n: int, separation: float = 3.0, seed: int = 0) -> Dataset:
    if n < K:
        raise ValueError(f"need n >= K, got n={n}, K={K}")
    rng = derive_rng(seed, "data", 0)
    if dims >= K:
        means = np.zeros((K, dims))
        means[np.arange(K), np.arange(K)] = 1.0
    else:
        means = rng.standard_normal((K, dims))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation
    labels = np.arange(n) % K
    rng.shuffle(labels)
    x = means[labels] + rng.standard_normal((n, dims))
    return Dataset(x[:, :, None, None], labels[:, None, None], K)


def gen_gridseg(K: int, W: int, H: int, n: int, seed: int = 0, channels: int | None = None,
                separation: float = 2.0, noise: float = 1.0) -> Dataset:
    """Noisy K-region Voronoi grids with per-cell labels.

    Each sample places K sites uniformly on the grid, site k carrying class k;
    a cell is labelled by its nearest site.  Cell features are a class
    signature scaled by ``separation`` plus Gaussian noise.
    """
    if W * H < K:
        raise ValueError(f"grid {W}x{H} smaller than K={K}")
    channels = channels or max(K, 2)
    rng = derive_rng(seed, "data", 1)
    signature = rng.standard_normal((K, channels))
    signature /= np.linalg.norm(signature, axis=1, keepdims=True)
    gw, gh = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    cells = np.stack([gw.ravel(), gh.ravel()], axis=1).astype(np.float64)
    ys = np.empty((n, W, H), dtype=np.int64)
    for i in range(n):
        site_cells = rng.choice(W * H, size=K, replace=False)
        sites = cells[site_cells] + rng.uniform(-0.25, 0.25, size=(K, 2))
        d = ((cells[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
        lab = d.argmin(axis=1)
        # every site owns at least its own cell
        lab[site_cells] = np.arange(K)
        ys[i] = lab.reshape(W, H)
    xs = separation * signature[ys]                       # (n, W, H, C)
    xs = np.moveaxis(xs, -1, 1) + noise * rng.standard_normal((n, channels, W, H))
    return Dataset(xs, ys, K)


def train_test_split(data: Dataset, test_fraction: float = 0.25, seed: int = 0):
    n = len(data)
    n_test = int(round(n * test_fraction))
    if not 0 < n_test < n:
        raise ValueError("split leaves an empty side")
    perm = derive_rng(seed, "split").permutation(n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


# length-prefixed container -------------------------------------------------
# layout: MAGIC(4) | version u8 | K u32 | n u32 | C u32 | W u32 | H u32 |
#         x float64[n*C*W*H] | y int64[n*W*H]   (all little-endian)
_HEADER = struct.Struct("<4sBIIIII")


def dump(data: Dataset, path) -> None:
    n, C, W, H = data.x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, data.num_classes, n, C, W, H))
        fh.write(data.x.astype("<f8").tobytes())
        fh.write(data.y.astype("<i8").tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dataset file")
    magic, version, K, n, C, W, H = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    nx, ny = n * C * W * H, n * W * H
    expected = _HEADER.size + 8 * (nx + ny)
    if len(raw) != expected:
        raise ValueError(f"dataset file has {len(raw)} bytes, expected {expected}")
    off = _HEADER.size
    x = np.frombuffer(raw, dtype="<f8", count=nx, offset=off).reshape(n, C, W, H)
    y = np.frombuffer(raw, dtype="<i8", count=ny, offset=off + 8 * nx).reshape(n, W, H)
    return Dataset(x.astype(np.float64), y.astype(np.int64), K)
