"""Synthetic image data, Dirichlet label-skew partitioning, trigger stamping."""
from __future__ import annotations

from dataclasses import dataclass
from math import floor

import numpy as np

from .fileio import atomic_write


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split)


def class_templates(classes, shape, rng):
    """One smooth random template per class.

    Templates are coarse 4x4-cell random grids upsampled to the image size,
    then shuffled with a per-pixel jitter, so every class differs across the
    whole image rather than in one region.
    """
    h, w, c = shape
    cells = rng.uniform(0.0, 1.0, size=(classes, 4, 4, c))
    rows = np.minimum(np.arange(h) * 4 // h, 3)
    cols = np.minimum(np.arange(w) * 4 // w, 3)
    coarse = cells[:, rows][:, :, cols]
    fine = rng.uniform(0.0, 1.0, size=(classes, h, w, c))
    return np.clip(0.5 * coarse + 0.5 * fine, 0.0, 1.0)


def generate_synthetic(classes, per_class, shape, seed, noise=0.15, test_per_class=None):
    h, w, c = (int(d) for d in shape)
    if h < 8 or w < 8:
        raise ValueError("synthetic images need H, W >= 8")
    if classes < 2 or per_class < 1 or c < 1:
        raise ValueError("need classes >= 2, per_class >= 1, C >= 1")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if test_per_class is None:
        test_per_class = max(1, per_class // 2)
    rng = np.random.default_rng([seed, 0xDA7A])
    templates = class_templates(classes, (h, w, c), rng)

    def draw(n_per, split):
        labels = np.repeat(np.arange(classes), n_per)
        images = templates[labels] + noise * rng.standard_normal((len(labels), h, w, c))
        return Dataset(np.clip(images, 0.0, 1.0), labels, classes, split)

    return draw(per_class, "train"), draw(test_per_class, "test")


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float
    clients: int
    seed: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be > 0")
        if self.clients < 1:
            raise ValueError("need at least one client")


def dirichlet_partition(ds, cfg, max_attempts=100):
    """Split each class across clients with Dirichlet(alpha) proportions.

    Redraws the whole partition until no client is empty.
    """
    if cfg.clients > len(ds):
        raise ValueError(f"cannot give {cfg.clients} clients at least one of {len(ds)} samples")
    rng = np.random.default_rng([cfg.seed, 0x9A27])
    by_class = [np.flatnonzero(ds.labels == k) for k in range(ds.classes)]
    for _ in range(max_attempts):
        shards = [[] for _ in range(cfg.clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(cfg.clients, cfg.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.append(part)
        parts = [np.sort(np.concatenate(s)) if s else np.zeros(0, np.int64) for s in shards]
        if all(p.size for p in parts):
            return parts
    raise RuntimeError(f"could not draw a partition with no empty client in {max_attempts} attempts "
                       f"(alpha={cfg.alpha}, clients={cfg.clients}, N={len(ds)})")


def default_patch_size(side):
    """5x5 on 32x32 and 10x10 on 64x64, scaled linearly."""
    return max(1, floor(5 * side / 32 + 0.5))


@dataclass
class Trigger:
    pattern: np.ndarray  # (H, W, C) in [0, 1]
    mask: np.ndarray  # (H, W, C) binary
    target: int

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.pattern.shape != self.mask.shape or self.pattern.ndim != 3:
            raise ValueError(f"pattern {self.pattern.shape} and mask {self.mask.shape} must be equal (H, W, C)")
        if not np.all(np.isfinite(self.pattern)):
            raise ValueError("trigger pattern contains NaN or Inf")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("trigger mask must be binary")
        self.target = int(self.target)
        ph, pw = self.patch_size
        expected = np.zeros_like(self.mask)
        expected[:ph, :pw, :] = 1.0
        if not np.array_equal(self.mask, expected):
            raise ValueError("trigger mask must be a contiguous top-left patch")

    @property
    def patch_size(self):
        rows = np.flatnonzero(self.mask.any(axis=(1, 2)))
        cols = np.flatnonzero(self.mask.any(axis=(0, 2)))
        return (int(rows[-1]) + 1 if rows.size else 0, int(cols[-1]) + 1 if cols.size else 0)

    @classmethod
    def top_left(cls, shape, target, patch=None, fill=0.5):
        h, w, c = shape
        if patch is None:
            patch = default_patch_size(min(h, w))
        ph, pw = (patch, patch) if np.isscalar(patch) else patch
        if ph > h or pw > w:
            raise ValueError(f"patch {ph}x{pw} does not fit a {h}x{w} image")
        mask = np.zeros(shape)
        mask[:ph, :pw, :] = 1.0
        return cls(fill * mask, mask, target)

    def copy(self):
        return Trigger(self.pattern.copy(), self.mask.copy(), self.target)

    def check_classes(self, classes):
        if not 0 <= self.target < classes:
            raise ValueError(f"trigger target {self.target} is not a class in [0, {classes})")


def apply_trigger(x, trig):
    """(1 - M) * x + M * pattern for one image or a batch; never mutates x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != trig.pattern.shape:
        raise ValueError(f"image shape {x.shape[-3:]} does not match trigger {trig.pattern.shape}")
    return (1.0 - trig.mask) * x + trig.mask * trig.pattern


def poison_dataset(ds, trig, fraction, seed):
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("poison fraction must be in [0, 1]")
    n = len(ds)
    count = floor(fraction * n)
    rng = np.random.default_rng([seed, 0x9015])
    chosen = rng.choice(n, size=count, replace=False) if count else np.zeros(0, np.int64)
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[chosen] = apply_trigger(images[chosen], trig)
    labels[chosen] = trig.target
    return Dataset(images, labels, ds.classes, ds.split)


DATA_MAGIC = "FFDATA1"
TRIG_MAGIC = "FFTRIG1"


def save_dataset(ds, path):
    n, h, w, c = ds.images.shape
    header = f"{DATA_MAGIC} {n} {h} {w} {c} {ds.classes}\n".encode()
    atomic_write(path, header + ds.labels.astype("<i4").tobytes() + ds.images.astype("<f8").tobytes())


def load_dataset(path, split="test"):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        body = fh.read()
    if len(header) != 6 or header[0] != DATA_MAGIC:
        raise ValueError(f"{path}: not a {DATA_MAGIC} file")
    n, h, w, c, classes = (int(v) for v in header[1:])
    if len(body) != 4 * n + 8 * n * h * w * c:
        raise ValueError(f"{path}: truncated or oversized body")
    labels = np.frombuffer(body[: 4 * n], dtype="<i4").astype(np.int64)
    images = np.frombuffer(body[4 * n:], dtype="<f8").reshape(n, h, w, c).astype(np.float64)
    return Dataset(images, labels, classes, split)


def save_trigger(trig, path):
    h, w, c = trig.pattern.shape
    ph, pw = trig.patch_size
    header = f"{TRIG_MAGIC} {h} {w} {c} {trig.target} {ph} {pw}\n".encode()
    atomic_write(path, header + trig.pattern.astype("<f8").tobytes() + trig.mask.astype("<f8").tobytes())


def load_trigger(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        body = fh.read()
    if len(header) != 7 or header[0] != TRIG_MAGIC:
        raise ValueError(f"{path}: not a {TRIG_MAGIC} file")
    h, w, c, target, ph, pw = (int(v) for v in header[1:])
    size = h * w * c
    if len(body) != 16 * size:
        raise ValueError(f"{path}: truncated or oversized body")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64)
    trig = Trigger(arr[:size].reshape(h, w, c), arr[size:].reshape(h, w, c), target)
    if trig.patch_size != (ph, pw):
        raise ValueError(f"{path}: header patch {ph}x{pw} disagrees with mask {trig.patch_size}")
    return trig
