"""Dataset ingestion, synthetic data, augmentation and batching.

Readers return images as float arrays in [0, 1], shaped (N, C, H, W), with
integer labels. Writers exist so fixtures and round-trip tests can produce
real files.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataFormatError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-planar pixel bytes
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float in [0, 1]
    labels: np.ndarray  # (N,) int
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ConfigurationError(
                f"dataset images {self.images.shape} and labels {self.labels.shape} do not line up"
            )
        if len(self.images) and (not np.isfinite(self.images).all() or self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigurationError("dataset images must be finite and lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(
                f"labels must lie in [0, {self.num_classes}), got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return len(self.labels)


# -- CIFAR-10 binary ---------------------------------------------------------


def read_cifar10_binary(path, split: str = "train") -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        want = (len(raw) // CIFAR_RECORD + 1) * CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD} "
            f"(nearest record boundary {want})"
        )
    n = len(raw) // CIFAR_RECORD
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}, expected 0..9")
    images = buf[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, split=split, num_classes=10)


def write_cifar10_binary(path, dataset: Dataset) -> None:
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ConfigurationError(f"CIFAR writer needs (N, 3, 32, 32) images, got {dataset.images.shape}")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), 3072)
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels.astype(np.uint8)
    rec[:, 1:] = pixels
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# -- MNIST IDX ---------------------------------------------------------------


def read_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataFormatError(f"{images_path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) - 16 != n * rows * cols:
        raise DataFormatError(
            f"{images_path}: header promises {n}x{rows}x{cols} = {n * rows * cols} pixel bytes, "
            f"found {len(raw) - 16}"
        )
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        lraw = f.read()
    if len(lraw) < 8:
        raise DataFormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, ln = struct.unpack(">II", lraw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lraw) - 8 != ln:
        raise DataFormatError(f"{labels_path}: header promises {ln} labels, found {len(lraw) - 8} bytes")
    if ln != n:
        raise DataFormatError(f"{labels_path}: {ln} labels for {n} images")
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels, split=split, num_classes=10)


def write_mnist_idx(images_path, labels_path, dataset: Dataset) -> None:
    n, c, rows, cols = dataset.images.shape
    if c != 1:
        raise ConfigurationError(f"IDX writer needs single-channel images, got {dataset.images.shape}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.rint(dataset.images * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# -- synthetic spirals --------------------------------------------------------


def spiral_points(n_per_class: int, classes: int, noise_sd: float, seed: int):
    """Interleaved spiral arms in [-1, 1]^2. Returns (coords (N, 2), labels)."""
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    coords = np.zeros((n_per_class * classes, 2), dtype=np.float64)
    labels = np.zeros(n_per_class * classes, dtype=np.int64)
    for c in range(classes):
        t = rng.uniform(0.05, 1.0, size=n_per_class)
        radius = 0.08 + 0.82 * t
        theta = 2.0 * np.pi * (1.25 * t + c / classes)
        x = radius * np.cos(theta) + noise_sd * rng.standard_normal(n_per_class)
        y = radius * np.sin(theta) + noise_sd * rng.standard_normal(n_per_class)
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        coords[sl, 0] = x
        coords[sl, 1] = y
        labels[sl] = c
    return coords, labels


def render_occupancy(coords: np.ndarray, side: int = 16) -> np.ndarray:
    """One point per image: the nearest grid cell is set to 1."""
    n = len(coords)
    images = np.zeros((n, 1, side, side), dtype=np.float32)
    px = np.clip(np.rint((coords[:, 0] + 1.0) / 2.0 * (side - 1)), 0, side - 1).astype(np.int64)
    py = np.clip(np.rint((coords[:, 1] + 1.0) / 2.0 * (side - 1)), 0, side - 1).astype(np.int64)
    images[np.arange(n), 0, py, px] = 1.0
    return images


def synthetic_spirals(
    n_per_class: int, classes: int = 3, noise_sd: float = 0.1, seed: int = 0, side: int = 16, split: str = "train"
) -> Dataset:
    coords, labels = spiral_points(n_per_class, classes, noise_sd, seed)
    return Dataset(images=render_occupancy(coords, side), labels=labels, split=split, num_classes=classes)


# -- augmentation --------------------------------------------------------------


@dataclass
class AugmentPolicy:
    hflip_prob: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ConfigurationError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi):
                raise ConfigurationError(f"{name} interval must satisfy 0 <= lo <= hi, got ({lo}, {hi})")


def _unit(interval) -> bool:
    return interval[0] == 1.0 and interval[1] == 1.0


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-image horizontal flip plus multiplicative brightness, contrast and
    saturation jitter, clamped back into [0, 1]. Identity intervals are
    skipped entirely so they are exact no-ops."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    out = images.copy()
    n = len(out)
    if policy.hflip_prob > 0:
        flips = rng.random(n) < policy.hflip_prob
        out[flips] = out[flips, :, :, ::-1]
    if not _unit(policy.brightness):
        f = rng.uniform(*policy.brightness, size=n).astype(out.dtype)
        out *= f[:, None, None, None]
    if not _unit(policy.contrast):
        f = rng.uniform(*policy.contrast, size=n).astype(out.dtype)
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        out = mean + (out - mean) * f[:, None, None, None]
    if not _unit(policy.saturation) and out.shape[1] > 1:
        f = rng.uniform(*policy.saturation, size=n).astype(out.dtype)
        gray = out.mean(axis=1, keepdims=True)
        out = gray + (out - gray) * f[:, None, None, None]
    if not (_unit(policy.brightness) and _unit(policy.contrast) and _unit(policy.saturation)):
        out = np.clip(out, 0.0, 1.0)
    return out


# -- batching and normalization --------------------------------------------------


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield (images, labels) batches covering the dataset exactly once.
    Order is a seeded permutation (or dataset order if no seed); the final
    partial batch is emitted."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def channel_stats(images: np.ndarray):
    """Per-channel mean and std over a training split; std floored at 1e-6."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(images.dtype), std.astype(images.dtype)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[None, :, None, None]) / std[None, :, None, None]
