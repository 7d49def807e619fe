"""Dataset ingestion, augmentation and batching.

Two sources: the CIFAR binary record format (coarse label u8, fine
label u8, 3x32x32 channel-planar pixels) and a deterministic synthetic
generator whose classes are oriented intensity ramps plus noise, which
keeps desk-scale experiments linearly separable while still giving a
small CNN something to learn.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .tensor import ContractError

CIFAR100_RECORD_BYTES = 2 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [count, C, H, W]
    labels: np.ndarray  # int64 [count]
    num_classes: int
    split: str = "unknown"
    # natural images keep their class under mirroring; orientation-coded
    # synthetic classes do not, so their augmentation must not flip
    flip_symmetric: bool = True
    _stats: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8 [count, C, H, W], got {self.images.dtype} {self.images.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std on the [0, 1] scale, computed once and cached."""
        if self._stats is None:
            as_float = self.images.astype(np.float64) / 255.0
            mean = as_float.mean(axis=(0, 2, 3))
            std = as_float.std(axis=(0, 2, 3))
            std = np.maximum(std, 1e-6)
            self._stats = (mean.astype(np.float32), std.astype(np.float32))
        return self._stats

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.split)


def class_subset(ds: Dataset, classes) -> Dataset:
    """Restrict to the given classes, remapping labels to 0..len-1."""
    classes = list(classes)
    lut = {c: i for i, c in enumerate(classes)}
    mask = np.isin(ds.labels, classes)
    labels = np.array([lut[int(l)] for l in ds.labels[mask]], dtype=np.int64)
    return Dataset(ds.images[mask], labels, len(classes), ds.split)


# ---------------------------------------------------------------------------
# CIFAR binary format


def load_cifar_binary(path, variant: str = "cifar100", split: Optional[str] = None) -> Dataset:
    """Read one CIFAR binary file (fine labels; deterministic order)."""
    if variant != "cifar100":
        raise ValueError(f"unsupported variant {variant!r}")
    if not os.path.exists(path):
        raise OSError(f"{path}: file not found")
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR100_RECORD_BYTES != 0:
        raise OSError(
            f"{path}: size {size} is not a multiple of the {CIFAR100_RECORD_BYTES}-byte record "
            "(coarse u8 + fine u8 + 3072 pixels)")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR100_RECORD_BYTES)
    labels = raw[:, 1].astype(np.int64)
    images = raw[:, 2:].reshape(-1, 3, 32, 32)
    if split is None:
        split = os.path.splitext(os.path.basename(path))[0]
    return Dataset(np.ascontiguousarray(images), labels, 100, split)


def write_cifar_binary(ds: Dataset, path) -> None:
    """Export in the CIFAR100 record layout (requires 3x32x32 images)."""
    if ds.image_shape != (3, 32, 32):
        raise ValueError(f"CIFAR layout needs 3x32x32 images, got {ds.image_shape}")
    count = len(ds)
    out = np.empty((count, CIFAR100_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = 0  # coarse label, unused
    out[:, 1] = ds.labels.astype(np.uint8)
    out[:, 2:] = ds.images.reshape(count, -1)
    out.tofile(path)


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(num_classes: int, per_class: int, image_size: int = 16, seed: int = 0,
                  split: str = "train", contrast: float = 55.0, noise: float = 70.0) -> Dataset:
    """Class k is an intensity ramp oriented at angle pi*k/M, plus jitter.

    Per-image brightness/amplitude jitter and per-pixel noise make the
    task non-trivial for a small CNN while raw pixels stay linearly
    separable (the orientation is a fixed linear pattern).
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    count = num_classes * per_class
    coords = np.linspace(-1.0, 1.0, image_size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((count, 3, image_size, image_size), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    channel_gain = np.array([0.9, 1.0, 1.1])[:, None, None]
    i = 0
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        ramp = np.cos(theta) * xx + np.sin(theta) * yy  # in [-sqrt(2), sqrt(2)]
        for _ in range(per_class):
            amp = rng.uniform(0.7, 1.3) * contrast
            brightness = rng.uniform(-20.0, 20.0)
            base = 128.0 + brightness + amp * ramp
            pix = base[None] * channel_gain + rng.uniform(-noise, noise, size=(3, image_size, image_size))
            images[i] = np.clip(pix, 0, 255).astype(np.uint8)
            labels[i] = k
            i += 1
    return Dataset(images, labels, num_classes, split)


def linear_probe_accuracy(ds: Dataset, ridge: float = 1e-3) -> float:
    """Closed-form least-squares one-vs-all probe on raw pixels."""
    x = ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0
    x = np.concatenate([x, np.ones((len(ds), 1))], axis=1)
    y = np.eye(ds.num_classes)[ds.labels]
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x.T @ y)
    pred = (x @ w).argmax(axis=1)
    return float((pred == ds.labels).mean())


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_pad: int = 4
    hflip_prob: float = 0.5
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    @staticmethod
    def for_dataset(ds: Dataset, crop_pad: int = 4, hflip_prob: float = 0.5) -> "AugmentConfig":
        mean, std = ds.channel_stats()
        return AugmentConfig(crop_pad, hflip_prob, tuple(float(m) for m in mean),
                             tuple(float(s) for s in std))


def _normalize(batch_float01: np.ndarray, config: AugmentConfig) -> np.ndarray:
    mean = np.asarray(config.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(config.std, dtype=np.float32)[:, None, None]
    return (batch_float01 - mean) / std


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            crop_offset: Optional[tuple[int, int]] = None, flip: Optional[bool] = None) -> np.ndarray:
    """Train-time transform of one uint8 [C, H, W] image.

    Reflection-pad by crop_pad, random crop back to the input size,
    random horizontal flip, scale to [0, 1], channel-normalize.  The
    crop_offset/flip overrides pin the randomness for tests.
    """
    c, h, w = image.shape
    pad = config.crop_pad
    if pad:
        padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        if crop_offset is None:
            crop_offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
        oy, ox = crop_offset
        image = padded[:, oy : oy + h, ox : ox + w]
    if flip is None:
        flip = bool(rng.random() < config.hflip_prob)
    if flip:
        image = image[:, :, ::-1]
    out = image.astype(np.float32) / 255.0
    return _normalize(out, config)


def augment_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorized augment over a uint8 [B, C, H, W] batch."""
    b, c, h, w = images.shape
    pad = config.crop_pad
    out = np.empty((b, c, h, w), dtype=np.float32)
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        oys = rng.integers(0, 2 * pad + 1, size=b)
        oxs = rng.integers(0, 2 * pad + 1, size=b)
    else:
        padded = images
        oys = oxs = np.zeros(b, dtype=np.int64)
    flips = rng.random(b) < config.hflip_prob
    for i in range(b):
        crop = padded[i, :, oys[i] : oys[i] + h, oxs[i] : oxs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    out /= 255.0
    mean = np.asarray(config.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(config.std, dtype=np.float32)[None, :, None, None]
    return (out - mean) / std


def eval_transform(images: np.ndarray, config: AugmentConfig) -> np.ndarray:
    """Eval pipeline: scale to [0, 1] and normalize only."""
    if images.ndim == 3:
        return _normalize(images.astype(np.float32) / 255.0, config)
    mean = np.asarray(config.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(config.std, dtype=np.float32)[None, :, None, None]
    return (images.astype(np.float32) / 255.0 - mean) / std


# ---------------------------------------------------------------------------
# batching


def batch_iter(ds: Dataset, batch_size: int, shuffle: bool = True,
               seed: Optional[int] = None, rng: Optional[np.random.Generator] = None
               ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) covering every example exactly once."""
    if len(ds) == 0:
        raise ContractError("cannot iterate an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            rng = np.random.default_rng(seed)
        order = rng.permutation(len(ds))
    else:
        order = np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
