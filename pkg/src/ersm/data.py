"""Synthetic planted-glyph dataset with exact ground-truth object masks.

Each image is a smooth, homogeneous background (constant plus noise, or a
low-frequency field) with one deterministic class glyph planted at a random
position: an oriented sinusoidal bar grating whose angle encodes the class.
Class evidence is strictly local, backgrounds are redundant, and the truth
mask records exactly the planted pixels, so claims about background
suppression are machine-checkable. Truth masks are never used in training.

Files use a little-endian binary format (magic ``ERSD``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from ._fileio import atomic_write_bytes

__all__ = [
    "GeneratorConfig",
    "Sample",
    "Dataset",
    "DatasetFormatError",
    "class_glyph",
    "generate",
    "write_dataset",
    "read_dataset",
    "split",
]

DATASET_MAGIC = b"ERSD"
DATASET_VERSION = 1

GLYPH_CONTRAST = 0.5
GLYPH_PERIOD = 3.0
BACKGROUND_LEVEL = 0.5
LOWFREQ_CELLS = 4
LOWFREQ_SPAN = 0.2

BACKGROUND_MODES = ("constant", "lowfreq")


class DatasetFormatError(ValueError):
    """Dataset bytes are malformed."""


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 4
    image_size: int = 32
    channels: int = 1
    object_size: int = 8
    background: str = "constant"
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.object_size < 2:
            raise ValueError("object_size must be >= 2")
        if self.object_size >= self.image_size:
            raise ValueError(
                f"object_size {self.object_size} must be smaller than image_size {self.image_size}"
            )
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.background not in BACKGROUND_MODES:
            raise ValueError(f"background must be one of {BACKGROUND_MODES}, got {self.background!r}")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float64
    label: int
    truth_mask: np.ndarray  # (H, W) uint8, 1 on planted pixels


@dataclass
class Dataset:
    samples: list
    num_classes: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def sample_shape(self):
        return self.samples[0].image.shape if self.samples else (0, 0, 0)


def class_glyph(label: int, num_classes: int, size: int) -> np.ndarray:
    """Deterministic class pattern: a sinusoidal bar grating oriented at
    angle pi * label / num_classes, centered around the background level."""
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    coords = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = math.pi * label / num_classes
    u = xx * math.cos(theta) + yy * math.sin(theta)
    return BACKGROUND_LEVEL + GLYPH_CONTRAST * np.sin(2.0 * math.pi * u / GLYPH_PERIOD)


def _background(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    h = w = config.image_size
    if config.background == "constant":
        return np.full((h, w), BACKGROUND_LEVEL)
    coarse = rng.uniform(BACKGROUND_LEVEL - LOWFREQ_SPAN, BACKGROUND_LEVEL + LOWFREQ_SPAN,
                         (LOWFREQ_CELLS, LOWFREQ_CELLS))
    return T.bilinear_resize(coarse, h, w)


def generate(config: GeneratorConfig, n: int) -> Dataset:
    """Generate ``n`` samples, fully determined by ``(config, n)``.

    Labels are balanced (a seeded shuffle of the class cycle); every sample
    draws from its own spawned substream, so generation is embarrassingly
    parallel in principle. Per-sample draw order: background field, object
    row, object column, then the noise field.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h = w = config.image_size
    s = config.object_size
    label_seq, *sample_seqs = np.random.SeedSequence(config.seed).spawn(n + 1)
    labels = np.random.default_rng(label_seq).permutation(
        np.resize(np.arange(config.num_classes), n)
    )
    samples = []
    for i in range(n):
        rng = np.random.default_rng(sample_seqs[i])
        plane = _background(config, rng)
        r0 = int(rng.integers(0, h - s + 1))
        c0 = int(rng.integers(0, w - s + 1))
        plane = plane.copy()
        plane[r0 : r0 + s, c0 : c0 + s] = class_glyph(int(labels[i]), config.num_classes, s)
        image = np.repeat(plane[None, :, :], config.channels, axis=0)
        if config.noise > 0:
            image = image + config.noise * rng.standard_normal((config.channels, h, w))
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[r0 : r0 + s, c0 : c0 + s] = 1
        samples.append(Sample(image=image, label=int(labels[i]), truth_mask=mask))
    return Dataset(samples=samples, num_classes=config.num_classes)


# ---------------------------------------------------------------------------
# file format


def write_dataset(dataset: Dataset, path) -> None:
    """Write the ERSD format: magic, u32 version, u32 n, u32 K, u32 C/H/W,
    then per sample {f64 image, u16 label, u8 truth_mask}."""
    c, h, w = dataset.sample_shape
    for i, s in enumerate(dataset.samples):
        if s.image.shape != (c, h, w):
            raise ValueError(f"sample {i} shape {s.image.shape} differs from {(c, h, w)}")
        if not 0 <= s.label < dataset.num_classes:
            raise ValueError(f"sample {i} label {s.label} out of range")
        if s.truth_mask.shape != (h, w):
            raise ValueError(f"sample {i} truth mask shape {s.truth_mask.shape} differs from {(h, w)}")
    payload = bytearray()
    payload += DATASET_MAGIC
    payload += struct.pack("<IIIIII", DATASET_VERSION, len(dataset.samples), dataset.num_classes, c, h, w)
    for s in dataset.samples:
        payload += T.as_f64(s.image).astype("<f8").tobytes(order="C")
        payload += struct.pack("<H", s.label)
        payload += np.ascontiguousarray(s.truth_mask, dtype=np.uint8).tobytes()
    atomic_write_bytes(path, bytes(payload))


def read_dataset(path) -> Dataset:
    """Read an ERSD file; malformed input raises :class:`DatasetFormatError`
    and never returns a partial dataset."""
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise DatasetFormatError(f"{path}: truncated (needed {nbytes} bytes at offset {pos})")
        out = data[pos : pos + nbytes]
        pos += nbytes
        return out

    if take(4) != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not an ERSD dataset")
    version, n, k, c, h, w = struct.unpack("<IIIIII", take(24))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if k < 1:
        raise DatasetFormatError(f"{path}: invalid class count {k}")
    samples = []
    img_bytes = 8 * c * h * w
    for i in range(n):
        image = np.frombuffer(take(img_bytes), dtype="<f8").astype(np.float64).reshape(c, h, w)
        (label,) = struct.unpack("<H", take(2))
        if label >= k:
            raise DatasetFormatError(f"{path}: sample {i} label {label} >= class count {k}")
        mask = np.frombuffer(take(h * w), dtype=np.uint8).reshape(h, w).copy()
        samples.append(Sample(image=image, label=int(label), truth_mask=mask))
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} trailing bytes after last sample")
    return Dataset(samples=samples, num_classes=int(k))


def split(dataset: Dataset, fractions, seed: int = 0):
    """Label-stratified split into (first, second) parts.

    Disjoint, exhaustive, and deterministic in ``seed``; per-class counts
    follow the first fraction by largest remainder, so every class lands
    within one item of its target.
    """
    if len(fractions) != 2:
        raise ValueError("fractions must be a (first, second) pair")
    f0, f1 = float(fractions[0]), float(fractions[1])
    if not (0.0 < f0 < 1.0 and 0.0 < f1 < 1.0):
        raise ValueError(f"fractions must lie in (0, 1), got {fractions}")
    if abs(f0 + f1 - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {f0 + f1}")
    labels = dataset.labels()
    n = len(dataset)
    rng = np.random.default_rng(seed)
    per_class = []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(labels == cls)
        per_class.append(rng.permutation(idx))
    total_first = int(round(f0 * n))
    base = [int(math.floor(f0 * len(idx))) for idx in per_class]
    remainders = [f0 * len(idx) - b for idx, b in zip(per_class, base)]
    leftover = total_first - sum(base)
    order = sorted(range(len(per_class)), key=lambda i: (-remainders[i], i))
    for i in order[: max(leftover, 0)]:
        base[i] += 1
    first_idx, second_idx = [], []
    for idx, take_n in zip(per_class, base):
        first_idx.extend(idx[:take_n].tolist())
        second_idx.extend(idx[take_n:].tolist())
    first_idx.sort()
    second_idx.sort()
    make = lambda ids: Dataset([dataset.samples[i] for i in ids], dataset.num_classes)
    return make(first_idx), make(second_idx)
