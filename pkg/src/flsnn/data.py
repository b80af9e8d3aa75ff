"""Spike-domain datasets: encoders, stream concatenation, raster files, synthetic non-IID data."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from flsnn.errors import ConfigurationError, DimensionError, RasterFormatError

MAGIC = b"SRAS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


@dataclass
class RasterDataset:
    """Labelled binary input rasters of shape ``(num_examples, num_neurons, num_steps)``."""

    rasters: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        raw = np.asarray(self.rasters)
        if raw.size and not np.isin(raw, (0, 1)).all():
            raise RasterFormatError("rasters must be binary")
        self.rasters = raw.astype(np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rasters.ndim != 3:
            raise DimensionError("rasters must be (examples, neurons, steps)")
        if self.labels.shape != (self.rasters.shape[0],):
            raise DimensionError("need exactly one label per raster")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.rasters.shape[0]

    @property
    def num_neurons(self) -> int:
        return self.rasters.shape[1]

    @property
    def num_steps(self) -> int:
        return self.rasters.shape[2]


def rate_encode(x, num_steps: int, p_max: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli rate code: bit ``(n, s)`` fires with probability ``x[n] * p_max``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise ConfigurationError("covariates must lie in [0, 1]")
    if not 0 <= p_max <= 1:
        raise ConfigurationError("p_max must lie in [0, 1]")
    return (rng.random((x.shape[0], num_steps)) < (x * p_max)[:, None]).astype(np.uint8)


def encode_target(label: int, num_steps: int, num_output: int, scheme: str = "constant",
                  period: int = 2) -> np.ndarray:
    """Target raster with only row ``label`` active.

    ``constant`` fires at every step; ``periodic`` fires when ``s % period == 0``
    for 1-based step ``s``.
    """
    if not 0 <= label < num_output:
        raise ConfigurationError(f"class {label} outside [0, {num_output})")
    out = np.zeros((num_output, num_steps), dtype=np.uint8)
    if scheme == "constant":
        out[label] = 1
    elif scheme == "periodic":
        if period < 1:
            raise ConfigurationError("period must be >= 1")
        s = np.arange(1, num_steps + 1)
        out[label] = (s % period == 0)
    else:
        raise ConfigurationError(f"unknown target scheme {scheme!r}")
    return out


def concatenate_stream(examples: Sequence[tuple[np.ndarray, np.ndarray]], gap: int = 0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Join ``(input, target)`` raster pairs in order, each followed by ``gap`` silent steps."""
    if not examples:
        raise ConfigurationError("at least one example is required")
    if gap < 0:
        raise ConfigurationError("gap must be >= 0")
    x0, y0 = examples[0]
    xs, ys = [], []
    for x, y in examples:
        if x.shape != x0.shape or y.shape != y0.shape or x.shape[1] != y.shape[1]:
            raise DimensionError("examples have inconsistent raster shapes")
        xs += [x, np.zeros((x.shape[0], gap), dtype=x.dtype)]
        ys += [y, np.zeros((y.shape[0], gap), dtype=y.dtype)]
    return np.concatenate(xs, axis=1), np.concatenate(ys, axis=1)


def build_stream(dataset: RasterDataset, num_examples: int, num_output: int, rng: np.random.Generator,
                 gap: int = 0, scheme: str = "constant", period: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``num_examples`` examples uniformly with replacement and concatenate them."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot build a training stream from an empty dataset")
    picks = rng.integers(0, len(dataset), size=num_examples)
    pairs = [
        (dataset.rasters[i], encode_target(int(dataset.labels[i]), dataset.num_steps, num_output, scheme, period))
        for i in picks
    ]
    return concatenate_stream(pairs, gap)


def encode_targets(labels, num_steps: int, num_output: int, scheme: str = "constant",
                   period: int = 2) -> np.ndarray:
    return np.stack([encode_target(int(y), num_steps, num_output, scheme, period) for y in labels]) \
        if len(labels) else np.zeros((0, num_output, num_steps), dtype=np.uint8)


def block_templates(num_classes: int, num_input: int, rate: float = 1.0) -> np.ndarray:
    """One template per class: ``rate`` on a disjoint block of input rows, 0 elsewhere."""
    block = num_input // num_classes
    if block < 1:
        raise ConfigurationError("need at least one input row per class")
    out = np.zeros((num_classes, num_input))
    for c in range(num_classes):
        out[c, c * block:(c + 1) * block] = rate
    return out


def _noisy_examples(template: np.ndarray, count: int, num_steps: int, p_max: float,
                    noise: float, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for _ in range(count):
        r = rate_encode(template, num_steps, p_max, rng)
        flips = rng.random(r.shape) < noise
        out.append(np.where(flips, 1 - r, r).astype(np.uint8))
    return out


def make_synthetic_noniid(num_classes: int, num_input: int, num_steps: int, templates: np.ndarray,
                          noise: float, train_counts: Sequence[int], test_per_class: int, seed: int,
                          p_max: float = 1.0, num_output: int | None = None
                          ) -> tuple[list[RasterDataset], RasterDataset]:
    """Strict non-IID split: device ``i`` trains only on class ``i``; the test set holds all classes."""
    num_output = num_classes if num_output is None else num_output
    if num_classes > num_output:
        raise ConfigurationError(f"{num_classes} classes need at least as many output neurons ({num_output})")
    if len(train_counts) > num_classes:
        raise ConfigurationError("each device needs its own class")
    if any(c < 1 for c in train_counts):
        raise ConfigurationError("every device needs a nonempty training set")
    templates = np.asarray(templates, dtype=np.float64)
    if templates.shape != (num_classes, num_input):
        raise DimensionError(f"templates must be ({num_classes}, {num_input})")
    if not 0 <= noise <= 1:
        raise ConfigurationError("noise must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    train = []
    for device, count in enumerate(train_counts):
        rasters = _noisy_examples(templates[device], count, num_steps, p_max, noise, rng)
        train.append(RasterDataset(np.stack(rasters), np.full(count, device), num_classes))
    test_rasters, test_labels = [], []
    for c in range(num_classes):
        test_rasters += _noisy_examples(templates[c], test_per_class, num_steps, p_max, noise, rng)
        test_labels += [c] * test_per_class
    shape = (0, num_input, num_steps)
    test = RasterDataset(np.stack(test_rasters) if test_rasters else np.zeros(shape), test_labels, num_classes)
    return train, test


def dumps_raster(dataset: RasterDataset) -> bytes:
    n, s = dataset.num_neurons, dataset.num_steps
    parts = [_HEADER.pack(MAGIC, VERSION, n, s, len(dataset), dataset.num_classes)]
    for raster, label in zip(dataset.rasters, dataset.labels):
        parts.append(struct.pack("<H", int(label)))
        parts.append(np.packbits(raster.reshape(-1), bitorder="big").tobytes())
    return b"".join(parts)


def loads_raster(blob: bytes) -> RasterDataset:
    if len(blob) < _HEADER.size:
        raise RasterFormatError("file is shorter than the header")
    magic, version, n, s, count, classes = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported version {version}")
    if classes < 1 and count:
        raise RasterFormatError("num_classes must be positive")
    nbits = n * s
    nbytes = (nbits + 7) // 8
    expected = _HEADER.size + count * (2 + nbytes)
    if len(blob) < expected:
        raise RasterFormatError(f"truncated file: {len(blob)} bytes, header implies {expected}")
    if len(blob) > expected:
        raise RasterFormatError(f"{len(blob) - expected} trailing bytes after payload")

    rasters = np.zeros((count, n, s), dtype=np.uint8)
    labels = np.zeros(count, dtype=np.int64)
    pos = _HEADER.size
    for i in range(count):
        (labels[i],) = struct.unpack_from("<H", blob, pos)
        packed = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos + 2)
        bits = np.unpackbits(packed, bitorder="big")
        if bits[nbits:].any():
            raise RasterFormatError(f"example {i} has nonzero padding bits")
        rasters[i] = bits[:nbits].reshape(n, s)
        pos += 2 + nbytes
    try:
        return RasterDataset(rasters, labels, int(classes))
    except ConfigurationError as exc:
        raise RasterFormatError(str(exc)) from exc


def save_raster_file(dataset: RasterDataset, path) -> None:
    Path(path).write_bytes(dumps_raster(dataset))


def load_raster_file(path) -> RasterDataset:
    return loads_raster(Path(path).read_bytes())
