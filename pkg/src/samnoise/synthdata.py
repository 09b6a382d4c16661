"""Toy Gaussian data, synthetic label corruption and dataset ingestion.

Binary datasets carry targets in {-1, +1}; multiclass datasets carry class
indices 0..K-1. Every array is float64 / int64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from samnoise.errors import DataFormatError

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2023, 0.1994, 0.2010)

SNLD_MAGIC = b"SNLD"
SNLD_VERSION = 1
_SNLD_HEADER = struct.Struct("<4sIQQI")

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class ToyDataConfig:
    signal_B: float = 2.0
    gamma: float = 1.0
    dim: int = 1000
    noise_rate: float = 0.4
    n_train: int = 500
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError(f"noise_rate must lie in [0, 0.5), got {self.noise_rate}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")

    @property
    def noise_std(self) -> float:
        """Per-coordinate standard deviation of the nuisance coordinates."""
        return self.gamma / np.sqrt(self.dim - 1)


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    observed_targets: np.ndarray
    true_targets: np.ndarray
    num_classes: int = 2
    clean_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.observed_targets = np.asarray(self.observed_targets, dtype=np.int64)
        self.true_targets = np.asarray(self.true_targets, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be an n x d matrix")
        n = self.inputs.shape[0]
        if self.observed_targets.shape != (n,) or self.true_targets.shape != (n,):
            raise ValueError("target vectors must have one entry per input row")
        self.clean_mask = self.observed_targets == self.true_targets

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def binary(self) -> bool:
        return self.num_classes == 2 and bool(np.all(np.abs(self.true_targets) == 1))

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(~self.clean_mask)) if len(self) else 0.0

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(
            self.inputs[index],
            self.observed_targets[index],
            self.true_targets[index],
            self.num_classes,
        )


def corruption_count(delta: float, n: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(delta * n + 0.5))


def corrupt_labels(targets, K: int, delta: float, seed):
    """Replace exactly round(delta * n) labels with a different class.

    Indices are the prefix of a seeded permutation. Binary {-1, +1} targets
    are sign flipped; otherwise the new label is drawn uniformly from the
    K - 1 wrong classes. Returns ``(corrupted, clean_mask)``.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n)[: corruption_count(delta, n)]
    out = targets.copy()
    signed = K == 2 and bool(np.all(np.abs(targets) == 1))
    if signed:
        out[chosen] = -targets[chosen]
    else:
        if np.any((targets < 0) | (targets >= K)):
            raise ValueError("class indices must lie in 0..K-1")
        j = rng.integers(0, K - 1, size=chosen.shape[0])
        # skip over the true class: j in 0..K-2 maps onto the K-1 wrong labels
        out[chosen] = np.where(j >= targets[chosen], j + 1, j)
    return out, out == targets


def _toy_split(config: ToyDataConfig, n: int, label_seed, noise_seed):
    y = np.where(np.random.default_rng(label_seed).random(n) < 0.5, -1, 1)
    z = np.random.default_rng(noise_seed).normal(0.0, config.noise_std, size=(n, config.dim - 1))
    x = np.empty((n, config.dim))
    x[:, 0] = config.signal_B
    x[:, 1:] = z
    x *= y[:, None]
    return x, y.astype(np.int64)


def sample_toy(config: ToyDataConfig):
    """Draw (train, test) from the toy Gaussian distribution.

    Test targets are noiseless. Labels, inputs and corruption each use an
    independent RNG stream derived from ``config.seed``.
    """
    streams = np.random.SeedSequence(config.seed).spawn(5)
    x, y = _toy_split(config, config.n_train, streams[0], streams[1])
    t, _ = corrupt_labels(y, 2, config.noise_rate, streams[2])
    train = LabeledDataset(x, t, y, 2)
    xt, yt = _toy_split(config, config.n_test, streams[3], streams[4])
    test = LabeledDataset(xt, yt, yt, 2)
    return train, test


def normalize_channels(inputs, mean=CIFAR_MEAN, std=CIFAR_STD):
    """Channel-major (c, h, w) flattened rows -> per-channel standardized copy."""
    inputs = np.asarray(inputs, dtype=np.float64)
    c = len(mean)
    n, d = inputs.shape
    if d % c:
        raise ValueError(f"row length {d} is not divisible by {c} channels")
    view = inputs.reshape(n, c, d // c)
    out = (view - np.asarray(mean)[None, :, None]) / np.asarray(std)[None, :, None]
    return out.reshape(n, d)


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an ndarray of its native dtype."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(path, len(raw), "file too short for IDX magic number")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise DataFormatError(path, 0, f"bad IDX magic number 0x{raw[:4].hex()}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(path, len(raw), f"truncated IDX header, expected {ndim} dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(raw) - header_end
    if have < expected:
        raise DataFormatError(
            path, len(raw), f"truncated IDX payload: need {expected} bytes after header, found {have}"
        )
    return np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes=10) -> LabeledDataset:
    """Load IDX images (and optional IDX labels) as flattened rows in [0, 1]."""
    images = read_idx(images_path)
    if images.ndim < 1:
        raise DataFormatError(images_path, 0, "IDX image file has no item dimension")
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64)
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        x /= 255.0
    if labels_path is None:
        labels = np.zeros(n, dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise DataFormatError(labels_path, 4, f"{labels.shape[0]} labels for {n} images")
    return LabeledDataset(x, labels, labels, num_classes)


CIFAR_RECORD = 1 + 3072


def load_cifar_binary(path, normalize=False) -> LabeledDataset:
    """Load a CIFAR-10 binary batch (label byte + 3072 pixel bytes per record)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataFormatError(path, 0, "empty CIFAR-10 file")
    if len(raw) % CIFAR_RECORD:
        last = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(path, last, f"truncated CIFAR-10 record ({len(raw) - last} of {CIFAR_RECORD} bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(path, int(bad[0]) * CIFAR_RECORD, f"label byte {labels[bad[0]]} outside 0..9")
    x = records[:, 1:].astype(np.float64) / 255.0
    if normalize:
        x = normalize_channels(x)
    return LabeledDataset(x, labels, labels, 10)


def load_digits_dataset(n_test=497, split_seed=0, normalize=True):
    """sklearn's bundled 8x8 digits as a (train, test) pair of flattened rows.

    Pixels are scaled to [0, 1]; with ``normalize`` every pixel is then
    standardized with train-split statistics.
    """
    from sklearn.datasets import load_digits

    x, y = load_digits(return_X_y=True)
    x = x.astype(np.float64) / 16.0
    order = np.random.default_rng(split_seed).permutation(len(y))
    x, y = x[order], y[order].astype(np.int64)
    xtr, ytr, xte, yte = x[n_test:], y[n_test:], x[:n_test], y[:n_test]
    if normalize:
        mu = xtr.mean(0)
        sd = xtr.std(0)
        sd[sd == 0] = 1.0
        xtr = (xtr - mu) / sd
        xte = (xte - mu) / sd
    return LabeledDataset(xtr, ytr, ytr, 10), LabeledDataset(xte, yte, yte, 10)


def with_label_noise(dataset: LabeledDataset, delta: float, seed) -> LabeledDataset:
    """Corrupt the observed labels of a clean dataset, keeping true labels."""
    observed, _ = corrupt_labels(dataset.true_targets, dataset.num_classes, delta, seed)
    return LabeledDataset(dataset.inputs, observed, dataset.true_targets, dataset.num_classes)


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write the flat SNLD container (little-endian)."""
    path = Path(path)
    n, d = dataset.inputs.shape
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_SNLD_HEADER.pack(SNLD_MAGIC, SNLD_VERSION, n, d, dataset.num_classes))
        fh.write(dataset.inputs.astype("<f8").tobytes())
        fh.write(dataset.observed_targets.astype("<i8").tobytes())
        fh.write(dataset.true_targets.astype("<i8").tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _SNLD_HEADER.size:
        raise DataFormatError(path, len(raw), "truncated SNLD header")
    magic, version, n, d, k = _SNLD_HEADER.unpack_from(raw)
    if magic != SNLD_MAGIC:
        raise DataFormatError(path, 0, f"bad magic {magic!r}, expected {SNLD_MAGIC!r}")
    if version != SNLD_VERSION:
        raise DataFormatError(path, 4, f"unsupported SNLD version {version}")
    need = _SNLD_HEADER.size + 8 * (n * d + 2 * n)
    if len(raw) < need:
        raise DataFormatError(path, len(raw), f"truncated SNLD payload, expected {need} bytes")
    off = _SNLD_HEADER.size
    x = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d)
    off += 8 * n * d
    obs = np.frombuffer(raw, "<i8", n, off)
    true = np.frombuffer(raw, "<i8", n, off + 8 * n)
    return LabeledDataset(x.astype(np.float64), obs.astype(np.int64), true.astype(np.int64), int(k))
