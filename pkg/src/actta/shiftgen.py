"""Synthetic source data, parametric distribution shifts, and dataset files.

All magnitudes for the corruption kinds live in :data:`SEVERITY_TABLE`.
They are expressed in units of ``CorruptionSpec.scale``, which callers
normally set to the dataset's ``noise_sigma``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import ContractError, FormatError, InconsistentDataError, TruncatedFileError

CORRUPTIONS = ("additive_gaussian", "mean_shift", "scale", "contrast", "impulse")

SEVERITY_TABLE = {
    # noise std added to every entry
    "additive_gaussian": (0.5, 1.0, 1.5, 2.0, 3.0),
    # per-dimension offset multiplier (offset entries are N(0, 1) draws)
    "mean_shift": (0.5, 1.0, 1.5, 2.0, 3.0),
    # multiplicative factor applied to every feature
    "scale": (1.25, 1.5, 2.0, 2.5, 3.0),
    # fraction of the deviation from the batch mean that survives
    "contrast": (0.8, 0.6, 0.45, 0.3, 0.2),
    # fraction of entries replaced by +/- IMPULSE_VALUE
    "impulse": (0.02, 0.05, 0.1, 0.2, 0.3),
}
IMPULSE_VALUE = 10.0


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 4000
    dims: int = 16
    n_classes: int = 5
    class_separation: float = 10.0
    noise_sigma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.dims < 1:
            raise ContractError(f"dims must be >= 1, got {self.dims}")
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_samples < self.n_classes:
            raise ContractError(f"n_samples ({self.n_samples}) must be at least n_classes ({self.n_classes})")
        if not self.class_separation > 0:
            raise ContractError(f"class_separation must be positive, got {self.class_separation}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be non-negative, got {self.noise_sigma}")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "mean_shift"
    severity: int = 5
    seed: int = 0
    scale: float = 1.0

    def validate(self) -> None:
        if self.kind not in CORRUPTIONS:
            raise ContractError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if not (isinstance(self.severity, (int, np.integer)) and 1 <= self.severity <= 5):
            raise ContractError(f"severity must be an integer in 1..5, got {self.severity!r}")
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale}")

    @property
    def magnitude(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise InconsistentDataError(f"features {self.x.shape} and labels {self.y.shape} disagree")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.x[idx], self.y[idx])

    def equals(self, other: "LabeledBatch") -> bool:
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Class centres: a regular simplex with edge ``class_separation``.

    The simplex is rotated into ``dims`` dimensions and translated so the
    data are not centred at the origin. When ``dims < n_classes - 1`` a
    random projection is used and rescaled so the closest pair of means
    sits exactly ``class_separation`` apart.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1])
    c, d = spec.n_classes, spec.dims
    eye = np.eye(c) - 1.0 / c
    basis, _ = np.linalg.qr(eye[:, : c - 1] if c > 1 else eye)
    simplex = eye @ basis  # [c, c-1], edges of length sqrt(2)
    if d >= c - 1:
        rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
        means = simplex @ rot[: c - 1]
        means *= spec.class_separation / np.sqrt(2.0)
    else:
        means = simplex @ rng.normal(size=(c - 1, d))
        dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
        dist[np.eye(c, dtype=bool)] = np.inf
        means *= spec.class_separation / dist.min()
    centre = rng.normal(size=d)
    centre *= spec.class_separation / np.linalg.norm(centre)
    return means + centre


def generate(spec: DatasetSpec) -> Tuple[LabeledBatch, LabeledBatch]:
    """Sample a balanced Gaussian mixture and split it 80/20 into train/test."""
    spec.validate()
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, 2])
    y = rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    x = means[y] + spec.noise_sigma * rng.normal(size=(spec.n_samples, spec.dims))
    n_train = int(round(0.8 * spec.n_samples))
    return LabeledBatch(x[:n_train], y[:n_train]), LabeledBatch(x[n_train:], y[n_train:])


def shift_offset(spec: CorruptionSpec, dims: int) -> np.ndarray:
    """The fixed per-dimension offset added by ``mean_shift``."""
    rng = np.random.default_rng([spec.seed, 101])
    return spec.magnitude * spec.scale * rng.normal(size=dims)


def impulse_count(spec: CorruptionSpec, n_entries: int) -> int:
    return int(round(spec.magnitude * n_entries))


def corrupt(batch: LabeledBatch, spec: CorruptionSpec) -> LabeledBatch:
    """Apply one corruption; labels and batch size are preserved."""
    spec.validate()
    x = batch.x
    m = spec.magnitude
    rng = np.random.default_rng([spec.seed, 202])
    if spec.kind == "additive_gaussian":
        out = x + m * spec.scale * rng.normal(size=x.shape)
    elif spec.kind == "mean_shift":
        out = x + shift_offset(spec, x.shape[1])
    elif spec.kind == "scale":
        out = x * m
    elif spec.kind == "contrast":
        mu = x.mean(axis=0)
        out = mu + (x - mu) * m
    else:
        out = x.copy()
        flat = out.reshape(-1)
        k = impulse_count(spec, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        flat[idx] = np.where(rng.random(k) < 0.5, -1.0, 1.0) * IMPULSE_VALUE * spec.scale
    return LabeledBatch(out, batch.y.copy())


def iter_batches(data: LabeledBatch, batch_size: int, n_batches: int, seed: int) -> Iterator[LabeledBatch]:
    """Yield ``n_batches`` batches, cycling through seeded permutations of ``data``."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > len(data):
        raise ContractError(f"batch_size {batch_size} exceeds the {len(data)} available samples")
    rng = np.random.default_rng([seed, 303])
    order = np.empty(0, dtype=np.int64)
    for _ in range(n_batches):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:batch_size], order[batch_size:]
        yield data.take(idx)


def make_stream(
    pool: LabeledBatch, corruption: Optional[CorruptionSpec], batch_size: int, n_batches: int, seed: int
) -> List[LabeledBatch]:
    """Corrupt a target pool once, then cut it into an online stream."""
    target = corrupt(pool, corruption) if corruption is not None else pool
    return list(iter_batches(target, batch_size, n_batches, seed))


# ---------------------------------------------------------------------------
# files

DS_MAGIC = b"ACDS"
DS_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def encode_dataset(batch: LabeledBatch, n_classes: int) -> bytes:
    if len(batch) and (batch.y.min() < 0 or batch.y.max() >= n_classes):
        raise InconsistentDataError(f"labels fall outside [0, {n_classes})")
    n, d = batch.x.shape
    return b"".join(
        [
            _HEADER.pack(DS_MAGIC, DS_VERSION, d, n_classes, n),
            np.ascontiguousarray(batch.x, dtype="<f8").tobytes(),
            np.ascontiguousarray(batch.y, dtype="<u4").tobytes(),
        ]
    )


def decode_dataset(buf: bytes) -> Tuple[LabeledBatch, int]:
    """Parse a dataset file. Returns the batch and its declared class count."""
    if len(buf) < _HEADER.size:
        if buf[:4] != DS_MAGIC[: len(buf[:4])]:
            raise FormatError("not a dataset file (bad magic)")
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    magic, version, dims, n_classes, count = _HEADER.unpack_from(buf)
    if magic != DS_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if version != DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    need = _HEADER.size + 8 * dims * count + 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"payload needs {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise InconsistentDataError(f"{len(buf) - need} trailing bytes after payload")
    off = _HEADER.size
    x = np.frombuffer(buf, dtype="<f8", count=dims * count, offset=off).reshape(count, dims)
    y = np.frombuffer(buf, dtype="<u4", count=count, offset=off + 8 * dims * count)
    if count and int(y.max()) >= n_classes:
        raise InconsistentDataError(f"label {int(y.max())} out of range for {n_classes} classes")
    return LabeledBatch(x.astype(np.float64), y.astype(np.int64)), n_classes


def save(batch: LabeledBatch, path, n_classes: int) -> None:
    Path(path).write_bytes(encode_dataset(batch, n_classes))


def load(path) -> LabeledBatch:
    return decode_dataset(Path(path).read_bytes())[0]


def to_csv(batch: LabeledBatch) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y"] + [f"x{i}" for i in range(batch.x.shape[1])])
    for xi, yi in zip(batch.x, batch.y):
        w.writerow([int(yi)] + [repr(float(v)) for v in xi])
    return buf.getvalue()


def from_csv(text: str) -> LabeledBatch:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0] or rows[0][0] != "y":
        raise FormatError("CSV header must start with 'y'")
    header = rows[0]
    dims = len(header) - 1
    if header[1:] != [f"x{i}" for i in range(dims)]:
        raise FormatError(f"unexpected CSV header {header}")
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body):
        if len(r) != dims + 1:
            raise InconsistentDataError(f"CSV row {i + 1} has {len(r)} fields, expected {dims + 1}")
    y = np.array([int(r[0]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), dims)
    return LabeledBatch(x, y)


def with_scale(spec: CorruptionSpec, dataset: DatasetSpec) -> CorruptionSpec:
    """Express corruption magnitudes in units of the dataset noise level."""
    return replace(spec, scale=dataset.noise_sigma if dataset.noise_sigma > 0 else 1.0)
