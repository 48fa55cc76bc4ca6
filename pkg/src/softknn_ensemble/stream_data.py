"""Embedding datasets and class-incremental stream scheduling.

Datasets are labeled fixed-dimension embedding collections. On disk they
live in a small binary container (magic ``EMBD``) or, for interoperability,
a CSV with a ``label,f0,f1,...`` header. Streams present the dataset as an
ordered sequence of batches: classes are grouped into disjoint splits,
every split's examples are shuffled and batched, each example appears
exactly once, and batches carry no task identifier.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .numerics import make_rng

__all__ = [
    "EmbeddingDataset",
    "StreamPlan",
    "SyntheticSpec",
    "load_embeddings",
    "save_embeddings",
    "generate_synthetic",
    "generate_synthetic_pair",
    "default_splits",
    "make_stream",
    "split_test_sets",
]

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")  # magic, version, M, K, count
_LABEL = struct.Struct("<I")


@dataclass
class EmbeddingDataset:
    """Labeled embeddings with a declared dimension and class count.

    ``features`` is (count, embed_dim) float64, ``labels`` is (count,)
    int64. Every declared class must be present at least once.
    """

    embed_dim: int
    n_classes: int
    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embed_dim < 1 or self.n_classes < 1:
            raise DataError("embed_dim and n_classes must be positive")
        if self.features.ndim != 2 or self.features.shape[1] != self.embed_dim:
            raise DataError(
                f"features must have shape (count, {self.embed_dim}), "
                f"got {self.features.shape}")
        if self.features.shape[0] == 0:
            raise DataError("dataset must contain at least one example")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels and features disagree in length")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite value in features")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise DataError(f"label out of range [0, {self.n_classes})")
        present = np.unique(self.labels)
        if present.shape[0] != self.n_classes:
            missing = sorted(set(range(self.n_classes)) - set(present.tolist()))
            raise DataError(f"classes without examples: {missing}")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class StreamPlan:
    """Ordered class splits plus batching and shuffling parameters."""

    splits: tuple[tuple[int, ...], ...]
    batch_size: int
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "splits",
            tuple(tuple(int(c) for c in split) for split in self.splits))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        seen: set[int] = set()
        for split in self.splits:
            if not split:
                raise ConfigError("empty split")
            overlap = seen.intersection(split)
            if overlap:
                raise ConfigError(f"classes in more than one split: {sorted(overlap)}")
            seen.update(split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian cluster stand-in for extractor features.

    Class centers are standard normal draws rescaled to ``center_norm``;
    examples add i.i.d. coordinate noise of ``noise_std`` on top.
    """

    n_classes: int
    embed_dim: int
    per_class: int
    center_norm: float = 1.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 1 or self.embed_dim < 1 or self.per_class < 1:
            raise ConfigError("n_classes, embed_dim and per_class must be positive")
        if self.center_norm <= 0.0:
            raise ConfigError(f"center_norm must be > 0, got {self.center_norm}")
        if self.noise_std < 0.0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")


def _record_dtype(m: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("values", "<f4", (m,))])


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    """Write the binary container; feature values are stored as float32."""
    path = Path(path)
    records = np.empty(len(ds), dtype=_record_dtype(ds.embed_dim))
    records["label"] = ds.labels.astype("<u4")
    records["values"] = ds.features.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBD_MAGIC, EMBD_VERSION, ds.embed_dim,
                              ds.n_classes, len(ds)))
        fh.write(records.tobytes())


def load_embeddings(path, name: str | None = None) -> EmbeddingDataset:
    """Read a dataset from an EMBD or CSV file (dispatch on extension).

    Stored float32 values are widened to float64. Raises ``DataError`` with
    a distinct message for each failure mode: bad magic, unsupported
    version, truncation, out-of-range labels, and non-finite values.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if path.suffix.lower() == ".csv":
        return _load_csv(path, name or path.stem)
    return _load_embd(path, name or path.stem)


def _load_embd(path: Path, name: str) -> EmbeddingDataset:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError("unexpected end of data in header")
    magic, version, m, k, count = _HEADER.unpack_from(raw, 0)
    if magic != EMBD_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {EMBD_MAGIC!r}")
    if version != EMBD_VERSION:
        raise DataError(f"unsupported version {version}")
    if m == 0 or k == 0:
        raise DataError("dimension mismatch: zero embed_dim or n_classes")
    record = _LABEL.size + 4 * m
    expected = _HEADER.size + record * count
    if len(raw) < expected:
        raise DataError("unexpected end of data")
    if len(raw) > expected:
        raise DataError(f"trailing bytes after {count} records")

    records = np.frombuffer(raw, dtype=_record_dtype(m), count=count,
                            offset=_HEADER.size)
    labels = records["label"].astype(np.int64)
    if np.any(labels >= k):
        bad = int(labels[labels >= k][0])
        raise DataError(f"label out of range: {bad} >= {k}")
    features = records["values"].astype(np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError("non-finite value in features")
    return EmbeddingDataset(embed_dim=m, n_classes=k, features=features,
                            labels=labels, name=name)


def _load_csv(path: Path, name: str) -> EmbeddingDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("unexpected end of data: empty CSV") from None
        if not header or header[0].strip() != "label":
            raise DataError("bad magic: CSV header must start with 'label'")
        m = len(header) - 1
        if m < 1:
            raise DataError("dimension mismatch: CSV has no feature columns")
        labels: list[int] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != m + 1:
                raise DataError(
                    f"dimension mismatch on line {line_no}: expected "
                    f"{m + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"unparsable value on line {line_no}: {exc}") from None
        if not rows:
            raise DataError("unexpected end of data: no CSV records")
    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError("non-finite value in features")
    label_arr = np.array(labels, dtype=np.int64)
    if np.any(label_arr < 0):
        raise DataError("label out of range: negative label")
    return EmbeddingDataset(embed_dim=m, n_classes=int(label_arr.max()) + 1,
                            features=features, labels=label_arr, name=name)


def _draw_centers(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    centers = rng.standard_normal((spec.n_classes, spec.embed_dim))
    centers *= spec.center_norm / np.linalg.norm(centers, axis=1)[:, None]
    return centers


def _draw_examples(rng: np.random.Generator, centers: np.ndarray,
                   per_class: int, noise_std: float,
                   ) -> tuple[np.ndarray, np.ndarray]:
    k, m = centers.shape
    features = np.empty((k * per_class, m))
    labels = np.repeat(np.arange(k), per_class)
    for c in range(k):
        block = centers[c] + noise_std * rng.standard_normal((per_class, m))
        features[c * per_class:(c + 1) * per_class] = block
    return features, labels


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Deterministic cluster dataset; equal seeds give identical data."""
    rng = make_rng(spec.seed)
    centers = _draw_centers(rng, spec)
    features, labels = _draw_examples(rng, centers, spec.per_class,
                                      spec.noise_std)
    return EmbeddingDataset(embed_dim=spec.embed_dim, n_classes=spec.n_classes,
                            features=features, labels=labels,
                            name=f"synthetic-{spec.seed}")


def generate_synthetic_pair(spec: SyntheticSpec, test_per_class: int,
                            ) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Train/test pair sharing the same class centers.

    The train half is draw-for-draw identical to ``generate_synthetic`` of
    the same spec; test examples are drawn afterwards from the same stream.
    """
    if test_per_class < 1:
        raise ConfigError(f"test_per_class must be >= 1, got {test_per_class}")
    rng = make_rng(spec.seed)
    centers = _draw_centers(rng, spec)
    train_f, train_y = _draw_examples(rng, centers, spec.per_class,
                                      spec.noise_std)
    test_f, test_y = _draw_examples(rng, centers, test_per_class,
                                    spec.noise_std)
    train = EmbeddingDataset(spec.embed_dim, spec.n_classes, train_f, train_y,
                             name=f"synthetic-{spec.seed}-train")
    test = EmbeddingDataset(spec.embed_dim, spec.n_classes, test_f, test_y,
                            name=f"synthetic-{spec.seed}-test")
    return train, test


def default_splits(n_classes: int, n_splits: int,
                   class_order: Sequence[int] | None = None,
                   ) -> tuple[tuple[int, ...], ...]:
    """Contiguous equal-size class blocks, optionally over a custom order.

    Ten classes in five splits give (0,1), (2,3), ... The class count must
    divide evenly; forgetting numbers depend on class order, so a custom
    order may be passed explicitly.
    """
    if class_order is None:
        order = list(range(n_classes))
    else:
        order = [int(c) for c in class_order]
        if sorted(order) != list(range(n_classes)):
            raise ConfigError(
                f"class_order must be a permutation of 0..{n_classes - 1}")
    if n_splits < 1 or n_classes % n_splits != 0:
        raise ConfigError(
            f"cannot divide {n_classes} classes into {n_splits} equal splits")
    per = n_classes // n_splits
    return tuple(tuple(order[i * per:(i + 1) * per]) for i in range(n_splits))


def _check_plan(ds: EmbeddingDataset, plan: StreamPlan) -> None:
    planned = set()
    for split in plan.splits:
        for c in split:
            if c < 0 or c >= ds.n_classes:
                raise ConfigError(f"split class {c} outside dataset range "
                                  f"[0, {ds.n_classes})")
        planned.update(split)
    present = set(np.unique(ds.labels).tolist())
    uncovered = present - planned
    if uncovered:
        raise ConfigError(f"classes missing from plan: {sorted(uncovered)}")


def make_stream(ds: EmbeddingDataset, plan: StreamPlan,
                ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (features, labels) batches for one pass over the dataset.

    Splits are presented in plan order; inside a split the examples are
    shuffled by the plan seed and cut into batches, the last of which may be
    short. Consuming the whole stream visits every example exactly once.
    """
    _check_plan(ds, plan)
    rng = make_rng(plan.shuffle_seed)
    for split in plan.splits:
        idx = np.flatnonzero(np.isin(ds.labels, split))
        idx = idx[rng.permutation(idx.shape[0])]
        for start in range(0, idx.shape[0], plan.batch_size):
            chunk = idx[start:start + plan.batch_size]
            yield ds.features[chunk], ds.labels[chunk]


def split_test_sets(ds: EmbeddingDataset, splits: Sequence[Sequence[int]],
                    ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group a test dataset by split for per-split evaluation."""
    out = []
    for split in splits:
        idx = np.flatnonzero(np.isin(ds.labels, list(split)))
        out.append((ds.features[idx], ds.labels[idx]))
    return out
