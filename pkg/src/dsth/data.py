"""Datasets, label sets, splits and the on-disk matrix/label formats.

Matrices are kept column-per-sample (``d x N``) everywhere.  On disk they
are stored as float32, row-major; in memory they are float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DMAT_MAGIC = b"DMAT"
DLBL_MAGIC = b"DLBL"
_DMAT_HEADER = struct.Struct("<4sBBHII")
_U32_MAX = 2**32 - 1


class FormatError(ValueError):
    """Raised when a data file does not conform to its binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def feature_matrix(values) -> np.ndarray:
    """Validate ``values`` as a feature matrix and return a read-only float64 copy.

    A feature matrix has at least one row and one column and only finite
    entries.  Column ``n`` is the feature vector of sample ``n``.
    """
    m = np.array(values, dtype=np.float64, copy=True)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"feature matrix must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("feature matrix contains non-finite values")
    m.setflags(write=False)
    return m


def write_matrix(m, path) -> None:
    """Write a matrix in DMAT format (values rounded to float32)."""
    m = feature_matrix(m)
    rows, cols = m.shape
    if rows > _U32_MAX or cols > _U32_MAX:
        raise ValueError(f"matrix dimensions {m.shape} exceed u32 range")
    header = _DMAT_HEADER.pack(DMAT_MAGIC, 1, 0, 0, rows, cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a DMAT file, returning a validated float64 feature matrix."""
    data = Path(path).read_bytes()
    if len(data) < _DMAT_HEADER.size:
        raise FormatError("truncated DMAT header", len(data))
    magic, version, dtype, reserved, rows, cols = _DMAT_HEADER.unpack_from(data)
    if magic != DMAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DMAT_MAGIC!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}", 5)
    if reserved != 0:
        raise FormatError("reserved bytes must be zero", 6)
    if rows == 0 or cols == 0:
        raise FormatError(f"empty dimension {rows}x{cols}", 8)
    expected = _DMAT_HEADER.size + 4 * rows * cols
    if expected > len(data):
        raise FormatError(
            f"payload truncated: header declares {rows}x{cols} "
            f"({expected} bytes) but file has {len(data)}",
            len(data),
        )
    if expected < len(data):
        raise FormatError("trailing bytes after payload", expected)
    values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_DMAT_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value", _DMAT_HEADER.size + 4 * int(bad[0]))
    return feature_matrix(values.reshape(rows, cols).astype(np.float64))


@dataclass(frozen=True)
class LabelSet:
    """Per-sample sets of non-negative integer label ids."""

    sets: tuple[frozenset[int], ...]

    def __post_init__(self):
        for i, s in enumerate(self.sets):
            if not s:
                raise ValueError(f"sample {i} has no labels")
            if any(int(v) < 0 for v in s):
                raise ValueError(f"sample {i} has a negative label id")

    @classmethod
    def from_iterables(cls, labels: Iterable[Iterable[int]]) -> "LabelSet":
        return cls(tuple(frozenset(int(v) for v in s) for s in labels))

    @classmethod
    def from_classes(cls, classes: Sequence[int]) -> "LabelSet":
        """Single-category labels, one class id per sample."""
        return cls(tuple(frozenset([int(c)]) for c in classes))

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, i):
        return self.sets[i]

    def subset(self, ids) -> "LabelSet":
        return LabelSet(tuple(self.sets[int(i)] for i in ids))

    def indicator(self, n_labels: int | None = None) -> np.ndarray:
        """Dense ``count x n_labels`` boolean membership matrix."""
        if n_labels is None:
            n_labels = 1 + max(max(s) for s in self.sets)
        out = np.zeros((len(self.sets), n_labels), dtype=bool)
        for i, s in enumerate(self.sets):
            out[i, list(s)] = True
        return out


def is_relevant(a, b) -> bool:
    """True iff the two label sets share at least one label."""
    a, b = frozenset(a), frozenset(b)
    if not a or not b:
        raise ValueError("label sets must be non-empty")
    return not a.isdisjoint(b)


def write_labels(labels: LabelSet, path) -> None:
    """Write labels in DLBL format."""
    parts = [DLBL_MAGIC, struct.pack("<BI", 1, len(labels))]
    for s in labels.sets:
        ids = sorted(s)
        parts.append(struct.pack("<H", len(ids)))
        parts.append(np.asarray(ids, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_labels(path) -> LabelSet:
    data = Path(path).read_bytes()
    if len(data) < 9:
        raise FormatError("truncated DLBL header", len(data))
    if data[:4] != DLBL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DLBL_MAGIC!r}", 0)
    version, count = struct.unpack_from("<BI", data, 4)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 9
    sets = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated label count", offset)
        (n,) = struct.unpack_from("<H", data, offset)
        if n == 0:
            raise FormatError("sample with zero labels", offset)
        offset += 2
        if offset + 4 * n > len(data):
            raise FormatError("truncated label ids", offset)
        ids = np.frombuffer(data, dtype="<u4", count=n, offset=offset)
        sets.append(frozenset(int(v) for v in ids))
        offset += 4 * n
    if offset != len(data):
        raise FormatError("trailing bytes after labels", offset)
    return LabelSet(tuple(sets))


@dataclass(frozen=True)
class Dataset:
    """Paired visual/text features with labels.

    ``mismatched`` is only set by :func:`synthesize_dataset` and flags the
    samples whose text was drawn around another class's text centroid.
    """

    visual: np.ndarray
    text: np.ndarray
    labels: LabelSet
    mismatched: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "visual", feature_matrix(self.visual))
        object.__setattr__(self, "text", feature_matrix(self.text))
        n = self.visual.shape[1]
        if self.text.shape[1] != n or len(self.labels) != n:
            raise ValueError(
                f"sample counts disagree: visual {n}, text {self.text.shape[1]}, "
                f"labels {len(self.labels)}"
            )

    @property
    def n(self) -> int:
        return self.visual.shape[1]

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=np.intp)
        return Dataset(self.visual[:, ids], self.text[:, ids], self.labels.subset(ids))


@dataclass(frozen=True)
class DatasetSplit:
    database_ids: np.ndarray
    query_ids: np.ndarray
    training_ids: np.ndarray


def split_dataset(d: Dataset | int, n_query: int, n_train: int, seed: int) -> DatasetSplit:
    """Randomly hold out queries, use the rest as database, train on a database subset.

    ``d`` may be a dataset or just its sample count; the split depends only
    on the count, the requested sizes and the seed.
    """
    n = d if isinstance(d, int) else d.n
    if n_query < 0 or n_train < 0:
        raise ValueError("counts must be non-negative")
    if n_query + 1 > n:
        raise ValueError(f"n_query={n_query} leaves an empty database (N={n})")
    if n_train > n - n_query:
        raise ValueError(f"n_train={n_train} exceeds database size {n - n_query}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    query = np.sort(perm[:n_query])
    database = np.sort(perm[n_query:])
    train = np.sort(rng.choice(database, size=n_train, replace=False))
    return DatasetSplit(database_ids=database, query_ids=query, training_ids=train)


def synthesize_dataset(
    n_classes: int,
    per_class: int,
    d_x: int,
    d_y: int,
    noise: float,
    cross_modal_consistency: float,
    seed: int,
    text_noise: float | None = None,
) -> Dataset:
    """Gaussian class clusters in a visual and a paired text space.

    Class centroids are standard normal in each space, recentred so they
    average to zero.  ``noise`` (and ``text_noise``, defaulting to
    ``noise``) is the per-coordinate standard deviation around a centroid.
    ``floor((1 - cross_modal_consistency) * N)`` samples get the text
    centroid of a different, uniformly chosen class.
    """
    if min(n_classes, per_class, d_x, d_y) < 1:
        raise ValueError("counts and dimensions must be >= 1")
    if noise < 0 or (text_noise is not None and text_noise < 0):
        raise ValueError("noise must be non-negative")
    if not 0.0 <= cross_modal_consistency <= 1.0:
        raise ValueError("cross_modal_consistency must lie in [0, 1]")
    if text_noise is None:
        text_noise = noise
    rng = np.random.default_rng(seed)
    n = n_classes * per_class
    vis_centroids = rng.standard_normal((d_x, n_classes))
    txt_centroids = rng.standard_normal((d_y, n_classes))
    vis_centroids -= vis_centroids.mean(axis=1, keepdims=True)
    txt_centroids -= txt_centroids.mean(axis=1, keepdims=True)

    classes = np.repeat(np.arange(n_classes), per_class)
    text_class = classes.copy()
    mismatched = np.zeros(n, dtype=bool)
    n_mismatch = math.floor((1.0 - cross_modal_consistency) * n + 1e-9)
    if n_classes > 1 and n_mismatch > 0:
        flip = rng.choice(n, size=n_mismatch, replace=False)
        shift = rng.integers(1, n_classes, size=n_mismatch)
        text_class[flip] = (classes[flip] + shift) % n_classes
        mismatched[flip] = True

    visual = vis_centroids[:, classes] + noise * rng.standard_normal((d_x, n))
    text = txt_centroids[:, text_class] + text_noise * rng.standard_normal((d_y, n))
    return Dataset(visual, text, LabelSet.from_classes(classes), mismatched=mismatched)
