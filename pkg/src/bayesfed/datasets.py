"""Synthetic data, delimited-file ingestion and client partitioning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetParseError, InvalidArgumentError, PartitionInfeasibleError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.size:
            raise InvalidArgumentError(f"{x.shape[0]} feature rows for {y.size} labels")
        if y.size == 0:
            raise InvalidArgumentError("dataset is empty")
        if np.any(y < 0) or np.any(y >= self.class_count):
            raise InvalidArgumentError(f"labels must lie in [0, {self.class_count})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for k, idx in enumerate(self.assignments):
            if not idx:
                raise InvalidArgumentError(f"client {k} received no data")
            if seen.intersection(idx) or len(set(idx)) != len(idx):
                raise InvalidArgumentError("partition index lists overlap")
            seen.update(idx)

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> "PartitionPlan":
        return cls(tuple(tuple(int(i) for i in sorted(lst)) for lst in lists))

    def __len__(self) -> int:
        return len(self.assignments)

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def client_data(self, ds: LabeledDataset) -> list[LabeledDataset]:
        return [ds.subset(a) for a in self.assignments]


def lattice_centers(n_classes: int, dim: int, spacing: float = 1.0) -> np.ndarray:
    """First ``n_classes`` points of a centred integer grid, row-major order."""
    side = max(2, math.ceil(n_classes ** (1.0 / dim) - 1e-9))
    while side ** dim < n_classes:
        side += 1
    grid = np.array(np.unravel_index(np.arange(n_classes), (side,) * dim)).T.astype(np.float64)
    return spacing * (grid - (side - 1) / 2.0)


def generate_blobs(n_classes: int, dim: int, per_class_n: int, spread: float, seed: int,
                   spacing: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian blobs around lattice centres; class-sorted rows."""
    if n_classes < 2 or dim < 1 or per_class_n < 1:
        raise InvalidArgumentError("need C >= 2, d >= 1 and per_class_n >= 1")
    if spread < 0:
        raise InvalidArgumentError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = lattice_centers(n_classes, dim, spacing)
    noise = rng.standard_normal((n_classes, per_class_n, dim)) * spread
    x = (centers[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(n_classes), per_class_n)
    return LabeledDataset(x, y, n_classes)


@dataclass(frozen=True)
class DelimitedSchema:
    """Comma-separated rows: feature columns, integer label last."""

    has_header: bool = False
    n_features: int | None = None
    class_count: int | None = None
    delimiter: str = ","


def load_delimited(path: str | Path, schema: DelimitedSchema = DelimitedSchema()) -> LabeledDataset:
    path = Path(path)
    rows: list[list[float]] = []
    labels: list[int] = []
    width = schema.n_features
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.has_header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DatasetParseError("need at least one feature and a label", lineno)
            if width is None:
                width = len(row) - 1
            if len(row) - 1 != width:
                raise DatasetParseError(f"expected {width} features, found {len(row) - 1}", lineno)
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise DatasetParseError(f"non-numeric feature ({exc})", lineno) from None
            label_text = row[-1].strip()
            try:
                label = int(label_text)
            except ValueError:
                raise DatasetParseError(f"label {label_text!r} is not an integer", lineno) from None
            if label < 0 or (schema.class_count is not None and label >= schema.class_count):
                raise InvalidArgumentError(f"line {lineno}: unknown label {label}")
            rows.append(feats)
            labels.append(label)
    if not labels:
        raise InvalidArgumentError(f"{path} holds no examples")
    class_count = schema.class_count if schema.class_count is not None else max(labels) + 1
    return LabeledDataset(np.array(rows), np.array(labels), max(class_count, 2))


def save_delimited(ds: LabeledDataset, path: str | Path, header: bool = False) -> None:
    """Write ``ds`` so that ``load_delimited`` reproduces it exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for feats, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in feats] + [int(label)])


def _check_k(ds: LabeledDataset, k: int) -> None:
    if k < 1:
        raise InvalidArgumentError("need at least one client")
    if len(ds) < k:
        raise InvalidArgumentError(f"{len(ds)} examples cannot cover {k} clients")


def partition_iid(ds: LabeledDataset, k: int, seed: int) -> PartitionPlan:
    """Deal each class's shuffled indices round-robin; the dealer carries over classes."""
    _check_k(ds, k)
    rng = np.random.default_rng(seed)
    lists: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for i in idx:
            lists[cursor % k].append(int(i))
            cursor += 1
    return PartitionPlan.from_lists(lists)


def partition_2class(ds: LabeledDataset, k: int, seed: int,
                     max_retries: int = 1000) -> PartitionPlan:
    """Cut class-sorted data into 2K equal shards; give each client two classes."""
    _check_k(ds, k)
    c = ds.class_count
    if (2 * k) % c:
        raise InvalidArgumentError(f"2K = {2 * k} shards cannot be spread evenly over {c} classes")
    shards_per_class = 2 * k // c
    counts = ds.class_counts()
    if np.any(counts % shards_per_class) or np.any(counts == 0):
        raise InvalidArgumentError(
            f"every class size must be a positive multiple of {shards_per_class}; "
            f"got class sizes {counts.tolist()}")
    if np.unique(counts).size != 1:
        raise InvalidArgumentError(f"class sizes must be equal to give equal shards: {counts.tolist()}")
    if shards_per_class > k:
        raise PartitionInfeasibleError(f"{shards_per_class} shards per class exceed {k} clients")
    rng = np.random.default_rng(seed)
    shards: list[np.ndarray] = []
    shard_class: list[int] = []
    for cls in range(c):
        idx = rng.permutation(np.flatnonzero(ds.labels == cls))
        for piece in np.split(idx, shards_per_class):
            shards.append(piece)
            shard_class.append(cls)
    shard_class_arr = np.array(shard_class)
    for _ in range(max_retries):
        order = rng.permutation(2 * k).reshape(k, 2)
        if np.all(shard_class_arr[order[:, 0]] != shard_class_arr[order[:, 1]]):
            return PartitionPlan.from_lists(
                [np.concatenate([shards[a], shards[b]]).tolist() for a, b in order])
    raise PartitionInfeasibleError(
        f"no two-class assignment found after {max_retries} attempts")


def partition_dirichlet(ds: LabeledDataset, k: int, alpha: float, seed: int) -> PartitionPlan:
    """Split every class across clients with Dirichlet(alpha) proportions."""
    _check_k(ds, k)
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    rng = np.random.default_rng(seed)
    lists: list[list[int]] = [[] for _ in range(k)]
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(k, alpha))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, piece in enumerate(np.split(idx, cuts)):
            lists[client].extend(int(i) for i in piece)
    repairs = 0
    for client in range(k):
        if not lists[client]:
            donor = max(range(k), key=lambda j: (len(lists[j]), -j))
            lists[client].append(lists[donor].pop())
            repairs += 1
    if repairs:
        log.info("dirichlet partition: topped up %d empty clients", repairs)
    return PartitionPlan.from_lists(lists)


def stratified_split(ds: LabeledDataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified draw of ``fraction`` of the indices; returns (taken, rest)."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    taken: list[np.ndarray] = []
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        taken.append(idx[:int(round(fraction * idx.size))])
    chosen = np.sort(np.concatenate(taken))
    rest = np.setdiff1d(np.arange(len(ds)), chosen)
    return chosen, rest
