"""Dataset ingestion and partitioning for vertically federated training.

Provides the MNIST IDX reader, a generic numeric-CSV reader, synthetic
blob data, vertical (column-wise) partitioning across guests, the
labeled-intersection split used for limited-overlap experiments, and
seeded batch iteration shared by all parties.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class Dataset:
    """Rows of features with optional class labels and stable entity ids.

    entity_ids identify samples across parties; two vertical views of the
    same underlying table share ids even though they hold different columns.
    """

    features: np.ndarray
    labels: np.ndarray | None
    entity_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64)
        if self.entity_ids.shape != (n,):
            raise ValueError(f"need {n} entity ids, got shape {self.entity_ids.shape}")
        if np.unique(self.entity_ids).size != n:
            raise ValueError("entity ids must be unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"need {n} labels, got shape {self.labels.shape}")
        self._row_of: dict[int, int] | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def rows_for(self, ids: np.ndarray) -> np.ndarray:
        """Row positions of the given entity ids, in the given order."""
        if self._row_of is None:
            self._row_of = {int(e): i for i, e in enumerate(self.entity_ids)}
        try:
            return np.array([self._row_of[int(e)] for e in ids], dtype=np.intp)
        except KeyError as missing:
            raise ValueError(f"entity id {missing} not in dataset") from None

    def take(self, ids: np.ndarray) -> "Dataset":
        rows = self.rows_for(ids)
        return Dataset(
            self.features[rows],
            None if self.labels is None else self.labels[rows],
            self.entity_ids[rows],
        )

    def columns(self, idx: np.ndarray) -> "Dataset":
        """Vertical view: selected feature columns, labels stripped."""
        return Dataset(self.features[:, idx], None, self.entity_ids)


def concat_rows(parts: list[Dataset]) -> Dataset:
    feats = np.concatenate([p.features for p in parts], axis=0)
    ids = np.concatenate([p.entity_ids for p in parts])
    if all(p.labels is not None for p in parts):
        labels = np.concatenate([p.labels for p in parts])
    else:
        labels = None
    return Dataset(feats, labels, ids)


# ---------------------------------------------------------------------------
# loaders


def _read_binary(path: str | Path) -> bytes:
    """Read a file, transparently handling gzip (by suffix or sibling .gz)."""
    p = Path(path)
    if not p.exists() and p.with_name(p.name + ".gz").exists():
        p = p.with_name(p.name + ".gz")
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = p.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse an IDX image/label file pair into a flat [0,1]-scaled dataset."""
    img = _read_binary(images_path)
    lab = _read_binary(labels_path)

    if len(img) < 16:
        raise DataFormatError(f"truncated IDX image file: {images_path}")
    magic, n, rows, cols = struct.unpack(">iiii", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"bad magic {magic} in {images_path}, expected {IDX_IMAGES_MAGIC}"
        )
    if len(img) != 16 + n * rows * cols:
        raise DataFormatError(
            f"truncated IDX image file: {images_path} declares {n} images of "
            f"{rows}x{cols} but holds {len(img) - 16} pixel bytes"
        )

    if len(lab) < 8:
        raise DataFormatError(f"truncated IDX label file: {labels_path}")
    lmagic, ln = struct.unpack(">ii", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"bad magic {lmagic} in {labels_path}, expected {IDX_LABELS_MAGIC}"
        )
    if len(lab) != 8 + ln:
        raise DataFormatError(f"truncated IDX label file: {labels_path}")
    if ln != n:
        raise DataFormatError(f"{n} images but {ln} labels")

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(features, labels, np.arange(n, dtype=np.int64))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(data_dir: str | Path) -> tuple[Dataset, Dataset]:
    """Load the standard train/test split from a directory of IDX files."""
    d = Path(data_dir)
    train = load_mnist_idx(d / MNIST_FILES["train"][0], d / MNIST_FILES["train"][1])
    test = load_mnist_idx(d / MNIST_FILES["test"][0], d / MNIST_FILES["test"][1])
    return train, test


def minmax_normalize(
    x: np.ndarray, lo: np.ndarray | None = None, hi: np.ndarray | None = None
) -> np.ndarray:
    """Scale each column to [0,1]; constant columns map to 0."""
    if lo is None:
        lo = x.min(axis=0)
    if hi is None:
        hi = x.max(axis=0)
    span = hi - lo
    safe = np.where(span == 0.0, 1.0, span)
    out = np.clip((x - lo) / safe, 0.0, 1.0)
    return np.where(span == 0.0, 0.0, out)


def load_csv(
    path: str | Path, label_column: int | None = None, header: bool = False
) -> Dataset:
    """Read a rectangular numeric CSV, min-max scaling every feature column.

    label_column (if given) is removed from the features and returned as
    integer class labels.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            # empty inputs raise DataFormatError below; no need to warn first
            warnings.simplefilter("ignore", UserWarning)
            raw = np.genfromtxt(
                path, delimiter=",", skip_header=1 if header else 0,
                dtype=np.float64,
            )
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if raw.ndim == 1:
        raw = raw[None, :] if raw.size else raw.reshape(0, 0)
    if raw.size == 0:
        raise DataFormatError(f"{path}: no data rows")
    if np.isnan(raw).any():
        bad = np.argwhere(np.isnan(raw))[0]
        raise DataFormatError(
            f"{path}: non-numeric or missing cell at row {bad[0]}, column {bad[1]}"
        )

    labels = None
    if label_column is not None:
        if not -raw.shape[1] <= label_column < raw.shape[1]:
            raise DataFormatError(
                f"{path}: label column {label_column} out of range for "
                f"{raw.shape[1]} columns"
            )
        lab = raw[:, label_column]
        if not np.all(lab == np.round(lab)):
            raise DataFormatError(f"{path}: label column contains non-integers")
        labels = lab.astype(np.int64)
        raw = np.delete(raw, label_column % raw.shape[1], axis=1)

    return Dataset(
        minmax_normalize(raw), labels, np.arange(raw.shape[0], dtype=np.int64)
    )


def make_blob_data(
    n_samples: int,
    n_features: int,
    n_classes: int,
    seed: int,
    test_fraction: float = 0.2,
) -> tuple[Dataset, Dataset]:
    """Synthetic Gaussian-cluster classification data, split and [0,1]-scaled.

    Normalization bounds come from the training rows only.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must lie in (0, 1), got {test_fraction}")
    x, y = make_blobs(
        n_samples=n_samples,
        n_features=n_features,
        centers=n_classes,
        cluster_std=1.5,
        # make_blobs only accepts 32-bit seeds; fold wider ones down
        random_state=int(np.random.SeedSequence([seed]).generate_state(1)[0]),
    )
    n_test = max(1, int(round(n_samples * test_fraction)))
    n_train = n_samples - n_test
    if n_train < 1:
        raise ConfigError("test fraction leaves no training rows")
    lo, hi = x[:n_train].min(axis=0), x[:n_train].max(axis=0)
    train = Dataset(
        minmax_normalize(x[:n_train], lo, hi),
        y[:n_train],
        np.arange(n_train, dtype=np.int64),
    )
    test = Dataset(
        minmax_normalize(x[n_train:], lo, hi),
        y[n_train:],
        np.arange(n_train, n_samples, dtype=np.int64),
    )
    return train, test


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class VerticalPartitionSpec:
    """Disjoint per-guest feature-column index sets."""

    feature_sets: tuple[np.ndarray, ...]

    def validate(self, n_features: int) -> None:
        seen: set[int] = set()
        for i, fs in enumerate(self.feature_sets):
            cols = {int(c) for c in fs}
            if len(cols) != len(fs):
                raise ConfigError(f"guest {i} feature set has duplicates")
            if cols & seen:
                raise ConfigError(f"guest {i} feature set overlaps an earlier one")
            if cols and (min(cols) < 0 or max(cols) >= n_features):
                raise ConfigError(
                    f"guest {i} feature indices out of range for D={n_features}"
                )
            seen |= cols


def even_bands(n_features: int, n_guests: int) -> VerticalPartitionSpec:
    """Contiguous column bands, as even as possible, first bands get extras."""
    if n_guests < 1:
        raise ConfigError(f"need at least one guest, got {n_guests}")
    if n_features < n_guests:
        raise ConfigError(f"{n_features} features cannot cover {n_guests} guests")
    sizes = [n_features // n_guests] * n_guests
    for i in range(n_features % n_guests):
        sizes[i] += 1
    sets = []
    start = 0
    for s in sizes:
        sets.append(np.arange(start, start + s, dtype=np.int64))
        start += s
    return VerticalPartitionSpec(tuple(sets))


def vertical_split(d: Dataset, spec: VerticalPartitionSpec) -> list[Dataset]:
    """Per-guest column views; labels stay with the full dataset only."""
    spec.validate(d.n_features)
    return [d.columns(fs) for fs in spec.feature_sets]


@dataclass(frozen=True)
class IntersectionSpec:
    """Limited-overlap construction: how many labeled rows all parties share,
    and how the rest are windowed across guests."""

    labeled_count: int
    n_guests: int
    seed: int


def build_intersection_split(
    d: Dataset, spec: IntersectionSpec
) -> tuple[Dataset, list[Dataset]]:
    """Split rows into a shared labeled intersection plus per-guest windows.

    The first labeled_count entities in canonical id order form the
    intersection; the remaining entities are shuffled by seed and dealt into
    equal windows, one per guest, dropping any remainder. A guest's local
    training rows are its window plus the intersection.
    """
    n = len(d)
    if not 0 < spec.labeled_count < n:
        raise ConfigError(
            f"labeled_count must lie in (0, {n}) for this dataset, "
            f"got {spec.labeled_count}"
        )
    if spec.n_guests < 1:
        raise ConfigError(f"need at least one guest, got {spec.n_guests}")

    order = np.sort(d.entity_ids)
    aligned_ids = order[: spec.labeled_count]
    rest = order[spec.labeled_count :].copy()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, len(rest)]))
    rng.shuffle(rest)

    window = len(rest) // spec.n_guests
    aligned = d.take(aligned_ids)
    if aligned.labels is None:
        raise ConfigError("intersection split needs a labeled dataset")
    windows = []
    for i in range(spec.n_guests):
        ids = rest[i * window : (i + 1) * window]
        part = d.take(ids)
        windows.append(Dataset(part.features, None, part.entity_ids))
    return aligned, windows


def align_entities(id_sets: list[np.ndarray]) -> np.ndarray:
    """Sorted intersection of all parties' entity ids."""
    if not id_sets:
        raise ConfigError("no entity-id sets to align")
    common = np.asarray(id_sets[0], dtype=np.int64)
    for ids in id_sets[1:]:
        common = np.intersect1d(common, np.asarray(ids, dtype=np.int64))
    if common.size == 0:
        raise ConfigError("parties share no entities; nothing to train on")
    return np.sort(common)


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchPlan:
    """Seeded epoch-wise shuffling of a fixed entity-id population.

    Guests holding equal plans (same ids, size, seed) iterate row-aligned
    batches, which stands in for a coordinator broadcasting entity order.
    """

    entity_ids: np.ndarray
    batch_size: int
    seed: int

    def __post_init__(self):
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64)
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.entity_ids.size == 0:
            raise ConfigError("a batch plan needs at least one entity")

    def ordering(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return rng.permutation(self.entity_ids)

    def n_batches(self) -> int:
        n = self.entity_ids.size
        return (n + self.batch_size - 1) // self.batch_size


def make_batches(plan: BatchPlan, d: Dataset, epoch: int = 0) -> list[np.ndarray]:
    """Entity-id batches for one epoch; the final batch may run short."""
    order = plan.ordering(epoch)
    d.rows_for(order)  # fails fast on id mismatch
    return [
        order[i : i + plan.batch_size] for i in range(0, order.size, plan.batch_size)
    ]
