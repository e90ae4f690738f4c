"""Dataset ingestion: IDX binaries, CSV exports, scaling, splits and batching."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class DataFormatError(ValueError):
    pass


class DataConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class MinMaxStats:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, x: np.ndarray, clip: bool = True) -> np.ndarray:
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (x - self.lo) / safe, 0.0)
        if clip:
            out = np.clip(out, 0.0, 1.0)
        return out


@dataclass(frozen=True, eq=False)
class DatasetTable:
    name: str
    features: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int | None = None
    feature_names: list[str] | None = None
    label_names: list[str] | None = None
    scaling: MinMaxStats | None = field(default=None, repr=False)

    def __post_init__(self):
        x = self.features
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataConsistencyError(f"features must be a non-empty N x D matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataConsistencyError("features contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (x.shape[0],):
                raise DataConsistencyError(
                    f"{self.labels.shape[0]} labels for {x.shape[0]} rows")
            if self.n_classes is None:
                raise DataConsistencyError("labelled table needs n_classes")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataConsistencyError(f"labels outside [0, {self.n_classes})")
        if self.feature_names is not None and len(self.feature_names) != x.shape[1]:
            raise DataConsistencyError("feature_names length differs from column count")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def rows(self, idx: np.ndarray) -> "DatasetTable":
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class SplitSpec:
    train: DatasetTable
    test: DatasetTable
    validation_fraction: float = 0.1
    protocol: str = "pre-split"

    def __post_init__(self):
        if self.train.n_features != self.test.n_features:
            raise DataConsistencyError(
                f"train has {self.train.n_features} features, test has {self.test.n_features}")


# --- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = len(raw) - header
    if body != expected:
        raise DataFormatError(
            f"{path}: payload has {body} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> DatasetTable:
    """Read an IDX image/label pair (optionally gzipped) into a table scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    n = images.shape[0]
    features = images.reshape(n, -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    n_classes = int(y.max()) + 1 if n else 0
    return DatasetTable(name=name, features=features, labels=y, n_classes=max(n_classes, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N x rows x cols) and labels (N) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABEL_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


# --- CSV ---------------------------------------------------------------------

def load_csv(path, label_column: str | None = None, *, name: str | None = None,
             stats: MinMaxStats | None = None,
             label_names: list[str] | None = None) -> DatasetTable:
    """Load a headed CSV, min-max scale features and factor-encode labels.

    Pass ``stats`` and ``label_names`` from the training table when loading a
    test split so both share one scaling and one label encoding.
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if label_column is not None and label_column not in header:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column) if label_column is not None else None
        feat_pos = [i for i in range(len(header)) if i != label_pos]
        rows, raw_labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataFormatError(
                    f"{path}: line {lineno} has {len(rec)} fields, header has {len(header)}")
            vals = []
            for i in feat_pos:
                try:
                    vals.append(float(rec[i]))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric value {rec[i]!r} at line {lineno}, column {header[i]!r}"
                    ) from None
            rows.append(vals)
            if label_pos is not None:
                raw_labels.append(rec[label_pos])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    raw = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataFormatError(f"{path}: non-finite feature values")
    if stats is None:
        stats = MinMaxStats(raw.min(axis=0), raw.max(axis=0))
    features = stats.apply(raw, clip=True)

    labels = n_classes = None
    if label_pos is not None:
        names = list(label_names) if label_names is not None else []
        frozen = label_names is not None
        codes = {s: i for i, s in enumerate(names)}
        enc = []
        for s in raw_labels:
            if s not in codes:
                if frozen:
                    raise DataConsistencyError(f"{path}: label {s!r} not seen in training data")
                codes[s] = len(names)
                names.append(s)
            enc.append(codes[s])
        labels = np.array(enc, dtype=np.int64)
        label_names = names
        n_classes = max(len(names), 2)
    return DatasetTable(
        name=name or path.stem,
        features=features,
        labels=labels,
        n_classes=n_classes,
        feature_names=[header[i] for i in feat_pos],
        label_names=label_names,
        scaling=stats,
    )


def minmax_scale(table: DatasetTable, stats: MinMaxStats | None = None) -> DatasetTable:
    if stats is None:
        x = table.features
        stats = MinMaxStats(x.min(axis=0), x.max(axis=0))
    return replace(table, features=stats.apply(table.features), scaling=stats)


# --- splitting and batching --------------------------------------------------

def split_table(table: DatasetTable, test_fraction: float, rng: np.random.Generator,
                validation_fraction: float = 0.1) -> SplitSpec:
    """Seeded shuffle-split; the default protocol is 80/20."""
    n = table.n_rows
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    if not 0 < n_test < n:
        raise DataConsistencyError(f"cannot split {n} rows with test fraction {test_fraction}")
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return SplitSpec(train=table.rows(train_idx), test=table.rows(test_idx),
                     validation_fraction=validation_fraction,
                     protocol=f"seeded {1 - test_fraction:.0%}/{test_fraction:.0%} split")


def subsample(table: DatasetTable, n: int, rng: np.random.Generator) -> DatasetTable:
    if n >= table.n_rows:
        return table
    idx = np.sort(rng.choice(table.n_rows, size=n, replace=False))
    return table.rows(idx)


def make_batches(n_rows: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n_rows) if rng is not None else np.arange(n_rows)
    return [order[i:i + batch_size] for i in range(0, n_rows, batch_size)]


def column_subset(table: DatasetTable, indices) -> DatasetTable:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("column_subset needs at least one index")
    if idx.min() < 0 or idx.max() >= table.n_features:
        raise ValueError(f"feature index out of range [0, {table.n_features})")
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate feature indices")
    names = None if table.feature_names is None else [table.feature_names[i] for i in idx]
    scaling = None if table.scaling is None else MinMaxStats(table.scaling.lo[idx], table.scaling.hi[idx])
    return replace(table, features=table.features[:, idx], feature_names=names, scaling=scaling)


# --- registry ----------------------------------------------------------------

def load_registry(path) -> dict:
    path = Path(path)
    try:
        reg = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataFormatError(f"dataset registry {path} not found") from None
    except json.JSONDecodeError as e:
        raise DataFormatError(f"dataset registry {path}: {e}") from None
    base = path.parent
    out = {}
    for name, entry in reg.items():
        entry = dict(entry)
        for key in ("train_images", "train_labels", "test_images", "test_labels", "train", "test"):
            if key in entry and entry[key] is not None:
                p = Path(entry[key])
                entry[key] = str(p if p.is_absolute() else base / p)
        out[name] = entry
    return out


def resolve_dataset(registry: dict, name: str, seed: int = 0,
                    subset: int | None = None) -> SplitSpec:
    """Build train/test tables for a registry entry.

    Entries without a test file are split with a seeded 80/20 rule. ``subset``
    subsamples the training split only.
    """
    if name not in registry:
        raise KeyError(f"dataset {name!r} not in registry (known: {', '.join(sorted(registry))})")
    entry = registry[name]
    fmt = entry.get("format", "idx")
    if fmt == "idx":
        train = load_idx(entry["train_images"], entry["train_labels"], name=name)
        test = None
        if entry.get("test_images"):
            test = load_idx(entry["test_images"], entry["test_labels"], name=name)
    elif fmt == "csv":
        label_col = entry.get("label_column")
        train = load_csv(entry["train"], label_col, name=name)
        test = None
        if entry.get("test"):
            test = load_csv(entry["test"], label_col, name=name, stats=train.scaling,
                            label_names=train.label_names)
    else:
        raise DataFormatError(f"dataset {name!r}: unknown format {fmt!r}")

    declared = entry.get("n_classes")
    if declared is not None and train.labels is not None:
        observed = int(train.labels.max()) + 1
        if observed > declared:
            raise DataConsistencyError(
                f"dataset {name!r}: {observed} classes observed, {declared} declared")
        train = replace(train, n_classes=int(declared))
        if test is not None:
            test = replace(test, n_classes=int(declared))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xDA7A])))
    if test is None:
        split = split_table(train, 0.2, rng)
    else:
        split = SplitSpec(train=train, test=test)
    if subset is not None:
        split = replace(split, train=subsample(split.train, subset, rng),
                        protocol=split.protocol + f", train subset {min(subset, split.train.n_rows)}")
    return split
