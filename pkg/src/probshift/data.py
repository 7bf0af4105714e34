"""Dataset ingestion: synthetic generators, delimited text and IDX files."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs

from .errors import ContractError, ParseError

SYNTHETIC_DEFAULTS = {
    "blobs": dict(n_samples=2000, n_classes=4, n_features=8, cluster_std=2.0, clusters_per_class=1),
    "multiblobs": dict(n_samples=8000, n_classes=8, n_features=8, cluster_std=1.5, clusters_per_class=4),
}


@dataclass
class DataSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    def __post_init__(self):
        if len(self.x_train) == 0:
            raise ContractError("training split is empty")


def synthetic_blobs(n_samples: int = 2000, n_classes: int = 4, n_features: int = 8, cluster_std: float = 2.0,
                    clusters_per_class: int = 1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters; with several clusters per class the task is not linear."""
    n_centers = n_classes * clusters_per_class
    x, cluster = make_blobs(n_samples=n_samples, n_features=n_features, centers=n_centers,
                            cluster_std=cluster_std, center_box=(-5.0, 5.0), random_state=seed)
    return x, (cluster % n_classes).astype(np.int64)


def read_delimited(path: str | Path, delimiter: str | None = None, n_classes: int | None = None,
                   skip_header: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Rows of numeric features followed by an integer label in the last column."""
    path = Path(path)
    if delimiter is None:
        delimiter = "\t" if path.suffix in (".tsv", ".tab") else ","
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ParseError(f"{path}:{lineno}: need at least one feature and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(feats)):
                raise ParseError(f"{path}:{lineno}: non-finite feature")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    _check_labels(y, n_classes)
    return np.asarray(rows, dtype=np.float64), y


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Read one IDX file (the MNIST container format), gzip allowed."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ParseError(f"{path}: bad IDX magic")
    dtype, ndim = raw[2], raw[3]
    if dtype not in _IDX_TYPES:
        raise ParseError(f"{path}: unknown IDX element type 0x{dtype:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    dt = np.dtype(_IDX_TYPES[dtype])
    if len(raw) - header != count * dt.itemsize:
        raise ParseError(f"{path}: expected {count} elements of {dt.itemsize} bytes after header")
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(shape)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    codes = {v: k for k, v in _IDX_TYPES.items()}
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder(">").str.replace("|", ">")
    if dt not in codes:
        raise ContractError(f"dtype {arr.dtype} has no IDX code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, codes[dt], arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dt).tobytes())


def _check_labels(y: np.ndarray, n_classes: int | None) -> None:
    if y.min() < 0:
        raise ValueError(f"negative label {y.min()}")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} out of range for {n_classes} classes")


def split_data(x: np.ndarray, y: np.ndarray, train_fraction: float = 0.8, seed: int = 0,
               n_classes: int | None = None, standardize: bool = True) -> DataSplit:
    """Seeded shuffle, train/val split and z-scoring with training statistics."""
    if not 0 < train_fraction <= 1:
        raise ContractError("train fraction must be in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ContractError(f"{len(x)} feature rows but {len(y)} labels")
    if not np.all(np.isfinite(x)):
        raise ParseError("features must be finite")
    _check_labels(y, n_classes)
    order = np.random.default_rng(seed).permutation(len(x))
    n_train = int(round(train_fraction * len(x)))
    tr, va = order[:n_train], order[n_train:]
    x_tr, x_va = x[tr], x[va]
    if standardize:
        mu = x_tr.mean(axis=0)
        sd = x_tr.std(axis=0)
        sd[sd == 0] = 1.0
        x_tr = (x_tr - mu) / sd
        x_va = (x_va - mu) / sd
    return DataSplit(x_tr, y[tr], x_va, y[va], n_classes or int(y.max()) + 1)


def ingest(source: str | dict, train_fraction: float = 0.8, seed: int = 0, n_classes: int | None = None,
           **options) -> DataSplit:
    """Load a dataset and split it.

    ``source`` is one of

    * ``"synthetic:blobs"`` / ``"synthetic:multiblobs"`` or a dict
      ``{"synthetic": name, **generator options}``,
    * a delimited text file (``.csv``, ``.tsv``, ``.txt``) whose last
      column is the label,
    * ``"idx:<images>,<labels>"`` for a pair of IDX files.
    """
    if isinstance(source, dict):
        options = {**source, **options}
        name = options.pop("synthetic", None)
        if name is None:
            raise ContractError("dict sources must name a synthetic generator")
        source = f"synthetic:{name}"
    if source.startswith("synthetic:"):
        name = source.split(":", 1)[1]
        if name not in SYNTHETIC_DEFAULTS:
            raise ContractError(f"unknown synthetic dataset {name!r}")
        params = {**SYNTHETIC_DEFAULTS[name], **options}
        params.setdefault("seed", seed)
        x, y = synthetic_blobs(**params)
        return split_data(x, y, train_fraction, seed, params["n_classes"])
    if source.startswith("idx:"):
        images, labels = source[4:].split(",")
        x = read_idx(images).astype(np.float64)
        y = read_idx(labels).astype(np.int64).reshape(-1)
        x = x.reshape(len(x), -1)
        if len(x) != len(y):
            raise ParseError(f"{len(x)} images but {len(y)} labels")
        return split_data(x, y, train_fraction, seed, n_classes)
    x, y = read_delimited(source, n_classes=n_classes, **options)
    return split_data(x, y, train_fraction, seed, n_classes)


def linear_probe_accuracy(data: DataSplit) -> float:
    """Validation accuracy of a least-squares one-vs-rest linear classifier."""
    xb = np.hstack([data.x_train, np.ones((len(data.x_train), 1))])
    targets = np.eye(data.n_classes)[data.y_train]
    coef, *_ = np.linalg.lstsq(xb, targets, rcond=None)
    xv = np.hstack([data.x_val, np.ones((len(data.x_val), 1))])
    return float(np.mean(np.argmax(xv @ coef, axis=1) == data.y_val))
