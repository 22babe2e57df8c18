"""Tabular schema, CSV ingestion, quantile encoding and CV splitting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

NUMERICAL = "numerical"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    """Raised when a schema or a data file violates the declared schema."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def cardinality(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class TabularSchema:
    features: tuple[Feature, ...]
    protected: str
    target: str | None = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        for f in self.features:
            if f.kind not in (NUMERICAL, CATEGORICAL):
                raise SchemaError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.is_categorical:
                if len(f.categories) < 2:
                    raise SchemaError(f"categorical feature {f.name!r} needs >= 2 categories")
                if len(set(f.categories)) != len(f.categories):
                    raise SchemaError(f"categorical feature {f.name!r} has duplicate categories")
        if self.protected not in names:
            raise SchemaError(f"protected feature {self.protected!r} not among features")
        prot = self.feature(self.protected)
        if not prot.is_categorical or prot.cardinality != 2:
            raise SchemaError("protected feature must be categorical with exactly 2 values")
        if self.target is not None:
            if self.target not in names:
                raise SchemaError(f"target {self.target!r} not among features")
            if self.target == self.protected:
                raise SchemaError("target must differ from the protected feature")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def k(self) -> int:
        return len(self.features)

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def protected_index(self) -> int:
        return self.index(self.protected)

    @property
    def numerical_indices(self) -> list[int]:
        return [j for j, f in enumerate(self.features) if not f.is_categorical]

    @property
    def categorical_indices(self) -> list[int]:
        return [j for j, f in enumerate(self.features) if f.is_categorical]

    def to_dict(self) -> dict:
        return {
            "features": [
                {"name": f.name, "kind": f.kind, "categories": list(f.categories)}
                if f.is_categorical
                else {"name": f.name, "kind": f.kind}
                for f in self.features
            ],
            "protected": self.protected,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        try:
            feats = tuple(
                Feature(f["name"], f["kind"], tuple(str(c) for c in f.get("categories") or ()))
                for f in d["features"]
            )
            return cls(feats, d["protected"], d.get("target"))
        except KeyError as exc:
            raise SchemaError(f"schema document missing key {exc}") from None


def load_schema(path: str | Path) -> TabularSchema:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"schema file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return TabularSchema.from_dict(json.load(fh))


def save_schema(schema: TabularSchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)


@dataclass
class Dataset:
    """Heterogeneous table.

    ``X`` holds every schema feature (protected included) as float64; categorical
    cells store the category index.
    """

    schema: TabularSchema
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.schema.k)
        if not np.all(np.isfinite(self.X)):
            raise SchemaError("dataset contains missing or non-finite cells")
        for j in self.schema.categorical_indices:
            col = self.X[:, j]
            card = self.schema.features[j].cardinality
            if np.any((col < 0) | (col >= card) | (col != np.round(col))):
                raise SchemaError(f"feature {self.schema.names[j]!r}: category index out of range")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.schema.k

    @property
    def S(self) -> np.ndarray:
        return self.X[:, self.schema.protected_index].astype(np.int64)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.schema.index(name)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.schema, self.X[np.asarray(idx)])

    def group_sizes(self) -> list[int]:
        return np.bincount(self.S, minlength=2).tolist()

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.schema == other.schema
            and np.array_equal(self.X, other.X)
        )


def load_dataset(path: str | Path, schema: TabularSchema) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        if header != schema.names:
            raise SchemaError(f"{path}: header {header} does not match schema {schema.names}")
        lookups = [
            {c: i for i, c in enumerate(f.categories)} if f.is_categorical else None
            for f in schema.features
        ]
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != schema.k:
                raise SchemaError(f"{path}:{lineno}: expected {schema.k} cells, got {len(record)}")
            row = []
            for f, lut, cell in zip(schema.features, lookups, record):
                cell = cell.strip()
                if cell == "":
                    raise SchemaError(f"{path}:{lineno}: missing value in {f.name!r}")
                if lut is not None:
                    if cell not in lut:
                        raise SchemaError(f"{path}:{lineno}: unknown category {cell!r} for {f.name!r}")
                    row.append(lut[cell])
                else:
                    try:
                        v = float(cell)
                    except ValueError:
                        raise SchemaError(
                            f"{path}:{lineno}: non-numeric value {cell!r} in {f.name!r}"
                        ) from None
                    if not math.isfinite(v):
                        raise SchemaError(f"{path}:{lineno}: non-finite value in {f.name!r}")
                    row.append(v)
            rows.append(row)
    X = np.array(rows, dtype=np.float64).reshape(-1, schema.k)
    return Dataset(schema, X)


def write_dataset(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(d.schema.names)
        for row in d.X:
            out = []
            for f, v in zip(d.schema.features, row):
                out.append(f.categories[int(v)] if f.is_categorical else repr(float(v)))
            writer.writerow(out)


def split_cv(d: Dataset, folds: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Stratified K-fold split on the protected attribute.

    Rows are shuffled within each group, groups are concatenated, and fold ids are
    dealt round-robin; this keeps both fold sizes and per-group fold counts within
    one of each other.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > d.n:
        raise ValueError(f"cannot split {d.n} rows into {folds} folds")
    rng = np.random.default_rng(seed)
    S = d.S
    order = np.concatenate([rng.permutation(np.flatnonzero(S == s)) for s in np.unique(S)])
    fold_of = np.empty(d.n, dtype=np.int64)
    fold_of[order] = np.arange(d.n) % folds
    out = []
    for f in range(folds):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        out.append((d.subset(train), d.subset(test)))
    return out


@dataclass
class QuantileState:
    """Knots of one numerical feature's empirical CDF."""

    values: np.ndarray  # sorted unique training values
    probs: np.ndarray  # mid-rank CDF positions in (0, 1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = np.interp(x, self.values, self.probs)
        return ndtri(p)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        p = ndtr(np.asarray(z, dtype=np.float64))
        # np.interp clamps outside the knot range, which gives the range clamp
        return np.interp(p, self.probs, self.values)

    @classmethod
    def fit(cls, x: np.ndarray) -> "QuantileState":
        values, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
        if len(values) < 2:
            raise SchemaError(
                "numerical feature has zero spread; remove it or declare it categorical"
            )
        n = len(x)
        upper = np.cumsum(counts)
        mid_rank = upper - (counts - 1) / 2.0  # 1-based mean rank of each tie block
        probs = (mid_rank - 0.5) / n
        return cls(values, probs)


@dataclass
class EncodedDataset:
    schema: TabularSchema
    num: np.ndarray  # (n, n_num) standardised numericals, schema order
    cat: np.ndarray  # (n, n_cat) int64 indices, schema order (protected included)
    states: list[QuantileState] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.num.shape[0]

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.schema, self.num[idx], self.cat[idx], self.states)


def fit_transform(d: Dataset) -> EncodedDataset:
    if d.n < 2:
        raise SchemaError("need at least 2 rows to fit the encoder")
    states = []
    for j in d.schema.numerical_indices:
        try:
            states.append(QuantileState.fit(d.X[:, j]))
        except SchemaError as exc:
            raise SchemaError(f"feature {d.schema.names[j]!r}: {exc}") from None
    return transform(d, states)


def transform(d: Dataset, states: Sequence[QuantileState]) -> EncodedDataset:
    """Encode ``d`` with already-fitted quantile states."""
    num_idx = d.schema.numerical_indices
    num = np.empty((d.n, len(num_idx)))
    for c, (j, st) in enumerate(zip(num_idx, states)):
        num[:, c] = st.forward(d.X[:, j])
    cat = d.X[:, d.schema.categorical_indices].astype(np.int64)
    return EncodedDataset(d.schema, num, cat, list(states))


def inverse_transform(e: EncodedDataset) -> Dataset:
    if len(e.states) != e.num.shape[1]:
        raise SchemaError("transform state missing")
    schema = e.schema
    X = np.empty((e.n, schema.k))
    for c, (j, st) in enumerate(zip(schema.numerical_indices, e.states)):
        X[:, j] = st.inverse(e.num[:, c])
    for c, j in enumerate(schema.categorical_indices):
        card = schema.features[j].cardinality
        col = e.cat[:, c]
        if np.any((col < 0) | (col >= card)):
            raise SchemaError(f"feature {schema.names[j]!r}: category index out of range")
        X[:, j] = col
    return Dataset(schema, X)
