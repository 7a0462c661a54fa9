"""Loading, preprocessing, splitting and synthetic data for the experiments."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.preprocessing import StandardScaler

__all__ = [
    "ColumnKind",
    "Column",
    "LabelRule",
    "ColumnSchema",
    "Dataset",
    "PreprocessReport",
    "CsvParseError",
    "UnknownCategoryError",
    "ABALONE_SCHEMA",
    "ADULT_SCHEMA",
    "GMM_MEANS",
    "load_csv",
    "standardize",
    "train_test_split",
    "synth_gmm",
    "synth_logreg",
]

MISSING_TOKENS = frozenset({"", "?", "NA", "nan", "NaN"})


class CsvParseError(ValueError):
    """A CSV cell or row that cannot be parsed; message carries row and column."""


class UnknownCategoryError(ValueError):
    """A categorical level not present in the training categories."""


class ColumnKind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    LABEL = "label"


@dataclass(frozen=True)
class Column:
    name: str
    kind: ColumnKind = ColumnKind.NUMERIC

    def __post_init__(self):
        object.__setattr__(self, "kind", ColumnKind(self.kind))


@dataclass(frozen=True)
class LabelRule:
    """Maps raw label strings to +1/-1.

    Either ``threshold`` (numeric labels ``>= threshold`` are +1) or
    ``positive`` (labels in the set are +1, after stripping whitespace and a
    trailing period) must be given.
    """

    threshold: float | None = None
    positive: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.threshold is None) == (not self.positive):
            raise ValueError("give exactly one of threshold or positive")

    def apply(self, raw: str) -> int:
        if self.threshold is not None:
            return 1 if float(raw) >= self.threshold else -1
        return 1 if raw.strip().rstrip(".") in self.positive else -1

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "positive": list(self.positive)}


@dataclass(frozen=True)
class ColumnSchema:
    columns: tuple[Column, ...]
    label_rule: LabelRule | None = None
    has_header: bool = False

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        labels = [c for c in self.columns if c.kind is ColumnKind.LABEL]
        if len(labels) > 1:
            raise ValueError("at most one label column")
        if labels and self.label_rule is None:
            raise ValueError("a label column needs a label_rule")

    @property
    def label_column(self) -> Column | None:
        return next((c for c in self.columns if c.kind is ColumnKind.LABEL), None)

    @classmethod
    def from_dict(cls, spec: dict) -> "ColumnSchema":
        rule = spec.get("label_rule")
        return cls(
            tuple(Column(c["name"], c.get("kind", "numeric")) for c in spec["columns"]),
            None if rule is None else LabelRule(rule.get("threshold"), tuple(rule.get("positive", ()))),
            bool(spec.get("has_header", False)),
        )

    @classmethod
    def from_json(cls, path) -> "ColumnSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


ABALONE_SCHEMA = ColumnSchema(
    (
        Column("sex", ColumnKind.CATEGORICAL),
        Column("length"),
        Column("diameter"),
        Column("height"),
        Column("whole_weight"),
        Column("shucked_weight"),
        Column("viscera_weight"),
        Column("shell_weight"),
        Column("rings", ColumnKind.LABEL),
    ),
    LabelRule(threshold=10),
)

ADULT_SCHEMA = ColumnSchema(
    (
        Column("age"),
        Column("workclass", ColumnKind.CATEGORICAL),
        Column("fnlwgt"),
        Column("education", ColumnKind.CATEGORICAL),
        Column("education_num"),
        Column("marital_status", ColumnKind.CATEGORICAL),
        Column("occupation", ColumnKind.CATEGORICAL),
        Column("relationship", ColumnKind.CATEGORICAL),
        Column("race", ColumnKind.CATEGORICAL),
        Column("sex", ColumnKind.CATEGORICAL),
        Column("capital_gain"),
        Column("capital_loss"),
        Column("hours_per_week"),
        Column("native_country", ColumnKind.CATEGORICAL),
        Column("income", ColumnKind.LABEL),
    ),
    LabelRule(positive=(">50K",)),
)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.y is not None:
            self.y = np.asarray(self.y)
            if self.y.shape != (self.X.shape[0],):
                raise ValueError("y must have one entry per row")
        if np.isnan(self.X).any():
            raise ValueError("dataset contains missing values")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.X[idx], None if self.y is None else self.y[idx],
            list(self.feature_names), dict(self.meta),
        )


def load_csv(path, schema: ColumnSchema, categories: dict[str, list[str]] | None = None) -> Dataset:
    """Read a comma-separated file into a :class:`Dataset`.

    Numeric columns become floats, categorical columns are one-hot encoded
    (levels sorted, or ``categories`` from a training file) and the label is
    mapped to +1/-1. Rows with missing fields are dropped and counted in
    ``meta["dropped_missing"]``.

    Raises:
        CsvParseError: On a wrong field count or non-numeric value, with the
            1-based row number and the column name.
        UnknownCategoryError: When ``categories`` is given and a level is not in it.
    """
    rows, dropped = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.has_header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(schema.columns):
                raise CsvParseError(
                    f"{path}: row {lineno}: expected {len(schema.columns)} fields, got {len(row)}"
                )
            cells = [cell.strip() for cell in row]
            if any(cell in MISSING_TOKENS for cell in cells):
                dropped += 1
                continue
            rows.append((lineno, cells))

    cat_cols = [i for i, c in enumerate(schema.columns) if c.kind is ColumnKind.CATEGORICAL]
    if categories is None:
        categories = {
            schema.columns[i].name: sorted({cells[i] for _, cells in rows}) for i in cat_cols
        }

    features, names, labels = [], [], []
    for col in schema.columns:
        if col.kind is ColumnKind.NUMERIC:
            names.append(col.name)
        elif col.kind is ColumnKind.CATEGORICAL:
            names += [f"{col.name}={level}" for level in categories[col.name]]

    for lineno, cells in rows:
        out = []
        for col, cell in zip(schema.columns, cells):
            if col.kind is ColumnKind.NUMERIC:
                try:
                    out.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: row {lineno}, column {col.name!r}: not a number: {cell!r}"
                    ) from None
            elif col.kind is ColumnKind.CATEGORICAL:
                levels = categories[col.name]
                if cell not in levels:
                    raise UnknownCategoryError(
                        f"{path}: row {lineno}, column {col.name!r}: unseen level {cell!r}"
                    )
                onehot = [0.0] * len(levels)
                onehot[levels.index(cell)] = 1.0
                out += onehot
            else:
                try:
                    labels.append(schema.label_rule.apply(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: row {lineno}, column {col.name!r}: bad label {cell!r}"
                    ) from None
        features.append(out)

    if not features:
        raise CsvParseError(f"{path}: no complete rows")
    y = np.asarray(labels, dtype=int) if schema.label_column is not None else None
    return Dataset(
        np.asarray(features, dtype=float), y, names,
        {
            "source": str(path),
            "dropped_missing": dropped,
            "categories": categories,
            "n_attributes": sum(c.kind is not ColumnKind.LABEL for c in schema.columns),
        },
    )


@dataclass
class PreprocessReport:
    """Statistics used for standardisation; always fitted on the training part."""

    mean: list[float]
    std: list[float]
    scale: list[float]
    fitted_on: str
    n_fitted: int
    train_size: int
    test_size: int
    std_convention: str = "population"
    categories: dict = field(default_factory=dict)
    split_seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    def apply(self, data: Dataset) -> Dataset:
        X = (data.X - np.asarray(self.mean)) / np.asarray(self.scale)
        return Dataset(X, data.y, list(data.feature_names), dict(data.meta))


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, PreprocessReport]:
    """Centre and scale features with training-set statistics only.

    Zero-variance columns are centred and left unscaled.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    scaler = StandardScaler().fit(train.X)
    report = PreprocessReport(
        mean=scaler.mean_.tolist(),
        std=np.sqrt(scaler.var_).tolist(),
        scale=scaler.scale_.tolist(),
        fitted_on="train",
        n_fitted=len(train),
        train_size=len(train),
        test_size=len(test),
        categories=train.meta.get("categories", {}),
        split_seed=train.meta.get("split_seed"),
    )
    return report.apply(train), report.apply(test), report


def train_test_split(data: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(data)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    train, test = data.subset(perm[:n_train]), data.subset(perm[n_train:])
    for part, name in ((train, "train"), (test, "test")):
        part.meta.update(split_seed=seed, split_part=name)
    return train, test


GMM_MEANS = np.array([[0.0, 0.0], [2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])


def synth_gmm(n_train: int = 1000, n_test: int = 100, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Equal-weight five-component mixture in 2-D with identity covariances."""
    if n_train < 1 or n_test < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)

    def draw(n):
        comp = rng.integers(0, len(GMM_MEANS), size=n)
        X = GMM_MEANS[comp] + rng.standard_normal((n, 2))
        return Dataset(X, None, ["x0", "x1"], {"component": comp.tolist(), "seed": seed})

    return draw(n_train), draw(n_test)


def synth_logreg(n: int, d: int, w_scale: float = 1.0, seed: int = 0) -> Dataset:
    """Standard normal features with labels drawn from ``sigmoid(w_true.x)``.

    ``w_true`` has norm ``w_scale`` and a random direction; it is recorded in
    ``meta``.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    w_true = w_scale * direction / np.linalg.norm(direction)
    X = rng.standard_normal((n, d))
    y = np.where(rng.random(n) < expit(X @ w_true), 1, -1)
    return Dataset(X, y, [f"x{j}" for j in range(d)], {"w_true": w_true.tolist(), "seed": seed})


def bayes_accuracy(X: np.ndarray, y: Sequence[int], w: np.ndarray) -> float:
    """Accuracy of predicting ``sign(w.x)``."""
    return float(np.mean(np.where(np.asarray(X) @ w >= 0, 1, -1) == np.asarray(y)))
