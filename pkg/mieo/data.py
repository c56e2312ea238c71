"""Mixed binary/continuous tabular datasets with missing values.

Absent cells are ``NaN`` in a float64 matrix and unlabelled rows carry the label
``UNLABELLED`` (-1). Datasets are immutable: every operation returns a new one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from .config import load_settings
from .exceptions import (
    CsvParseError,
    EmptyDatasetError,
    MieoValidationError,
    SchemaError,
    StratificationError,
)

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
UNLABELLED = -1
DEFAULT_HORIZON_YEARS = 8.0

# Labelled rows go 20% to test, then 20% of the remaining development rows to
# validation: 64/16/20 overall.
TEST_FRACTION = 0.2
VALIDATION_FRACTION = 0.2
# Smaller classes are cut by hand: two-stage stratification needs a few rows per class.
MIN_STRATUM = 5

FOLLOWUP_COLUMNS = ["event_type", "event_time_years", "followup_years"]


class ColumnKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered, typed list of feature columns shared by every module."""

    columns: tuple[tuple[str, ColumnKind], ...]

    def __post_init__(self):
        try:
            columns = tuple(
                (str(name), ColumnKind(kind)) for name, kind in self.columns
            )
        except ValueError as err:
            raise SchemaError(f"Invalid column kind: {err}") from err
        object.__setattr__(self, "columns", columns)

        if not columns:
            raise SchemaError("A feature schema needs at least one column.")
        names = [name for name, _ in columns]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise SchemaError(f"Duplicate column names: {duplicates}")
        if LABEL_COLUMN in names:
            raise SchemaError(f"Column name {LABEL_COLUMN!r} is reserved for labels.")

    @classmethod
    def from_kinds(
        cls, binary: Sequence[str] = (), continuous: Sequence[str] = ()
    ) -> FeatureSchema:
        """Schema with all binary columns first, then all continuous ones."""
        return cls(
            tuple((name, ColumnKind.BINARY) for name in binary)
            + tuple((name, ColumnKind.CONTINUOUS) for name in continuous)
        )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.columns)

    @property
    def kinds(self) -> tuple[ColumnKind, ...]:
        return tuple(kind for _, kind in self.columns)

    @property
    def is_binary(self) -> np.ndarray:
        return np.array([kind is ColumnKind.BINARY for kind in self.kinds], dtype=bool)

    @property
    def is_continuous(self) -> np.ndarray:
        return ~self.is_binary

    @property
    def binary_names(self) -> tuple[str, ...]:
        return tuple(n for n, k in self.columns if k is ColumnKind.BINARY)

    @property
    def continuous_names(self) -> tuple[str, ...]:
        return tuple(n for n, k in self.columns if k is ColumnKind.CONTINUOUS)

    @property
    def n_binary(self) -> int:
        return len(self.binary_names)

    @property
    def n_continuous(self) -> int:
        return len(self.continuous_names)

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"Unknown column {name!r}.") from None

    def kind(self, name: str) -> ColumnKind:
        return self.kinds[self.index(name)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "columns": [
                {"name": name, "kind": kind.value} for name, kind in self.columns
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FeatureSchema:
        try:
            return cls(tuple((col["name"], col["kind"]) for col in data["columns"]))
        except (KeyError, TypeError) as err:
            raise SchemaError(f"Malformed schema document: {err!r}") from err

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FeatureSchema:
        return cls.from_dict(load_settings(path))


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """Observedness of each cell: true where the value is present."""

    observed: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.observed.shape

    @property
    def missing_fraction(self) -> float:
        if self.observed.size == 0:
            return 0.0
        return float(1.0 - self.observed.mean())


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Row-major matrix of optional values, labels and the schema describing them."""

    schema: FeatureSchema
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        n_features = self.schema.n_features
        values = np.array(self.values, dtype=np.float64)
        if values.size == 0:
            values = values.reshape(0, n_features)
        if values.ndim != 2 or values.shape[1] != n_features:
            raise SchemaError(
                f"Expected a matrix with {n_features} columns, "
                f"got shape {values.shape}."
            )

        if self.labels is None:
            labels = np.full(values.shape[0], UNLABELLED, dtype=np.int8)
        else:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise SchemaError(
                    f"Expected {values.shape[0]} labels, got shape {labels.shape}."
                )
            if not np.isin(labels, (UNLABELLED, 0, 1)).all():
                raise MieoValidationError("Labels must be 0, 1 or unlabelled.")
            labels = labels.astype(np.int8)

        _check_cells(self.schema, values)
        values.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_rows(self) -> int:
        return len(self)

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def is_labelled(self) -> np.ndarray:
        return self.labels != UNLABELLED

    @property
    def n_labelled(self) -> int:
        return int(self.is_labelled.sum())

    def take(self, indices: Iterable[int] | np.ndarray) -> TabularDataset:
        indices = np.asarray(indices, dtype=np.intp)
        return TabularDataset(self.schema, self.values[indices], self.labels[indices])

    def labelled(self) -> TabularDataset:
        return self.take(np.flatnonzero(self.is_labelled))

    def unlabelled(self) -> TabularDataset:
        return self.take(np.flatnonzero(~self.is_labelled))

    def with_values(self, values: np.ndarray) -> TabularDataset:
        return TabularDataset(self.schema, values, self.labels)

    def with_labels(self, labels: np.ndarray) -> TabularDataset:
        return TabularDataset(self.schema, self.values, labels)

    @classmethod
    def concat(cls, datasets: Sequence[TabularDataset]) -> TabularDataset:
        if not datasets:
            raise EmptyDatasetError("Nothing to concatenate.")
        schema = datasets[0].schema
        for other in datasets[1:]:
            if other.schema != schema:
                raise SchemaError("Cannot concatenate datasets with different schemas.")
        return cls(
            schema,
            np.concatenate([ds.values for ds in datasets]),
            np.concatenate([ds.labels for ds in datasets]),
        )


def _check_cells(schema: FeatureSchema, values: np.ndarray) -> None:
    """Binary cells must be 0 or 1 and present cells must be finite."""
    binary = values[:, schema.is_binary]
    bad = ~np.isnan(binary) & (binary != 0) & (binary != 1)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        name = schema.binary_names[col]
        raise MieoValidationError(
            f"Binary column {name!r} has value {binary[row, col]!r} in row {row}; "
            "expected 0, 1 or missing."
        )
    if np.isinf(values).any():
        row, col = np.argwhere(np.isinf(values))[0]
        raise MieoValidationError(
            f"Column {schema.names[col]!r} has a non-finite value in row {row}."
        )


@dataclass(frozen=True)
class DatasetSplits:
    """Stratified partition of the labelled rows plus the unlabelled pool."""

    train: TabularDataset
    validation: TabularDataset
    test: TabularDataset
    unlabelled: TabularDataset

    def for_selection(self) -> SelectionData:
        """Everything model selection may look at: the test split is left out."""
        return SelectionData(self.train, self.validation, self.unlabelled)


@dataclass(frozen=True)
class SelectionData:
    train: TabularDataset
    validation: TabularDataset
    unlabelled: TabularDataset


def _read_frame(path: str | Path) -> pd.DataFrame:
    try:
        return pd.read_csv(
            path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError as err:
        raise SchemaError(f"{path} has no header row.") from err
    except pd.errors.ParserError as err:
        raise CsvParseError(f"Malformed CSV file {path}: {err}") from err


def _parse_column(cells: pd.Series, name: str) -> np.ndarray:
    """Parse one column of strings; the empty string is the only null marker."""
    present = cells != ""
    parsed = pd.to_numeric(cells.where(present), errors="coerce").to_numpy(
        dtype=np.float64
    )
    bad = present.to_numpy() & ~np.isfinite(parsed)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise CsvParseError(
            f"Could not parse {cells.iloc[row]!r} as a number in row {row + 1}, "
            f"column {name!r}.",
            row=row + 1,
            column=name,
        )
    return parsed


def _parse_labels(cells: pd.Series) -> np.ndarray:
    mapping = {"": UNLABELLED, "0": 0, "1": 1}
    unknown = ~cells.isin(list(mapping))
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise MieoValidationError(
            f"Label {cells.iloc[row]!r} in row {row + 1} must be 0, 1 or empty."
        )
    return cells.map(mapping).to_numpy(dtype=np.int8)


def load_csv(path: str | Path, schema: FeatureSchema) -> TabularDataset:
    """Load a dataset whose header matches ``schema`` plus an optional ``label``."""
    frame = _read_frame(path)
    header = list(frame.columns)
    expected = list(schema.names)
    if header not in (expected, expected + [LABEL_COLUMN]):
        raise SchemaError(
            f"Header of {path} does not match the schema: expected {expected} "
            f"(optionally followed by {LABEL_COLUMN!r}), got {header}."
        )

    values = np.empty((len(frame), schema.n_features), dtype=np.float64)
    for j, (name, kind) in enumerate(schema.columns):
        column = _parse_column(frame[name], name)
        if kind is ColumnKind.BINARY:
            bad = ~np.isnan(column) & (column != 0) & (column != 1)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise MieoValidationError(
                    f"Binary column {name!r} has value {frame[name].iloc[row]!r} in "
                    f"row {row + 1}; expected 0, 1 or empty."
                )
        values[:, j] = column

    labels = _parse_labels(frame[LABEL_COLUMN]) if LABEL_COLUMN in frame else None
    dataset = TabularDataset(schema, values, labels)
    logger.debug(
        "Loaded %d rows (%d labelled) from %s", len(dataset), dataset.n_labelled, path
    )
    return dataset


def _format_cells(column: np.ndarray, binary: bool) -> list[str]:
    if binary:
        return ["" if np.isnan(v) else str(int(v)) for v in column]
    # repr() gives the shortest string that parses back to the same float.
    return ["" if np.isnan(v) else repr(float(v)) for v in column]


def write_csv(ds: TabularDataset, path: str | Path) -> None:
    """Write ``ds`` with a trailing label column; empty cells mark missing values."""
    cells = {
        name: _format_cells(ds.values[:, j], kind is ColumnKind.BINARY)
        for j, (name, kind) in enumerate(ds.schema.columns)
    }
    cells[LABEL_COLUMN] = ["" if y == UNLABELLED else str(int(y)) for y in ds.labels]
    frame = pd.DataFrame(cells, columns=[*ds.schema.names, LABEL_COLUMN])
    frame.to_csv(path, index=False, encoding="utf-8")


def infer_schema(path: str | Path) -> FeatureSchema:
    """Guess column kinds: binary iff every present cell is 0 or 1."""
    frame = _read_frame(path)
    columns = []
    for name in frame.columns:
        if name == LABEL_COLUMN:
            continue
        parsed = _parse_column(frame[name], name)
        present = parsed[~np.isnan(parsed)]
        binary = present.size > 0 and np.isin(present, (0.0, 1.0)).all()
        columns.append((name, ColumnKind.BINARY if binary else ColumnKind.CONTINUOUS))
    return FeatureSchema(tuple(columns))


class EventType(str, Enum):
    NONE = "none"
    CVD = "cvd"
    OTHER_DEATH = "other_death"


@dataclass(frozen=True)
class FollowupRecord:
    event_type: EventType
    event_time_years: float | None
    followup_years: float

    def __post_init__(self):
        try:
            object.__setattr__(self, "event_type", EventType(self.event_type))
        except ValueError as err:
            raise MieoValidationError(f"Unknown event type: {err}") from err

        if not self.followup_years >= 0:
            raise MieoValidationError(
                f"Follow-up must be non-negative, got {self.followup_years!r}."
            )
        if self.event_type is EventType.NONE:
            return
        if self.event_time_years is None or not self.event_time_years >= 0:
            raise MieoValidationError(
                f"A {self.event_type.value!r} event needs a non-negative event time."
            )
        if self.event_time_years > self.followup_years:
            raise MieoValidationError(
                f"Event time {self.event_time_years} exceeds follow-up "
                f"{self.followup_years}."
            )


def load_followup_csv(path: str | Path) -> list[FollowupRecord]:
    frame = _read_frame(path)
    if list(frame.columns) != FOLLOWUP_COLUMNS:
        raise SchemaError(
            f"Follow-up file {path} must have columns {FOLLOWUP_COLUMNS}, "
            f"got {list(frame.columns)}."
        )
    times = _parse_column(frame["event_time_years"], "event_time_years")
    followups = _parse_column(frame["followup_years"], "followup_years")
    return [
        FollowupRecord(event, None if np.isnan(t) else float(t), float(f))
        for event, t, f in zip(frame["event_type"], times, followups)
    ]


def derive_labels(
    records: Iterable[FollowupRecord | Sequence[Any]],
    horizon_years: float = DEFAULT_HORIZON_YEARS,
) -> np.ndarray:
    """Label 1 for a CVD event within the horizon, 0 for follow-up beyond it.

    Everything else (follow-up ending at or before the horizon without a CVD event)
    is unlabelled.
    """
    if not horizon_years > 0:
        raise MieoValidationError(f"Horizon must be positive, got {horizon_years!r}.")

    labels = []
    for record in records:
        if not isinstance(record, FollowupRecord):
            record = FollowupRecord(*record)
        if (
            record.event_type is EventType.CVD
            and record.event_time_years <= horizon_years
        ):
            labels.append(1)
        elif record.followup_years > horizon_years:
            labels.append(0)
        else:
            labels.append(UNLABELLED)
    return np.array(labels, dtype=np.int8)


Bounds = Mapping[str, Sequence[Any]]


def load_bounds(path: str | Path) -> dict[str, tuple[float | None, float | None]]:
    """Read ``{column: [low, high]}``; ``null`` leaves that side open."""
    bounds = {}
    for name, pair in load_settings(path).items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise MieoValidationError(
                f"Bounds for {name!r} must be a [low, high] pair, got {pair!r}."
            )
        bounds[name] = tuple(None if v is None else float(v) for v in pair)
    return bounds


def iqr_bounds(train: TabularDataset, factor: float = 1.5) -> dict[str, tuple]:
    """Tukey fences per continuous column, from the observed training cells."""
    bounds = {}
    for name in train.schema.continuous_names:
        column = train.values[:, train.schema.index(name)]
        present = column[~np.isnan(column)]
        if present.size == 0:
            continue
        q1, q3 = np.percentile(present, [25, 75])
        spread = q3 - q1
        # Zero spread would turn every value off the median into an outlier.
        if spread > 0:
            bounds[name] = (q1 - factor * spread, q3 + factor * spread)
    return bounds


def preprocess(ds: TabularDataset, bounds: Bounds | None = None) -> TabularDataset:
    """Set continuous cells outside their (low, high) bounds to missing."""
    if not bounds:
        return ds

    values = ds.values.copy()
    n_before = int(np.isnan(values).sum())
    for name, (low, high) in bounds.items():
        j = ds.schema.index(name)
        if ds.schema.kinds[j] is ColumnKind.BINARY:
            raise MieoValidationError(
                f"Bounds given for binary column {name!r}; outlier bounds apply to "
                "continuous columns only."
            )
        if low is not None and high is not None and not low < high:
            raise MieoValidationError(
                f"Bounds for {name!r} need low < high, got ({low}, {high})."
            )
        column = values[:, j]
        outside = np.zeros(column.shape, dtype=bool)
        if low is not None:
            outside |= column < low
        if high is not None:
            outside |= column > high
        column[outside] = np.nan

    n_nulled = int(np.isnan(values).sum()) - n_before
    logger.debug("Outlier bounds nulled %d cells", n_nulled)
    return ds.with_values(values)


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Per continuous column mean and (population) standard deviation."""

    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (len(self.columns),) or std.shape != mean.shape:
            raise SchemaError("Standardization stats do not match their columns.")
        if not (std > 0).all():
            raise MieoValidationError("Standard deviations must be positive.")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def transform(self, continuous: np.ndarray) -> np.ndarray:
        return (continuous - self.mean) / self.std

    def inverse(self, continuous: np.ndarray) -> np.ndarray:
        return continuous * self.std + self.mean

    def check(self, schema: FeatureSchema) -> None:
        if self.columns != schema.continuous_names:
            raise SchemaError(
                f"Standardization stats cover {list(self.columns)}, but the schema's "
                f"continuous columns are {list(schema.continuous_names)}."
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "columns": list(self.columns),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> StandardizationStats:
        return cls(tuple(data["columns"]), data["mean"], data["std"])


def fit_standardization(train: TabularDataset) -> StandardizationStats:
    """Fit z-score stats on observed continuous cells; zero variance gives std 1."""
    continuous = train.values[:, train.schema.is_continuous]
    observed = ~np.isnan(continuous)
    counts = observed.sum(axis=0)
    n_columns = continuous.shape[1]

    mean = np.divide(
        np.where(observed, continuous, 0.0).sum(axis=0),
        counts,
        out=np.zeros(n_columns),
        where=counts > 0,
    )
    centered = np.where(observed, continuous - mean, 0.0)
    var = np.divide(
        (centered**2).sum(axis=0), counts, out=np.zeros(n_columns), where=counts > 0
    )
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return StandardizationStats(train.schema.continuous_names, mean, std)


def apply_standardization(
    stats: StandardizationStats, ds: TabularDataset
) -> TabularDataset:
    stats.check(ds.schema)
    values = ds.values.copy()
    continuous = ds.schema.is_continuous
    values[:, continuous] = stats.transform(values[:, continuous])
    return ds.with_values(values)


def invert_standardization(
    stats: StandardizationStats, ds: TabularDataset
) -> TabularDataset:
    stats.check(ds.schema)
    values = ds.values.copy()
    continuous = ds.schema.is_continuous
    values[:, continuous] = stats.inverse(values[:, continuous])
    return ds.with_values(values)


def _split_by_class(
    rows: np.ndarray, labels: np.ndarray, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle and cut every class on its own; rounding leftovers stay in train."""
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for c in (0, 1):
        members = rng.permutation(rows[labels == c])
        n_test = int(round(TEST_FRACTION * members.size))
        n_validation = int(round(VALIDATION_FRACTION * (members.size - n_test)))
        parts[2].append(members[:n_test])
        parts[1].append(members[n_test : n_test + n_validation])
        parts[0].append(members[n_test + n_validation :])
    train, validation, test = (np.concatenate(p) for p in parts)
    return train, validation, test


def split(ds: TabularDataset, seed: int) -> DatasetSplits:
    """Stratified 64/16/20 train/validation/test split of the labelled rows."""
    labelled = np.flatnonzero(ds.is_labelled)
    labels = ds.labels[labelled]
    absent = [c for c in (0, 1) if not (labels == c).any()]
    if absent:
        raise StratificationError(
            f"Cannot stratify: class {absent[0]} is absent from the labelled rows."
        )

    if np.bincount(labels, minlength=2).min() < MIN_STRATUM:
        logger.warning(
            "A class has fewer than %d labelled rows; splitting each class by hand",
            MIN_STRATUM,
        )
        train, validation, test = _split_by_class(labelled, labels, seed)
    else:
        try:
            development, test = train_test_split(
                labelled, test_size=TEST_FRACTION, stratify=labels, random_state=seed
            )
            train, validation = train_test_split(
                development,
                test_size=VALIDATION_FRACTION,
                stratify=ds.labels[development],
                random_state=seed,
            )
        except ValueError as err:
            raise StratificationError(
                f"Cannot stratify the labelled rows: {err}"
            ) from err

    splits = DatasetSplits(
        train=ds.take(np.sort(train)),
        validation=ds.take(np.sort(validation)),
        test=ds.take(np.sort(test)),
        unlabelled=ds.unlabelled(),
    )
    logger.info(
        "Split %d labelled rows into %d/%d/%d with %d unlabelled",
        labelled.size,
        len(splits.train),
        len(splits.validation),
        len(splits.test),
        len(splits.unlabelled),
    )
    return splits


def null_mask(ds: TabularDataset) -> MaskMatrix:
    return MaskMatrix(ds.observed)
