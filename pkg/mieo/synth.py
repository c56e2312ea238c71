"""Synthetic mixed-type datasets with a known labelling model.

Features are mutually independent: Bernoulli for binary columns and Gaussian for
continuous ones. The label is drawn from a logistic model of the complete row,
and cells are removed completely at random afterwards, so the Bayes classifier
on complete data is known and gives a ceiling for trained models.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import UNLABELLED, FeatureSchema, TabularDataset
from .exceptions import ConfigError
from .metrics import classification_report

logger = logging.getLogger(__name__)

MIN_BAYES_SAMPLES = 10_000
VECTOR_FIELDS = (
    "bernoulli_p",
    "gauss_mean",
    "gauss_std",
    "label_weights",
    "miss_rates",
)


def _floats(values: Sequence[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class SynthSpec:
    """Generative parameters of a synthetic dataset.

    Columns are ordered binary first, then continuous; ``label_weights`` and
    ``miss_rates`` follow the same order.
    """

    n_binary: int
    n_continuous: int
    bernoulli_p: tuple[float, ...]
    gauss_mean: tuple[float, ...]
    gauss_std: tuple[float, ...]
    label_weights: tuple[float, ...]
    intercept: float
    miss_rates: tuple[float, ...]
    unlabelled_frac: float
    n_rows: int

    def __post_init__(self):
        for name in VECTOR_FIELDS:
            object.__setattr__(self, name, _floats(getattr(self, name)))
        object.__setattr__(self, "intercept", float(self.intercept))

        if self.n_binary < 0 or self.n_continuous < 0:
            raise ConfigError("Feature counts must be non-negative.")
        if self.n_features < 1:
            raise ConfigError("A synthetic dataset needs at least one feature.")
        if self.n_rows < 1:
            raise ConfigError(f"n_rows must be positive, got {self.n_rows}.")

        expected = {
            "bernoulli_p": self.n_binary,
            "gauss_mean": self.n_continuous,
            "gauss_std": self.n_continuous,
            "label_weights": self.n_features,
            "miss_rates": self.n_features,
        }
        for name, length in expected.items():
            if len(getattr(self, name)) != length:
                raise ConfigError(
                    f"{name} has {len(getattr(self, name))} entries, expected {length}."
                )

        probabilities = self.bernoulli_p + self.miss_rates + (self.unlabelled_frac,)
        if not all(0.0 <= p <= 1.0 for p in probabilities):
            raise ConfigError("Probabilities and rates must lie in [0, 1].")
        if not all(s > 0 for s in self.gauss_std):
            raise ConfigError("Gaussian standard deviations must be positive.")
        coefficients = self.label_weights + self.gauss_mean + (self.intercept,)
        if not np.isfinite(coefficients).all():
            raise ConfigError("Weights, means and intercept must be finite.")

    @property
    def n_features(self) -> int:
        return self.n_binary + self.n_continuous

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema.from_kinds(
            binary=[f"b{i:02d}" for i in range(self.n_binary)],
            continuous=[f"c{i:02d}" for i in range(self.n_continuous)],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_binary": self.n_binary,
            "n_continuous": self.n_continuous,
            "bernoulli_p": list(self.bernoulli_p),
            "gauss_mean": list(self.gauss_mean),
            "gauss_std": list(self.gauss_std),
            "label_weights": list(self.label_weights),
            "intercept": self.intercept,
            "miss_rates": list(self.miss_rates),
            "unlabelled_frac": self.unlabelled_frac,
            "n_rows": self.n_rows,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthSpec:
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"Invalid synthetic spec: {err}") from err

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> SynthSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sample_features(
    spec: SynthSpec, n_rows: int, rng: np.random.Generator
) -> np.ndarray:
    binary = (rng.random((n_rows, spec.n_binary)) < np.array(spec.bernoulli_p)).astype(
        np.float64
    )
    continuous = rng.normal(
        np.array(spec.gauss_mean), np.array(spec.gauss_std), (n_rows, spec.n_continuous)
    )
    return np.hstack([binary, continuous])


def label_scores(spec: SynthSpec, features: np.ndarray) -> np.ndarray:
    """Logit of P(label = 1) for complete rows."""
    return features @ np.array(spec.label_weights) + spec.intercept


def generate(spec: SynthSpec, seed: int) -> tuple[TabularDataset, TabularDataset]:
    """Sample ``(ground_truth, masked)``: the complete rows and their MCAR-masked copy.

    Both copies share the labels, including the unlabelled rows.
    """
    rng = np.random.default_rng(seed)
    features = sample_features(spec, spec.n_rows, rng)
    labels = (rng.random(spec.n_rows) < expit(label_scores(spec, features))).astype(
        np.int8
    )

    missing = rng.random(features.shape) < np.array(spec.miss_rates)
    n_unlabelled = int(round(spec.unlabelled_frac * spec.n_rows))
    labels[rng.choice(spec.n_rows, size=n_unlabelled, replace=False)] = UNLABELLED

    schema = spec.schema
    ground_truth = TabularDataset(schema, features, labels)
    masked = TabularDataset(schema, np.where(missing, np.nan, features), labels)
    logger.info(
        "Generated %d synthetic rows (%d unlabelled, %.2f%% missing)",
        spec.n_rows,
        n_unlabelled,
        100 * missing.mean(),
    )
    return ground_truth, masked


def bayes_reference(spec: SynthSpec, n_mc: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo balanced accuracy of the Bayes classifier on complete rows.

    The Bayes classifier predicts 1 when ``sigmoid(score) >= 0.5``, that is when
    the logit is non-negative.
    """
    if n_mc < MIN_BAYES_SAMPLES:
        raise ConfigError(f"n_mc must be at least {MIN_BAYES_SAMPLES}, got {n_mc}.")
    rng = np.random.default_rng(seed)
    features = sample_features(spec, n_mc, rng)
    scores = label_scores(spec, features)
    labels = (rng.random(n_mc) < expit(scores)).astype(np.int8)
    predictions = (scores >= 0).astype(np.int8)
    return classification_report(predictions, labels).balanced_accuracy


def cohort_like_spec(
    n_rows: int = 8000,
    seed: int = 0,
    n_binary: int = 46,
    n_continuous: int = 22,
    n_informative: int = 12,
    score_std: float = 2.5,
    positive_rate: float = 0.25,
    unlabelled_frac: float = 0.5,
) -> SynthSpec:
    """A spec shaped like a small clinical cohort.

    Two columns are missing about 55% of the time and about nineteen more about
    5%, for roughly 3% missing cells overall. The labelling model uses
    ``n_informative`` features, its logit has standard deviation ``score_std``
    and the intercept is calibrated so about ``positive_rate`` of the labels are 1.
    """
    n_features = n_binary + n_continuous
    if not 0 < n_informative <= n_features:
        raise ConfigError("n_informative must be between 1 and the feature count.")
    rng = np.random.default_rng(seed)

    bernoulli_p = rng.uniform(0.05, 0.6, n_binary)
    gauss_mean = rng.normal(0.0, 5.0, n_continuous)
    gauss_std = rng.uniform(0.5, 3.0, n_continuous)

    # Weights act on standardized features.
    scale = np.concatenate([np.sqrt(bernoulli_p * (1 - bernoulli_p)), gauss_std])
    center = np.concatenate([bernoulli_p, gauss_mean])
    informative = rng.choice(n_features, size=n_informative, replace=False)
    weights = np.zeros(n_features)
    weights[informative] = rng.normal(0.0, 1.0, n_informative) / scale[informative]
    weights *= score_std / np.sqrt((weights**2 * scale**2).sum())
    offset = -float(weights @ center)

    miss_rates = np.zeros(n_features)
    n_sparse = min(19, n_features - 2) if n_features > 2 else 0
    columns = rng.permutation(n_features)
    miss_rates[columns[:2]] = 0.55
    miss_rates[columns[2 : 2 + n_sparse]] = 0.05

    draft = SynthSpec(
        n_binary=n_binary,
        n_continuous=n_continuous,
        bernoulli_p=bernoulli_p,
        gauss_mean=gauss_mean,
        gauss_std=gauss_std,
        label_weights=weights,
        intercept=offset,
        miss_rates=miss_rates,
        unlabelled_frac=unlabelled_frac,
        n_rows=n_rows,
    )
    scores = label_scores(draft, sample_features(draft, 20_000, rng))

    def excess_positives(shift: float) -> float:
        return float(expit(scores + shift).mean()) - positive_rate

    shift = brentq(excess_positives, -50.0, 50.0)
    return SynthSpec.from_dict(draft.to_dict() | {"intercept": offset + shift})


def mask_additional(
    ds: TabularDataset, fraction: float, seed: int
) -> tuple[TabularDataset, np.ndarray]:
    """Hide a ``fraction`` of the observed cells.

    Returns the dataset with those cells set missing and the hidden-cell mask.
    """
    if not 0 <= fraction < 1:
        raise ConfigError(f"fraction must be in [0, 1), got {fraction}.")
    rng = np.random.default_rng(seed)
    hidden = ds.observed & (rng.random(ds.values.shape) < fraction)
    return ds.with_values(np.where(hidden, np.nan, ds.values)), hidden
