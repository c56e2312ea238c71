"""Downstream classifier trained with positive-weighted binary cross-entropy.

The same network shape serves both scenarios: raw rows, read as
``[zero-filled values ; null mask]``, or MIEO embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from . import _model_io
from .autoencoder import MieoModel, encode, make_masked_input
from .config import (
    DEFAULT_CLASSIFIER_SETTINGS,
    as_float,
    as_int,
    as_widths,
    resolve_settings,
)
from .data import (
    FeatureSchema,
    StandardizationStats,
    TabularDataset,
    apply_standardization,
)
from .exceptions import (
    ConfigError,
    ConstructionError,
    EmptyDatasetError,
    MieoValidationError,
    NonFiniteLossError,
    SchemaError,
    ShapeError,
)
from .metrics import classification_report
from .nn_core import (
    Activation,
    AdamState,
    LayerSpec,
    Network,
    adam_step,
    as_batch,
    backward,
    forward,
    init_network,
)

logger = logging.getLogger(__name__)

N_HIDDEN = 3
AUTO = "auto"
CLAMP = 1e-7
MODEL_KIND = "classifier"


class InputMode(str, Enum):
    RAW = "raw"
    EMBEDDING = "embedding"


@dataclass(frozen=True)
class ClassifierConfig:
    hidden_widths: tuple[int, ...] = tuple(DEFAULT_CLASSIFIER_SETTINGS["hidden_widths"])
    leaky_slope: float = DEFAULT_CLASSIFIER_SETTINGS["leaky_slope"]
    pos_weight: float | str = AUTO
    lr: float = DEFAULT_CLASSIFIER_SETTINGS["lr"]
    epochs: int = DEFAULT_CLASSIFIER_SETTINGS["epochs"]
    batch_size: int = DEFAULT_CLASSIFIER_SETTINGS["batch_size"]
    seed: int = DEFAULT_CLASSIFIER_SETTINGS["seed"]
    decision_threshold: float = DEFAULT_CLASSIFIER_SETTINGS["decision_threshold"]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if len(widths) != N_HIDDEN or min(widths) < 1:
            raise ConfigError(f"hidden_widths must list {N_HIDDEN} positive widths.")
        if self.pos_weight != AUTO:
            if isinstance(self.pos_weight, str):
                raise ConfigError(
                    f"pos_weight must be a positive number or {AUTO!r}, "
                    f"got {self.pos_weight!r}."
                )
            if not self.pos_weight > 0:
                raise ConfigError(
                    f"pos_weight must be positive, got {self.pos_weight}."
                )
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}.")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}.")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}.")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for BatchNorm.")
        if not 0 <= self.decision_threshold <= 1:
            raise ConfigError("decision_threshold must be in [0, 1].")

    @classmethod
    def from_settings(
        cls,
        settings: Mapping[str, Any] | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> ClassifierConfig:
        s = resolve_settings(DEFAULT_CLASSIFIER_SETTINGS, settings, overrides)
        pos_weight = s["pos_weight"]
        return cls(
            hidden_widths=as_widths("hidden_widths", s["hidden_widths"]) or (),
            leaky_slope=as_float("leaky_slope", s["leaky_slope"]),
            pos_weight=(
                AUTO if pos_weight == AUTO else as_float("pos_weight", pos_weight)
            ),
            lr=as_float("lr", s["lr"]),
            epochs=as_int("epochs", s["epochs"]),
            batch_size=as_int("batch_size", s["batch_size"]),
            seed=as_int("seed", s["seed"]),
            decision_threshold=as_float("decision_threshold", s["decision_threshold"]),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "hidden_widths": list(self.hidden_widths),
            "leaky_slope": self.leaky_slope,
            "pos_weight": self.pos_weight,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "decision_threshold": self.decision_threshold,
        }


class ClassifierModel:
    """A trained or untrained classifier and what it needs to read its inputs.

    Raw-mode models carry the feature schema and the standardization of the
    training split, so they can be applied to CSV rows directly.
    """

    def __init__(
        self,
        network: Network,
        input_mode: InputMode | str,
        config: ClassifierConfig,
        pos_weight: float | None = None,
        schema: FeatureSchema | None = None,
        standardization: StandardizationStats | None = None,
    ):
        input_mode = InputMode(input_mode)
        if network.out_dim != 1:
            raise ConstructionError("The classifier must have a single output unit.")
        if input_mode is InputMode.RAW and schema is not None:
            if network.in_dim != 2 * schema.n_features:
                raise ConstructionError(
                    f"A raw-mode classifier reads {2 * schema.n_features} inputs "
                    f"(values and mask), got {network.in_dim}."
                )
            if standardization is not None:
                standardization.check(schema)
        self.network = network
        self.input_mode = input_mode
        self.config = config
        self.pos_weight = pos_weight
        self.schema = schema
        self.standardization = standardization

    @property
    def input_dim(self) -> int:
        return self.network.in_dim

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_mode": self.input_mode.value,
            "config": self.config.to_dict(),
            "pos_weight": self.pos_weight,
            "schema": None if self.schema is None else self.schema.to_dict(),
            "standardization": (
                None if self.standardization is None else self.standardization.to_dict()
            ),
            "network": self.network.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ClassifierModel:
        schema, stats = data.get("schema"), data.get("standardization")
        model = cls(
            network=Network.from_dict(data["network"]),
            input_mode=data["input_mode"],
            config=ClassifierConfig.from_settings(data["config"]),
            pos_weight=data.get("pos_weight"),
            schema=None if schema is None else FeatureSchema.from_dict(schema),
            standardization=(
                None if stats is None else StandardizationStats.from_dict(stats)
            ),
        )
        model.network.eval()
        return model

    def save(self, path: str | Path) -> None:
        _model_io.save_document(path, MODEL_KIND, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> ClassifierModel:
        return cls.from_dict(_model_io.load_document(path, MODEL_KIND))


def build_classifier(
    config: ClassifierConfig,
    input_dim: int,
    input_mode: InputMode | str,
    seed: int | None = None,
    schema: FeatureSchema | None = None,
    standardization: StandardizationStats | None = None,
) -> ClassifierModel:
    """Three Linear -> BN -> LeakyReLU hidden layers and a linear output unit.

    The sigmoid on the output is applied by the loss and by ``predict``.
    """
    specs, in_dim = [], input_dim
    for width in config.hidden_widths:
        specs.append(
            LayerSpec(
                in_dim,
                width,
                has_batchnorm=True,
                activation=Activation.LEAKY_RELU,
                slope=config.leaky_slope,
            )
        )
        in_dim = width
    specs.append(LayerSpec(in_dim, 1))
    network = init_network(specs, config.seed if seed is None else seed)
    return ClassifierModel(
        network, input_mode, config, schema=schema, standardization=standardization
    )


def raw_features(values: np.ndarray, observed: np.ndarray | None = None) -> np.ndarray:
    """Classifier input of the raw scenario: ``[zero-filled values ; null mask]``."""
    values = np.asarray(values, dtype=np.float64)
    observed = ~np.isnan(values) if observed is None else observed
    return make_masked_input(values, observed, 0.0)[0]


def model_features(
    model: ClassifierModel, ds: TabularDataset, mieo: MieoModel | None = None
) -> np.ndarray:
    """Features for ``model`` from rows in original units."""
    if model.input_mode is InputMode.EMBEDDING:
        if mieo is None:
            raise ConfigError("An embedding-mode classifier needs the MIEO model.")
        return encode(mieo, ds)
    if model.schema is not None and ds.schema != model.schema:
        raise SchemaError("The dataset does not use the classifier's schema.")
    if model.standardization is not None:
        ds = apply_standardization(model.standardization, ds)
    return raw_features(ds.values, ds.observed)


def weighted_bce(p: Any, t: Any, pos_weight: float) -> float:
    """Mean of ``-[pos_weight * t * ln p + (1 - t) * ln(1 - p)]`` over the batch."""
    p = np.clip(np.asarray(p, dtype=np.float64), CLAMP, 1 - CLAMP)
    t = np.asarray(t, dtype=np.float64)
    loss = -(pos_weight * t * np.log(p) + (1 - t) * np.log1p(-p))
    return float(np.mean(loss))


def weighted_bce_with_grad(
    logits: np.ndarray, targets: np.ndarray, pos_weight: float
) -> tuple[float, np.ndarray]:
    """Batch loss of the output logits and its gradient w.r.t. those logits."""
    p = expit(logits)
    targets = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    loss = weighted_bce(p, targets, pos_weight)
    live = (p > CLAMP) & (p < 1 - CLAMP)
    grad = -pos_weight * targets * (1 - p) + (1 - targets) * p
    return loss, np.where(live, grad, 0.0) / p.shape[0]


def auto_pos_weight(labels: Any) -> float:
    """``N_negative / N_positive``, the weight that mimics oversampling positives."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MieoValidationError(
            "Both classes must be present to derive pos_weight "
            f"(got {n_neg} negatives and {n_pos} positives)."
        )
    return n_neg / n_pos


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    labels: np.ndarray


def predict(model: ClassifierModel, features: Any) -> Prediction:
    """Probabilities and hard labels; a probability equal to the threshold gives 1."""
    features = as_batch(np.atleast_2d(features), model.input_dim)
    logits = forward(model.network, features, training=False).output[:, 0]
    probabilities = expit(logits)
    labels = (probabilities >= model.config.decision_threshold).astype(np.int8)
    return Prediction(probabilities, labels)


@dataclass(frozen=True)
class ClassifierEpoch:
    epoch: int
    train_loss: float
    validation_loss: float | None
    validation_balanced_accuracy: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _check_training_data(features, labels, width, name):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise EmptyDatasetError(f"The {name} split is empty.")
    if features.ndim != 2 or features.shape[1] != width:
        raise ShapeError(
            f"The {name} features have shape {features.shape}, expected (B, {width})."
        )
    if labels.shape != (features.shape[0],) or not np.isin(labels, (0, 1)).all():
        raise MieoValidationError(f"The {name} labels must be one 0/1 label per row.")
    return features, labels.astype(np.float64)


def train_classifier(
    model: ClassifierModel,
    train_features: Any,
    train_labels: Any,
    val_features: Any = None,
    val_labels: Any = None,
    config: ClassifierConfig | None = None,
) -> tuple[ClassifierModel, list[ClassifierEpoch]]:
    """Minibatch Adam on the weighted BCE; deterministic given the config seed.

    History entry 0 describes the untrained model.
    """
    config = config or model.config
    x, y = _check_training_data(train_features, train_labels, model.input_dim, "train")
    pos_weight = auto_pos_weight(y) if config.pos_weight == AUTO else config.pos_weight
    if config.pos_weight != AUTO and len(np.unique(y)) < 2:
        raise MieoValidationError("The training labels contain a single class.")
    model.pos_weight = float(pos_weight)
    has_validation = val_features is not None and len(val_features) > 0
    if has_validation:
        val_x, val_y = _check_training_data(
            val_features, val_labels, model.input_dim, "validation"
        )

    net = model.network

    def evaluate(features, labels) -> tuple[float, float]:
        logits = forward(net, features, training=False).output
        loss = weighted_bce(expit(logits[:, 0]), labels, pos_weight)
        predictions = (expit(logits[:, 0]) >= config.decision_threshold).astype(np.int8)
        report = classification_report(predictions, labels.astype(np.int8))
        return loss, report.balanced_accuracy

    def record(epoch: int, train_loss: float) -> ClassifierEpoch:
        if not has_validation:
            return ClassifierEpoch(epoch, train_loss, None, None)
        return ClassifierEpoch(epoch, train_loss, *evaluate(val_x, val_y))

    history = [record(0, evaluate(x, y)[0])]
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    net.train()
    n_rows = x.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_rows)
        total, seen = 0.0, 0
        for start in range(0, n_rows, config.batch_size):
            rows = order[start : start + config.batch_size]
            if rows.size < 2:
                logger.debug("Skipping a batch of one row in epoch %d", epoch)
                continue
            result = forward(net, x[rows], training=True)
            loss, grad = weighted_bce_with_grad(result.output, y[rows], pos_weight)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"Classifier loss became {loss} at epoch {epoch} (lr={config.lr})."
                )
            adam_step(net, backward(net, result.cache, grad), state)
            total += loss * rows.size
            seen += rows.size

        entry = record(epoch, total / seen if seen else 0.0)
        history.append(entry)
        logger.info(
            "Classifier epoch %d/%d: train %.5f, validation balanced accuracy %s",
            epoch,
            config.epochs,
            entry.train_loss,
            "n/a"
            if entry.validation_balanced_accuracy is None
            else f"{entry.validation_balanced_accuracy:.4f}",
        )

    net.eval()
    return model, history
