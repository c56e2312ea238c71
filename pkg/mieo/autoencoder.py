"""The MIEO autoencoder (Masked Input, Encoded Output).

The encoder reads ``[zero-filled values ; observedness mask]`` (width ``2F``)
and the decoder reconstructs the ``F`` original features: a sigmoid head on
binary positions and a linear head on continuous ones. The loss only looks at
cells that were observed in the original data, so cells hidden by training-time
augmentation become reconstruction targets.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from . import _model_io
from .config import (
    DEFAULT_MIEO_SETTINGS,
    as_float,
    as_int,
    as_widths,
    resolve_settings,
)
from .data import FeatureSchema, StandardizationStats, TabularDataset
from .exceptions import (
    ConfigError,
    ConstructionError,
    EmptyDatasetError,
    NonFiniteLossError,
    SchemaError,
)
from .nn_core import (
    Activation,
    AdamState,
    LayerSpec,
    Network,
    adam_step,
    backward,
    forward,
    init_network,
)

logger = logging.getLogger(__name__)

N_LAYERS = 4
# Probabilities are clamped into [CLAMP, 1 - CLAMP] before taking logs.
CLAMP = 1e-7
MODEL_KIND = "mieo"


def geometric_widths(start: int, end: int, n_layers: int = N_LAYERS) -> tuple[int, ...]:
    """``n_layers`` widths moving geometrically from ``start`` to exactly ``end``."""
    ratio = end / start
    widths = [
        max(1, round(start * ratio ** (k / n_layers))) for k in range(1, n_layers)
    ]
    return tuple(widths) + (end,)


@dataclass(frozen=True)
class MieoConfig:
    embedding_dim: int = DEFAULT_MIEO_SETTINGS["embedding_dim"]
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None
    w_bin: float = DEFAULT_MIEO_SETTINGS["w_bin"]
    w_cont: float = DEFAULT_MIEO_SETTINGS["w_cont"]
    aug_mask_prob: float = DEFAULT_MIEO_SETTINGS["aug_mask_prob"]
    leaky_slope: float = DEFAULT_MIEO_SETTINGS["leaky_slope"]
    embedding_batchnorm: bool = DEFAULT_MIEO_SETTINGS["embedding_batchnorm"]
    lr: float = DEFAULT_MIEO_SETTINGS["lr"]
    epochs: int = DEFAULT_MIEO_SETTINGS["epochs"]
    batch_size: int = DEFAULT_MIEO_SETTINGS["batch_size"]
    seed: int = DEFAULT_MIEO_SETTINGS["seed"]

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be at least 1.")
        if self.w_bin < 0 or self.w_cont < 0 or self.w_bin + self.w_cont <= 0:
            raise ConfigError(
                "Loss weights must be non-negative with a positive sum, got "
                f"w_bin={self.w_bin}, w_cont={self.w_cont}."
            )
        if not 0 <= self.aug_mask_prob < 1:
            raise ConfigError(
                f"aug_mask_prob must be in [0, 1), got {self.aug_mask_prob}."
            )
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}.")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}.")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}.")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for BatchNorm.")
        for name in ("encoder_widths", "decoder_widths"):
            widths = getattr(self, name)
            if widths is None:
                continue
            widths = tuple(int(w) for w in widths)
            object.__setattr__(self, name, widths)
            if len(widths) != N_LAYERS or min(widths) < 1:
                raise ConfigError(f"{name} must list {N_LAYERS} positive widths.")
        if self.encoder_widths and self.encoder_widths[-1] != self.embedding_dim:
            raise ConfigError("The last encoder width must equal embedding_dim.")

    @classmethod
    def from_settings(
        cls,
        settings: Mapping[str, Any] | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> MieoConfig:
        s = resolve_settings(DEFAULT_MIEO_SETTINGS, settings, overrides)
        return cls(
            embedding_dim=as_int("embedding_dim", s["embedding_dim"]),
            encoder_widths=as_widths("encoder_widths", s["encoder_widths"]),
            decoder_widths=as_widths("decoder_widths", s["decoder_widths"]),
            w_bin=as_float("w_bin", s["w_bin"]),
            w_cont=as_float("w_cont", s["w_cont"]),
            aug_mask_prob=as_float("aug_mask_prob", s["aug_mask_prob"]),
            leaky_slope=as_float("leaky_slope", s["leaky_slope"]),
            embedding_batchnorm=bool(s["embedding_batchnorm"]),
            lr=as_float("lr", s["lr"]),
            epochs=as_int("epochs", s["epochs"]),
            batch_size=as_int("batch_size", s["batch_size"]),
            seed=as_int("seed", s["seed"]),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "embedding_dim": self.embedding_dim,
            "encoder_widths": _list_or_none(self.encoder_widths),
            "decoder_widths": _list_or_none(self.decoder_widths),
            "w_bin": self.w_bin,
            "w_cont": self.w_cont,
            "aug_mask_prob": self.aug_mask_prob,
            "leaky_slope": self.leaky_slope,
            "embedding_batchnorm": self.embedding_batchnorm,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    def resolved_widths(self, schema: FeatureSchema) -> tuple[tuple[int, ...], ...]:
        """Encoder and decoder widths, defaulting to geometric interpolation."""
        n_features = schema.n_features
        encoder = self.encoder_widths or geometric_widths(
            2 * n_features, self.embedding_dim
        )
        decoder = self.decoder_widths or geometric_widths(
            self.embedding_dim, n_features
        )
        if decoder[-1] != n_features:
            raise ConstructionError(
                f"The decoder must end with {n_features} outputs, got {decoder[-1]}."
            )
        return encoder, decoder


def _list_or_none(widths):
    return None if widths is None else list(widths)


class MieoModel:
    """Encoder and decoder networks plus everything needed to read raw rows."""

    def __init__(
        self,
        encoder: Network,
        decoder: Network,
        schema: FeatureSchema,
        config: MieoConfig,
        standardization: StandardizationStats | None = None,
    ):
        n_features = schema.n_features
        if encoder.in_dim != 2 * n_features:
            raise ConstructionError(
                f"The encoder must read {2 * n_features} inputs (values and mask), "
                f"got {encoder.in_dim}."
            )
        if decoder.in_dim != encoder.out_dim or decoder.out_dim != n_features:
            raise ConstructionError(
                f"The decoder must map {encoder.out_dim} embedding features to "
                f"{n_features} outputs."
            )
        if standardization is not None:
            standardization.check(schema)
        self.encoder = encoder
        self.decoder = decoder
        self.schema = schema
        self.config = config
        self.standardization = standardization
        # Shares the encoder and decoder layers; used for training.
        self.autoencoder = Network.chain(encoder, decoder)

    @property
    def embedding_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def heads(self) -> list[str]:
        return ["sigmoid" if binary else "linear" for binary in self.schema.is_binary]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": self.schema.to_dict(),
            "standardization": (
                None if self.standardization is None else self.standardization.to_dict()
            ),
            "config": self.config.to_dict(),
            "heads": self.heads,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MieoModel:
        stats = data.get("standardization")
        model = cls(
            encoder=Network.from_dict(data["encoder"]),
            decoder=Network.from_dict(data["decoder"]),
            schema=FeatureSchema.from_dict(data["schema"]),
            config=MieoConfig.from_settings(data["config"]),
            standardization=(
                None if stats is None else StandardizationStats.from_dict(stats)
            ),
        )
        model.encoder.eval()
        model.decoder.eval()
        return model

    def save(self, path: str | Path) -> None:
        _model_io.save_document(path, MODEL_KIND, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> MieoModel:
        return cls.from_dict(_model_io.load_document(path, MODEL_KIND))


def build_mieo(
    config: MieoConfig,
    schema: FeatureSchema,
    seed: int | None = None,
    standardization: StandardizationStats | None = None,
) -> MieoModel:
    """Four encoder and four decoder layers, each Linear -> BN -> LeakyReLU.

    The decoder output layer is linear; the sigmoid on binary positions is
    applied by the loss and by inference.
    """
    encoder_widths, decoder_widths = config.resolved_widths(schema)
    slope = config.leaky_slope

    specs, in_dim = [], 2 * schema.n_features
    for i, width in enumerate(encoder_widths):
        is_embedding = i == N_LAYERS - 1
        hidden = not is_embedding or config.embedding_batchnorm
        specs.append(
            LayerSpec(
                in_dim,
                width,
                has_batchnorm=hidden,
                activation=Activation.LEAKY_RELU if hidden else Activation.IDENTITY,
                slope=slope,
            )
        )
        in_dim = width
    for i, width in enumerate(decoder_widths):
        hidden = i < N_LAYERS - 1
        specs.append(
            LayerSpec(
                in_dim,
                width,
                has_batchnorm=hidden,
                activation=Activation.LEAKY_RELU if hidden else Activation.IDENTITY,
                slope=slope,
            )
        )
        in_dim = width

    network = init_network(specs, config.seed if seed is None else seed)
    encoder = Network(network.layers[:N_LAYERS])
    decoder = Network(network.layers[N_LAYERS:])
    return MieoModel(encoder, decoder, schema, config, standardization)


def make_masked_input(
    values: np.ndarray,
    observed_mask: np.ndarray,
    aug_mask_prob: float,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Hide extra observed cells, then build ``[zero-filled values ; mask]``.

    Works on a single row or on a batch of rows. Returns the network input and
    the effective mask, which is always a subset of ``observed_mask``.
    """
    if not 0 <= aug_mask_prob < 1:
        raise ConfigError(f"aug_mask_prob must be in [0, 1), got {aug_mask_prob}.")
    values = np.asarray(values, dtype=np.float64)
    effective = np.asarray(observed_mask, dtype=bool) & ~np.isnan(values)
    if aug_mask_prob > 0:
        if rng is None:
            raise ConfigError("Augmentation masking needs a random generator.")
        effective &= rng.random(values.shape) >= aug_mask_prob

    filled = np.where(effective, values, 0.0)
    return np.concatenate([filled, effective.astype(np.float64)], axis=-1), effective


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    bce_part: float
    mse_part: float
    n_bin_observed: int
    n_cont_observed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "bce_part": self.bce_part,
            "mse_part": self.mse_part,
            "n_bin_observed": self.n_bin_observed,
            "n_cont_observed": self.n_cont_observed,
        }


def _binary_index(is_binary: np.ndarray | FeatureSchema) -> np.ndarray:
    if isinstance(is_binary, FeatureSchema):
        return is_binary.is_binary
    return np.asarray(is_binary, dtype=bool)


def _breakdown(bce_sum, mse_sum, n_bin, n_cont, w_bin, w_cont) -> LossBreakdown:
    bce_part = float(bce_sum / n_bin) if n_bin else 0.0
    mse_part = float(mse_sum / n_cont) if n_cont else 0.0
    total = w_bin * bce_part + w_cont * mse_part
    return LossBreakdown(total, bce_part, mse_part, int(n_bin), int(n_cont))


def _masked_terms(output, target, target_mask, is_binary):
    output = np.asarray(output, dtype=np.float64)
    mask = np.asarray(target_mask, dtype=bool)
    target = np.where(mask, np.nan_to_num(np.asarray(target, dtype=np.float64)), 0.0)
    bin_obs = mask & is_binary
    cont_obs = mask & ~is_binary

    p = np.clip(output, CLAMP, 1 - CLAMP)
    bce = -(target * np.log(p) + (1 - target) * np.log1p(-p))
    bce_sum = np.where(bin_obs, bce, 0.0).sum()
    mse_sum = np.where(cont_obs, (output - target) ** 2, 0.0).sum()
    return output, target, bin_obs, cont_obs, bce_sum, mse_sum


def mieo_loss(
    output: np.ndarray,
    target: np.ndarray,
    target_mask: np.ndarray,
    is_binary: np.ndarray | FeatureSchema,
    w_bin: float,
    w_cont: float,
) -> LossBreakdown:
    """Composite masked loss of a row or a batch of rows.

    ``output`` holds probabilities at binary positions and raw values at
    continuous ones. Means run over observed entries of each kind; a kind with
    no observed entry contributes 0.
    """
    *_, bin_obs, cont_obs, bce_sum, mse_sum = _masked_terms(
        output, target, target_mask, _binary_index(is_binary)
    )
    return _breakdown(bce_sum, mse_sum, bin_obs.sum(), cont_obs.sum(), w_bin, w_cont)


def decoder_output(logits: np.ndarray, is_binary: np.ndarray) -> np.ndarray:
    """Apply the sigmoid head on binary positions only."""
    return np.where(is_binary, expit(logits), logits)


def composite_loss(
    logits: np.ndarray,
    target: np.ndarray,
    target_mask: np.ndarray,
    is_binary: np.ndarray | FeatureSchema,
    w_bin: float,
    w_cont: float,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss of the decoder logits and its gradient w.r.t. those logits."""
    is_binary = _binary_index(is_binary)
    output = decoder_output(logits, is_binary)
    output, target, bin_obs, cont_obs, bce_sum, mse_sum = _masked_terms(
        output, target, target_mask, is_binary
    )
    n_bin, n_cont = bin_obs.sum(), cont_obs.sum()
    loss = _breakdown(bce_sum, mse_sum, n_bin, n_cont, w_bin, w_cont)

    grad = np.zeros_like(output)
    if n_bin:
        # d BCE / d logit is (p - t); the clamp has zero slope outside its range.
        live = bin_obs & (output > CLAMP) & (output < 1 - CLAMP)
        grad += np.where(live, output - target, 0.0) * (w_bin / n_bin)
    if n_cont:
        grad += np.where(cont_obs, 2 * (output - target), 0.0) * (w_cont / n_cont)
    return loss, grad


@dataclass(frozen=True)
class EpochRecord:
    """Losses after ``epoch`` training epochs; epoch 0 is the untrained model."""

    epoch: int
    train: LossBreakdown
    validation: LossBreakdown | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "train": self.train.to_dict(),
            "validation": (
                None if self.validation is None else self.validation.to_dict()
            ),
        }


def _check_pool(model: MieoModel, pool: TabularDataset, name: str) -> None:
    if pool.schema != model.schema:
        raise SchemaError(f"The {name} pool does not use the model's schema.")


def evaluate_reconstruction(
    model: MieoModel,
    pool: TabularDataset,
    seed: int,
    aug_mask_prob: float | None = None,
) -> LossBreakdown:
    """Inference-mode loss on a standardized pool under one fixed augmentation mask."""
    _check_pool(model, pool, "evaluation")
    config = model.config
    p = config.aug_mask_prob if aug_mask_prob is None else aug_mask_prob
    if len(pool) == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0, 0)

    x, _ = make_masked_input(pool.values, pool.observed, p, np.random.default_rng(seed))
    logits = forward(model.autoencoder, x, training=False).output
    loss, _ = composite_loss(
        logits, pool.values, pool.observed, model.schema, config.w_bin, config.w_cont
    )
    return loss


def train_mieo(
    model: MieoModel,
    train_pool: TabularDataset,
    val_pool: TabularDataset | None = None,
    config: MieoConfig | None = None,
) -> tuple[MieoModel, list[EpochRecord]]:
    """Minibatch Adam on the composite loss with fresh augmentation every epoch.

    Pools must already be standardized. The loss target is always the original
    row with its original null mask.
    """
    config = config or model.config
    if len(train_pool) == 0:
        raise EmptyDatasetError("Cannot train MIEO on an empty pool.")
    _check_pool(model, train_pool, "training")
    if val_pool is not None:
        _check_pool(model, val_pool, "validation")

    # The validation mask is drawn once from seed + 1 and reused every epoch.
    val_seed = config.seed + 1

    def validate() -> LossBreakdown | None:
        if val_pool is None or len(val_pool) == 0:
            return None
        return evaluate_reconstruction(model, val_pool, val_seed, config.aug_mask_prob)

    history = [
        EpochRecord(
            0,
            evaluate_reconstruction(model, train_pool, val_seed, config.aug_mask_prob),
            validate(),
        )
    ]

    rng = np.random.default_rng(config.seed)
    net = model.autoencoder.train()
    state = AdamState(lr=config.lr)
    is_binary = model.schema.is_binary
    values, observed = train_pool.values, train_pool.observed
    n_rows = len(train_pool)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_rows)
        bce_sum = mse_sum = 0.0
        n_bin = n_cont = 0
        for batch_index, start in enumerate(range(0, n_rows, config.batch_size)):
            rows = order[start : start + config.batch_size]
            if rows.size < 2:
                logger.debug("Skipping a batch of one row in epoch %d", epoch)
                continue
            x, _ = make_masked_input(
                values[rows], observed[rows], config.aug_mask_prob, rng
            )
            result = forward(net, x, training=True)
            loss, grad = composite_loss(
                result.output,
                values[rows],
                observed[rows],
                is_binary,
                config.w_bin,
                config.w_cont,
            )
            if not np.isfinite(loss.total):
                raise NonFiniteLossError(
                    f"MIEO loss became {loss.total} at epoch {epoch}, batch "
                    f"{batch_index} (bce={loss.bce_part}, mse={loss.mse_part}, "
                    f"lr={config.lr})."
                )
            adam_step(net, backward(net, result.cache, grad), state)

            bce_sum += loss.bce_part * loss.n_bin_observed
            mse_sum += loss.mse_part * loss.n_cont_observed
            n_bin += loss.n_bin_observed
            n_cont += loss.n_cont_observed

        record = EpochRecord(
            epoch,
            _breakdown(bce_sum, mse_sum, n_bin, n_cont, config.w_bin, config.w_cont),
            validate(),
        )
        history.append(record)
        logger.info(
            "MIEO epoch %d/%d: train %.5f, validation %s",
            epoch,
            config.epochs,
            record.train.total,
            "n/a" if record.validation is None else f"{record.validation.total:.5f}",
        )

    net.eval()
    return model, history


def _rows(
    model: MieoModel, values: Any, observed_mask: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Normalize input rows to 2-D arrays; remember whether a single row came in."""
    if isinstance(values, TabularDataset):
        if values.schema != model.schema:
            raise SchemaError("The dataset does not use the model's schema.")
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    if values.ndim != 2 or values.shape[1] != model.schema.n_features:
        raise SchemaError(
            f"Rows must have {model.schema.n_features} features, got shape "
            f"{values.shape}."
        )
    observed = ~np.isnan(values)
    if observed_mask is not None:
        mask = np.atleast_2d(np.asarray(observed_mask, dtype=bool))
        if mask.shape != values.shape:
            raise SchemaError(
                f"Mask shape {mask.shape} does not match rows {values.shape}."
            )
        observed &= mask
    return values, observed, single


def _standardize(model: MieoModel, values: np.ndarray) -> np.ndarray:
    if model.standardization is None:
        return values
    values = values.copy()
    continuous = model.schema.is_continuous
    values[:, continuous] = model.standardization.transform(values[:, continuous])
    return values


def embed_standardized(
    model: MieoModel, values: np.ndarray, observed: np.ndarray
) -> np.ndarray:
    """Embeddings of already standardized rows; no augmentation at inference."""
    x, _ = make_masked_input(values, observed, 0.0)
    return forward(model.encoder, x, training=False).output


def encode(
    model: MieoModel, values: Any, observed_mask: np.ndarray | None = None
) -> np.ndarray:
    """Embed rows given in original units."""
    values, observed, single = _rows(model, values, observed_mask)
    embedding = embed_standardized(model, _standardize(model, values), observed)
    return embedding[0] if single else embedding


@dataclass(frozen=True)
class Imputation:
    """Completed rows in original units.

    ``values`` fills missing binary cells with the sigmoid probability,
    ``hard_values`` thresholds those probabilities at 0.5.
    """

    values: np.ndarray
    hard_values: np.ndarray


def impute(
    model: MieoModel, values: Any, observed_mask: np.ndarray | None = None
) -> Imputation:
    """Fill unobserved cells from the decoder; observed cells pass through."""
    values, observed, single = _rows(model, values, observed_mask)
    schema = model.schema
    embedding = embed_standardized(model, _standardize(model, values), observed)
    logits = forward(model.decoder, embedding, training=False).output
    output = decoder_output(logits, schema.is_binary)
    if model.standardization is not None:
        continuous = schema.is_continuous
        output[:, continuous] = model.standardization.inverse(output[:, continuous])

    soft = np.where(observed, values, output)
    hard = soft.copy()
    binary_fill = ~observed & schema.is_binary
    hard[binary_fill] = (output[binary_fill] >= 0.5).astype(np.float64)
    if single:
        return Imputation(soft[0], hard[0])
    return Imputation(soft, hard)


@dataclass(frozen=True)
class ImputationScores:
    """Imputation quality on hidden cells against simple baselines."""

    mse: float
    mean_baseline_mse: float
    binary_accuracy: float
    majority_baseline_accuracy: float
    n_continuous_hidden: int
    n_binary_hidden: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def imputation_scores(
    model: MieoModel,
    masked: TabularDataset,
    ground_truth: TabularDataset,
    hidden: np.ndarray,
) -> ImputationScores:
    """Score imputation of the ``hidden`` cells of ``masked`` against the truth.

    Baselines fill continuous cells with the column mean and binary cells with
    the column majority, both taken from the cells ``masked`` still observes.
    """
    schema = model.schema
    hidden = np.asarray(hidden, dtype=bool)
    truth = ground_truth.values
    imputed = impute(model, masked).hard_values

    observed = masked.observed
    counts = observed.sum(axis=0)
    means = np.divide(
        np.where(observed, masked.values, 0.0).sum(axis=0),
        counts,
        out=np.zeros(schema.n_features),
        where=counts > 0,
    )
    majority = (means >= 0.5).astype(np.float64)

    cont_cells = hidden & schema.is_continuous & ~np.isnan(truth)
    bin_cells = hidden & schema.is_binary & ~np.isnan(truth)
    cols_cont = np.nonzero(cont_cells)[1]
    cols_bin = np.nonzero(bin_cells)[1]

    def mean_or_nan(x):
        return float(np.mean(x)) if x.size else float("nan")

    return ImputationScores(
        mse=mean_or_nan((imputed[cont_cells] - truth[cont_cells]) ** 2),
        mean_baseline_mse=mean_or_nan((means[cols_cont] - truth[cont_cells]) ** 2),
        binary_accuracy=mean_or_nan(imputed[bin_cells] == truth[bin_cells]),
        majority_baseline_accuracy=mean_or_nan(majority[cols_bin] == truth[bin_cells]),
        n_continuous_hidden=int(cont_cells.sum()),
        n_binary_hidden=int(bin_cells.sum()),
    )
