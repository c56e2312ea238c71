"""Grid search with deferred selection.

MIEO candidates are not ranked by how well they reconstruct their input. Every
encoder is paired with every classifier configuration and the pair with the
best downstream validation balanced accuracy wins. Model selection only ever
sees a :class:`~mieo.data.SelectionData`; the test split reaches
:func:`final_evaluate` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import json
import logging
from pathlib import Path
import time
from typing import Any, Mapping, Sequence, Union

from joblib import Parallel, delayed
import numpy as np
import yaml

from .autoencoder import (
    LossBreakdown,
    MieoConfig,
    MieoModel,
    build_mieo,
    encode,
    evaluate_reconstruction,
    train_mieo,
)
from .classifier import (
    ClassifierConfig,
    ClassifierModel,
    InputMode,
    build_classifier,
    model_features,
    predict,
    raw_features,
    train_classifier,
)
from .data import (
    SelectionData,
    TabularDataset,
    apply_standardization,
    fit_standardization,
)
from .exceptions import ConfigError, EmptyDatasetError, MieoError, SearchError
from .metrics import MetricsReport, classification_report, format_table

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """Candidate values per hyperparameter.

    Axes are expanded in sorted name order with the last axis varying fastest.
    """

    axes: Mapping[str, Sequence[Any]]

    def __post_init__(self):
        axes = {}
        for name in sorted(self.axes):
            values = self.axes[name]
            if isinstance(values, (str, bytes)) or not isinstance(values, Sequence):
                raise ConfigError(f"Grid axis {name!r} must be a list of values.")
            if len(values) == 0:
                raise ConfigError(f"Grid axis {name!r} is empty.")
            axes[name] = tuple(values)
        object.__setattr__(self, "axes", axes)

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()], dtype=np.int64))

    def to_dict(self) -> dict[str, list]:
        return {name: list(values) for name, values in self.axes.items()}

    @classmethod
    def load(cls, path: str | Path) -> GridSpec:
        grid = load_grid(path)
        if not isinstance(grid, GridSpec):
            raise ConfigError(f"Grid file {path} must contain an object of axes.")
        return grid


# A product grid, or an explicit list of candidate settings tried in order.
Grid = Union[GridSpec, Sequence[Mapping[str, Any]]]


def load_grid(path: str | Path) -> Grid:
    """An object of axes gives a product grid, a list gives candidates.

    Grid files are JSON, or YAML when they end with ``.yaml`` or ``.yml``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"Could not parse grid file {path}: {err}") from err
    if isinstance(data, dict):
        return GridSpec(data)
    if isinstance(data, list) and data and all(isinstance(c, dict) for c in data):
        return data
    raise ConfigError(
        f"Grid file {path} must hold an object of axes or a non-empty list of objects."
    )


def expand_grid(spec: GridSpec) -> list[dict[str, Any]]:
    names = list(spec.axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*spec.axes.values())]


def candidates(grid: Grid) -> list[dict[str, Any]]:
    if isinstance(grid, GridSpec):
        return expand_grid(grid)
    if not grid:
        raise ConfigError("A candidate list must not be empty.")
    return [dict(settings) for settings in grid]


@dataclass
class TrialRecord:
    """Outcome of one (MIEO, classifier) pair.

    ``mieo_config`` is None for classifiers trained on raw rows.
    """

    index: int
    mieo_index: int | None
    clf_index: int
    mieo_config: dict[str, Any] | None
    clf_config: dict[str, Any]
    seed: int
    validation: MetricsReport | None = None
    reconstruction: LossBreakdown | None = None
    wall_time: float = 0.0
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def sort_key(self) -> tuple:
        """Larger is better; distinct trials never compare equal."""
        recon = 0.0 if self.reconstruction is None else self.reconstruction.total
        return (
            self.validation.balanced_accuracy,
            self.validation.macro_f1,
            -recon,
            -self.index,
        )

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        data = {
            "index": self.index,
            "mieo_index": self.mieo_index,
            "clf_index": self.clf_index,
            "mieo_config": self.mieo_config,
            "clf_config": self.clf_config,
            "seed": self.seed,
            "validation": (
                None if self.validation is None else self.validation.to_dict()
            ),
            "reconstruction": (
                None if self.reconstruction is None else self.reconstruction.to_dict()
            ),
            "error": self.error,
        }
        if timing:
            data["wall_time"] = self.wall_time
        return data


@dataclass
class SelectionResult:
    mieo: MieoModel | None
    classifier: ClassifierModel
    best: TrialRecord
    trials: list[TrialRecord] = field(default_factory=list)

    @property
    def validation_report(self) -> MetricsReport:
        return self.best.validation


def _pair_budget(n_mieo: int, n_clf: int, max_trials: int | None) -> list[int]:
    """Classifier configs tried per MIEO config, keeping the first pairs in order."""
    total = n_mieo * n_clf
    if max_trials is not None:
        if max_trials < 1:
            raise ConfigError(f"max_trials must be positive, got {max_trials}.")
        total = min(total, max_trials)
    return [min(n_clf, total - i * n_clf) for i in range(n_mieo) if total > i * n_clf]


def _check_selection(data: SelectionData) -> None:
    for name in ("train", "validation"):
        ds = getattr(data, name)
        if len(ds) == 0:
            raise EmptyDatasetError(f"The {name} split is empty.")
        if ds.n_labelled != len(ds):
            raise SearchError(f"The {name} split contains unlabelled rows.")


def _fit_classifiers(
    clf_configs: Sequence[ClassifierConfig],
    n_clf: int,
    build,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    records: list[TrialRecord],
) -> ClassifierModel | None:
    """Train the first ``n_clf`` classifier configs; fill ``records`` in place."""
    best_model, best_key = None, None
    for record, config in zip(records, clf_configs[:n_clf]):
        start = time.perf_counter()
        try:
            model = build(config)
            train_classifier(model, train_x, train_y, config=config)
            predictions = predict(model, val_x).labels
            record.validation = classification_report(predictions, val_y)
        except MieoError as err:
            record.error = f"{type(err).__name__}: {err}"
            logger.warning("Trial %d failed: %s", record.index, record.error)
            continue
        finally:
            record.wall_time += time.perf_counter() - start
        key = record.sort_key()
        if best_key is None or key > best_key:
            best_model, best_key = model, key
    return best_model


def _mieo_trials(
    mieo_index: int,
    mieo_config: MieoConfig,
    clf_configs: Sequence[ClassifierConfig],
    n_clf: int,
    data: SelectionData,
    seed: int,
) -> tuple[list[TrialRecord], MieoModel | None, ClassifierModel | None]:
    """Train one encoder, then every classifier on its embeddings."""
    n_total = len(clf_configs)
    records = [
        TrialRecord(
            index=mieo_index * n_total + j,
            mieo_index=mieo_index,
            clf_index=j,
            mieo_config=mieo_config.to_dict(),
            clf_config=clf_configs[j].to_dict(),
            seed=seed,
        )
        for j in range(n_clf)
    ]

    start = time.perf_counter()
    stats = fit_standardization(data.train)
    try:
        mieo = build_mieo(
            mieo_config, data.train.schema, seed=seed, standardization=stats
        )
        pool = TabularDataset.concat(
            [
                apply_standardization(stats, data.train),
                apply_standardization(stats, data.unlabelled),
            ]
        )
        validation = apply_standardization(stats, data.validation)
        train_mieo(mieo, pool, validation, mieo_config)
        reconstruction = evaluate_reconstruction(mieo, validation, mieo_config.seed + 1)
        train_x = encode(mieo, data.train)
        val_x = encode(mieo, data.validation)
    except MieoError as err:
        message = f"{type(err).__name__}: {err}"
        logger.warning("MIEO config %d failed: %s", mieo_index, message)
        for record in records:
            record.error = message
            record.wall_time = time.perf_counter() - start
        return records, None, None

    elapsed = time.perf_counter() - start
    for record in records:
        record.reconstruction = reconstruction
        record.wall_time = elapsed / max(len(records), 1)

    def build(config: ClassifierConfig) -> ClassifierModel:
        return build_classifier(
            config, mieo.embedding_dim, InputMode.EMBEDDING, seed=seed
        )

    best = _fit_classifiers(
        clf_configs,
        n_clf,
        build,
        train_x,
        data.train.labels,
        val_x,
        data.validation.labels,
        records,
    )
    return records, mieo, best


def _pick(records: Sequence[TrialRecord]) -> TrialRecord:
    succeeded = [r for r in records if not r.failed]
    if not succeeded:
        raise SearchError(f"All {len(records)} trials failed.")
    return max(succeeded, key=TrialRecord.sort_key)


def ranking_disagreements(records: Sequence[TrialRecord]) -> list[tuple[int, int]]:
    """Pairs ``(a, b)`` where ``a`` reconstructs better but ``b`` classifies better.

    Only successful trials with a reconstruction loss and different encoders
    are compared.
    """
    scored = [r for r in records if not r.failed and r.reconstruction is not None]
    pairs = []
    for a, b in itertools.permutations(scored, 2):
        if a.mieo_index == b.mieo_index:
            continue
        if (
            a.reconstruction.total < b.reconstruction.total
            and a.validation.balanced_accuracy < b.validation.balanced_accuracy
        ):
            pairs.append((a.index, b.index))
    return pairs


def deferred_select(
    mieo_grid: Grid,
    clf_grid: Grid,
    data: SelectionData,
    seed: int,
    max_trials: int | None = None,
    n_jobs: int = 1,
) -> SelectionResult:
    """Pick the (MIEO, classifier) pair with the best validation balanced accuracy.

    Ties go to the higher macro F1, then the lower validation reconstruction
    loss, then the earlier grid position. Every trial uses ``seed``; encoders
    run in parallel with ``n_jobs`` workers and are merged in grid order.
    """
    _check_selection(data)
    seeded = {"seed": seed}
    mieo_configs = [
        MieoConfig.from_settings(settings, seeded) for settings in candidates(mieo_grid)
    ]
    clf_configs = [
        ClassifierConfig.from_settings(settings, seeded)
        for settings in candidates(clf_grid)
    ]
    budget = _pair_budget(len(mieo_configs), len(clf_configs), max_trials)
    logger.info(
        "Searching %d MIEO x %d classifier configs (%d trials)",
        len(mieo_configs),
        len(clf_configs),
        sum(budget),
    )

    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_mieo_trials)(i, mieo_configs[i], clf_configs, n_clf, data, seed)
        for i, n_clf in enumerate(budget)
    )

    trials = [record for records, _, _ in outcomes for record in records]
    best = _pick(trials)
    _, mieo, classifier = outcomes[best.mieo_index]
    logger.info(
        "Selected trial %d: balanced accuracy %.4f",
        best.index,
        best.validation.balanced_accuracy,
    )
    return SelectionResult(mieo, classifier, best, trials)


def baseline_select(
    clf_grid: Grid,
    data: SelectionData,
    seed: int,
    max_trials: int | None = None,
) -> SelectionResult:
    """The same search for classifiers reading raw ``[values ; mask]`` rows."""
    _check_selection(data)
    configs = [
        ClassifierConfig.from_settings(settings, {"seed": seed})
        for settings in candidates(clf_grid)
    ]
    n_clf = _pair_budget(1, len(configs), max_trials)[0]
    stats = fit_standardization(data.train)
    schema = data.train.schema
    train, validation = (
        apply_standardization(stats, data.train),
        apply_standardization(stats, data.validation),
    )
    records = [
        TrialRecord(j, None, j, None, configs[j].to_dict(), seed) for j in range(n_clf)
    ]

    def build(config: ClassifierConfig) -> ClassifierModel:
        return build_classifier(
            config,
            2 * schema.n_features,
            InputMode.RAW,
            seed=seed,
            schema=schema,
            standardization=stats,
        )

    classifier = _fit_classifiers(
        configs,
        n_clf,
        build,
        raw_features(train.values),
        data.train.labels,
        raw_features(validation.values),
        data.validation.labels,
        records,
    )
    best = _pick(records)
    return SelectionResult(None, classifier, best, records)


def final_evaluate(
    classifier: ClassifierModel, test: TabularDataset, mieo: MieoModel | None = None
) -> MetricsReport:
    """Report on the held-out test split; nothing is updated."""
    if len(test) == 0:
        raise EmptyDatasetError("The test split is empty.")
    if test.n_labelled != len(test):
        raise SearchError("The test split contains unlabelled rows.")
    predictions = predict(classifier, model_features(classifier, test, mieo)).labels
    return classification_report(predictions, test.labels)


def reports_to_dict(
    columns: Sequence[tuple[str, MetricsReport, MetricsReport | None]]
) -> dict[str, Any]:
    """``{"validation": {model: report}, "test": {model: report}}`` for JSON output."""
    data: dict[str, Any] = {"validation": {}, "test": {}}
    for name, validation, test in columns:
        data["validation"][name] = validation.to_dict()
        if test is not None:
            data["test"][name] = test.to_dict()
    return data


def comparison_report(
    columns: Sequence[tuple[str, MetricsReport, MetricsReport | None]]
) -> str:
    """Validation and test blocks with the models side by side."""
    blocks = [
        format_table([(name, v) for name, v, _ in columns], title="Validation dataset")
    ]
    if all(t is not None for _, _, t in columns):
        blocks.append(
            format_table([(name, t) for name, _, t in columns], title="Test dataset")
        )
    return "\n\n".join(blocks)
