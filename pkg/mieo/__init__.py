"""MIEO: masked-input autoencoder for mixed binary/continuous tabular data."""

__version__ = "0.1.0b1"

from .autoencoder import (  # NOQA
    MieoConfig,
    MieoModel,
    build_mieo,
    composite_loss,
    encode,
    evaluate_reconstruction,
    impute,
    imputation_scores,
    make_masked_input,
    mieo_loss,
    train_mieo,
)
from .classifier import (  # NOQA
    ClassifierConfig,
    ClassifierModel,
    InputMode,
    auto_pos_weight,
    build_classifier,
    predict,
    raw_features,
    train_classifier,
    weighted_bce,
)
from .data import (  # NOQA
    FeatureSchema,
    TabularDataset,
    derive_labels,
    load_csv,
    null_mask,
    preprocess,
    split,
    write_csv,
)
from .exceptions import (  # NOQA
    ConfigError,
    ConstructionError,
    CsvParseError,
    EmptyDatasetError,
    MieoError,
    MieoRuntimeError,
    MieoValidationError,
    NonFiniteLossError,
    SchemaError,
    SearchError,
    ShapeError,
    StaleCacheError,
    StratificationError,
)
from .metrics import classification_report, confusion_matrix, format_report  # NOQA
from .search import (  # NOQA
    GridSpec,
    baseline_select,
    deferred_select,
    expand_grid,
    final_evaluate,
    load_grid,
    ranking_disagreements,
)
from .synth import SynthSpec, bayes_reference, cohort_like_spec, generate  # NOQA
