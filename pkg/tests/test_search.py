"""Tests for grid expansion and deferred selection."""

import json
import unittest
from unittest import mock

import numpy as np
import pytest

from mieo.autoencoder import LossBreakdown, train_mieo
from mieo.classifier import InputMode
from mieo.data import SelectionData, split
from mieo.exceptions import (
    ConfigError,
    EmptyDatasetError,
    NonFiniteLossError,
    SearchError,
)
from mieo.metrics import classification_report
from mieo.search import (
    GridSpec,
    TrialRecord,
    _pair_budget,
    _pick,
    baseline_select,
    candidates,
    comparison_report,
    deferred_select,
    expand_grid,
    final_evaluate,
    load_grid,
    ranking_disagreements,
)
from mieo.synth import SynthSpec, bayes_reference, cohort_like_spec, generate

MIEO_GRID = GridSpec({"embedding_dim": [3], "epochs": [1], "batch_size": [32]})
CLF_GRID = GridSpec({"hidden_widths": [[4, 4, 4]], "epochs": [2], "batch_size": [32]})


def _splits(n_rows=400, seed=0):
    spec = SynthSpec(
        n_binary=3,
        n_continuous=3,
        bernoulli_p=[0.3, 0.5, 0.7],
        gauss_mean=[0.0, 2.0, -1.0],
        gauss_std=[1.0, 1.0, 2.0],
        label_weights=[2.0, -1.0, 0.0, 1.5, 0.0, -0.5],
        intercept=-0.5,
        miss_rates=[0.05, 0.1, 0.0, 0.2, 0.0, 0.05],
        unlabelled_frac=0.25,
        n_rows=n_rows,
    )
    _, masked = generate(spec, seed)
    return split(masked, seed)


def _record(index, mieo_index, balanced_accuracy, recon):
    """A finished trial whose validation report has the given balanced accuracy."""
    n_hits = int(round(balanced_accuracy * 100))
    labels = np.array([0] * 100 + [1] * 100)
    predictions = np.array(
        [0] * n_hits + [1] * (100 - n_hits) + [1] * n_hits + [0] * (100 - n_hits)
    )
    record = TrialRecord(index, mieo_index, 0, {}, {}, seed=0)
    record.validation = classification_report(predictions, labels)
    record.reconstruction = LossBreakdown(recon, recon, 0.0, 1, 0)
    return record


class TestGrid(unittest.TestCase):
    """Axis ordering and trial budgets."""

    def test_expansion_order(self):
        grid = GridSpec({"b": [1, 2], "a": ["x", "y"]})
        self.assertEqual(
            [
                {"a": "x", "b": 1},
                {"a": "x", "b": 2},
                {"a": "y", "b": 1},
                {"a": "y", "b": 2},
            ],
            expand_grid(grid),
        )
        self.assertEqual(4, grid.size)

    def test_single_point(self):
        self.assertEqual([{"lr": 0.1}], expand_grid(GridSpec({"lr": [0.1]})))

    def test_empty_axis(self):
        with self.assertRaises(ConfigError) as context_manager:
            GridSpec({"lr": []})

        self.assertEqual("Grid axis 'lr' is empty.", str(context_manager.exception))

    def test_scalar_axis(self):
        with self.assertRaises(ConfigError) as context_manager:
            GridSpec({"lr": 0.1})

        self.assertEqual(
            "Grid axis 'lr' must be a list of values.", str(context_manager.exception)
        )

    def test_explicit_candidates(self):
        points = [{"epochs": 0}, {"epochs": 5, "lr": 0.1}]
        self.assertEqual(points, candidates(points))
        with self.assertRaises(ConfigError):
            candidates([])

    def test_load_grid(self):
        axes = self.tmp_path / "axes.json"
        axes.write_text(json.dumps({"lr": [0.1, 0.01]}))
        points = self.tmp_path / "points.json"
        points.write_text(json.dumps([{"epochs": 0}, {"epochs": 5}]))
        scalar = self.tmp_path / "scalar.json"
        scalar.write_text("3")

        self.assertEqual(GridSpec({"lr": [0.1, 0.01]}), load_grid(axes))
        self.assertEqual([{"epochs": 0}, {"epochs": 5}], load_grid(points))
        with self.assertRaises(ConfigError):
            load_grid(scalar)
        with self.assertRaises(ConfigError):
            GridSpec.load(points)

    def test_load_yaml_grid(self):
        axes = self.tmp_path / "axes.yaml"
        axes.write_text("lr: [0.1, 0.01]\nepochs:\n  - 5\n")
        points = self.tmp_path / "points.yml"
        points.write_text("- {epochs: 0}\n- {epochs: 5, lr: 0.1}\n")

        self.assertEqual(GridSpec({"lr": [0.1, 0.01], "epochs": [5]}), load_grid(axes))
        self.assertEqual([{"epochs": 0}, {"epochs": 5, "lr": 0.1}], load_grid(points))

    @pytest.fixture(autouse=True)
    def _tmp_path(self, tmp_path):
        self.tmp_path = tmp_path


@pytest.mark.parametrize(
    "n_mieo, n_clf, max_trials, expected",
    [
        (2, 3, None, [3, 3]),
        (2, 3, 4, [3, 1]),
        (2, 3, 3, [3]),
        (2, 3, 100, [3, 3]),
        (1, 1, 1, [1]),
    ],
)
def test_pair_budget(n_mieo, n_clf, max_trials, expected):
    assert _pair_budget(n_mieo, n_clf, max_trials) == expected


def test_pair_budget_must_be_positive():
    with pytest.raises(ConfigError):
        _pair_budget(2, 2, 0)


class TestRanking(unittest.TestCase):
    """Winner selection from finished trials."""

    def test_balanced_accuracy_wins(self):
        records = [_record(0, 0, 0.7, 0.1), _record(1, 1, 0.8, 0.9)]
        self.assertEqual(1, _pick(records).index)

    def test_ties_go_to_lower_reconstruction_loss(self):
        records = [_record(0, 0, 0.7, 0.5), _record(1, 1, 0.7, 0.2)]
        self.assertEqual(1, _pick(records).index)

    def test_ties_go_to_the_earlier_trial(self):
        records = [_record(0, 0, 0.7, 0.2), _record(1, 1, 0.7, 0.2)]
        self.assertEqual(0, _pick(records).index)

    def test_failed_trials_are_skipped(self):
        failed = _record(0, 0, 0.9, 0.1)
        failed.error = "NonFiniteLossError: boom"
        self.assertEqual(1, _pick([failed, _record(1, 1, 0.6, 0.1)]).index)

    def test_all_failed(self):
        failed = TrialRecord(0, 0, 0, {}, {}, seed=0, error="SearchError: boom")
        with self.assertRaises(SearchError) as context_manager:
            _pick([failed])

        self.assertEqual("All 1 trials failed.", str(context_manager.exception))

    def test_ranking_disagreements(self):
        records = [
            _record(0, 0, 0.6, 0.1),
            _record(1, 0, 0.9, 0.1),
            _record(2, 1, 0.8, 0.5),
        ]
        self.assertEqual([(0, 2)], ranking_disagreements(records))

    def test_trial_dict_omits_timing(self):
        record = _record(0, 0, 0.7, 0.2)
        record.wall_time = 1.5
        self.assertNotIn("wall_time", record.to_dict())
        self.assertEqual(1.5, record.to_dict(timing=True)["wall_time"])


class TestDeferredSelect(unittest.TestCase):
    """Search over encoders and classifiers on a small synthetic cohort."""

    @classmethod
    def setUpClass(cls):
        cls.splits = _splits()
        cls.data = cls.splits.for_selection()

    def test_one_by_one_grid(self):
        result = deferred_select(MIEO_GRID, CLF_GRID, self.data, seed=0)

        self.assertEqual(1, len(result.trials))
        self.assertEqual(0, result.best.index)
        self.assertIsNotNone(result.best.reconstruction)
        self.assertEqual(3, result.mieo.embedding_dim)
        self.assertIs(InputMode.EMBEDDING, result.classifier.input_mode)
        self.assertEqual(0, result.best.mieo_config["seed"])

    def test_same_seed_same_trials(self):
        grid = GridSpec({"embedding_dim": [2, 3], "epochs": [1], "batch_size": [32]})
        runs = [deferred_select(grid, CLF_GRID, self.data, seed=4) for _ in range(2)]
        self.assertEqual(
            [t.to_dict() for t in runs[0].trials], [t.to_dict() for t in runs[1].trials]
        )
        self.assertEqual(runs[0].best.index, runs[1].best.index)

    def test_parallel_matches_sequential(self):
        grid = GridSpec({"embedding_dim": [2, 3], "epochs": [1], "batch_size": [32]})
        sequential = deferred_select(grid, CLF_GRID, self.data, seed=1)
        parallel = deferred_select(grid, CLF_GRID, self.data, seed=1, n_jobs=2)

        self.assertEqual(
            [t.index for t in sequential.trials], [t.index for t in parallel.trials]
        )
        self.assertFalse(any(t.failed for t in parallel.trials))
        self.assertEqual(
            [t.mieo_config for t in sequential.trials],
            [t.mieo_config for t in parallel.trials],
        )

    def test_trial_budget(self):
        mieo_grid = GridSpec(
            {"embedding_dim": [2, 3], "epochs": [1], "batch_size": [32]}
        )
        clf_grid = GridSpec(
            {"hidden_widths": [[4, 4, 4]], "epochs": [1, 2], "batch_size": [32]}
        )
        result = deferred_select(mieo_grid, clf_grid, self.data, seed=0, max_trials=3)

        self.assertEqual([0, 1, 2], [t.index for t in result.trials])
        self.assertEqual([0, 0, 1], [t.mieo_index for t in result.trials])

    def test_failed_trials_are_recorded(self):
        grid = GridSpec(
            {
                "embedding_dim": [3],
                "epochs": [1],
                "batch_size": [32],
                "lr": [10.0, 0.01],
            }
        )

        def flaky(model, pool, validation=None, config=None):
            if config.lr > 1:
                raise NonFiniteLossError("boom")
            return train_mieo(model, pool, validation, config)

        with mock.patch("mieo.search.train_mieo", side_effect=flaky):
            result = deferred_select(grid, CLF_GRID, self.data, seed=0)

        self.assertEqual("NonFiniteLossError: boom", result.trials[0].error)
        self.assertIsNone(result.trials[1].error)
        self.assertEqual(1, result.best.index)

    def test_unlabelled_rows_in_train(self):
        data = SelectionData(
            self.splits.unlabelled, self.data.validation, self.data.unlabelled
        )
        with self.assertRaises(SearchError):
            deferred_select(MIEO_GRID, CLF_GRID, data, seed=0)

    def test_empty_validation(self):
        data = SelectionData(
            self.data.train, self.data.validation.take([]), self.data.unlabelled
        )
        with self.assertRaises(EmptyDatasetError):
            deferred_select(MIEO_GRID, CLF_GRID, data, seed=0)

    def test_final_evaluation(self):
        result = deferred_select(MIEO_GRID, CLF_GRID, self.data, seed=0)
        report = final_evaluate(result.classifier, self.splits.test, result.mieo)
        self.assertEqual(len(self.splits.test), report.support)

        with self.assertRaises(SearchError):
            final_evaluate(result.classifier, self.splits.unlabelled, result.mieo)

    def test_baseline(self):
        result = baseline_select(CLF_GRID, self.data, seed=0)
        test = final_evaluate(result.classifier, self.splits.test)

        self.assertIsNone(result.mieo)
        self.assertIsNone(result.best.mieo_index)
        self.assertIs(InputMode.RAW, result.classifier.input_mode)
        text = comparison_report([("ANN", result.validation_report, test)])
        self.assertIn("Validation dataset", text)
        self.assertIn("Test dataset", text)


@pytest.mark.slow
def test_trained_encoder_beats_an_untrained_one():
    spec = cohort_like_spec(n_rows=4000, seed=1, score_std=3.0)
    _, masked = generate(spec, seed=1)
    data = split(masked, seed=1).for_selection()
    encoders = [
        {"embedding_dim": 1, "epochs": 0},
        {"embedding_dim": 16, "epochs": 15, "lr": 3e-3},
    ]
    clf_grid = GridSpec({"epochs": [30]})

    result = deferred_select(encoders, clf_grid, data, seed=0)

    assert result.best.mieo_index == 1
    assert (
        result.trials[0].reconstruction.total > result.trials[1].reconstruction.total
    )


@pytest.mark.slow
def test_reconstruction_and_classification_rankings_disagree(tmp_path):
    spec = cohort_like_spec(n_rows=4000, seed=1, score_std=3.0)
    _, masked = generate(spec, seed=1)
    data = split(masked, seed=1).for_selection()
    grid_path = tmp_path / "encoders.json"
    grid_path.write_text(
        json.dumps(
            [
                {"embedding_dim": 1, "epochs": 5, "w_cont": 0.0},
                {"embedding_dim": 16, "epochs": 15, "lr": 3e-3},
            ]
        )
    )

    result = deferred_select(
        load_grid(grid_path), GridSpec({"epochs": [30]}), data, seed=0
    )

    assert result.best.mieo_index == 1
    assert (0, 1) in ranking_disagreements(result.trials)


@pytest.mark.slow
def test_end_to_end_learnability():
    spec = cohort_like_spec(n_rows=8000, seed=2, score_std=4.0)
    _, masked = generate(spec, seed=2)
    splits = split(masked, seed=2)
    mieo_grid = GridSpec({"embedding_dim": [32, 96], "epochs": [15], "lr": [3e-3]})
    clf_grid = GridSpec({"lr": [1e-3, 3e-3]})

    result = deferred_select(mieo_grid, clf_grid, splits.for_selection(), seed=0)
    test = final_evaluate(result.classifier, splits.test, result.mieo)
    validation = result.validation_report.balanced_accuracy
    floor = max(0.70, bayes_reference(spec) - 0.15)

    assert validation >= floor
    assert test.balanced_accuracy >= floor
    assert abs(test.balanced_accuracy - validation) <= 0.05
