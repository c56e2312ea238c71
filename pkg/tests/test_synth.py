"""Tests for the synthetic data generator."""

import unittest

import numpy as np
import pytest

from mieo.data import UNLABELLED
from mieo.exceptions import ConfigError
from mieo.synth import (
    SynthSpec,
    bayes_reference,
    cohort_like_spec,
    generate,
    mask_additional,
)


def _spec(**overrides):
    fields = dict(
        n_binary=2,
        n_continuous=2,
        bernoulli_p=[0.3, 0.6],
        gauss_mean=[0.0, 10.0],
        gauss_std=[1.0, 2.0],
        label_weights=[1.0, -1.0, 0.5, 0.2],
        intercept=-2.0,
        miss_rates=[0.1, 0.0, 0.3, 0.05],
        unlabelled_frac=0.25,
        n_rows=2000,
    )
    return SynthSpec(**(fields | overrides))


class TestSynthSpec(unittest.TestCase):
    """Validation and persistence of generative parameters."""

    def test_schema(self):
        schema = _spec().schema
        self.assertEqual(("b00", "b01", "c00", "c01"), schema.names)
        self.assertEqual(2, schema.n_binary)

    def test_length_mismatch(self):
        with self.assertRaises(ConfigError) as context_manager:
            _spec(bernoulli_p=[0.3])

        self.assertEqual(
            "bernoulli_p has 1 entries, expected 2.", str(context_manager.exception)
        )

    def test_invalid_values(self):
        for overrides in (
            {"miss_rates": [0.1, 0.0, 1.3, 0.05]},
            {"gauss_std": [1.0, 0.0]},
            {"unlabelled_frac": -0.1},
            {"n_rows": 0},
            {"intercept": float("nan")},
        ):
            with self.subTest(**{k: str(v) for k, v in overrides.items()}):
                with self.assertRaises(ConfigError):
                    _spec(**overrides)

    def test_unknown_field(self):
        with self.assertRaises(ConfigError):
            SynthSpec.from_dict(_spec().to_dict() | {"copula": "gaussian"})

    def test_save_and_load(self):
        path = self.tmp_path / "spec.json"
        _spec().save(path)
        self.assertEqual(_spec(), SynthSpec.load(path))

    @pytest.fixture(autouse=True)
    def _tmp_path(self, tmp_path):
        self.tmp_path = tmp_path


class TestGenerate(unittest.TestCase):
    """Sampling of complete rows and their masked copy."""

    @classmethod
    def setUpClass(cls):
        cls.truth, cls.masked = generate(_spec(), seed=11)

    def test_shapes(self):
        self.assertEqual((2000, 4), self.truth.values.shape)
        self.assertEqual((2000, 4), self.masked.values.shape)
        self.assertFalse(np.isnan(self.truth.values).any())

    def test_masked_copy_agrees_with_the_truth(self):
        observed = self.masked.observed
        np.testing.assert_array_equal(
            self.truth.values[observed], self.masked.values[observed]
        )
        np.testing.assert_array_equal(self.truth.labels, self.masked.labels)

    def test_binary_cells(self):
        binary = self.truth.values[:, :2]
        self.assertTrue(np.isin(binary, [0.0, 1.0]).all())

    def test_missing_rates(self):
        rates = 1 - self.masked.observed.mean(axis=0)
        np.testing.assert_allclose([0.1, 0.0, 0.3, 0.05], rates, atol=0.03)
        self.assertEqual(0.0, rates[1])

    def test_column_means(self):
        n_rows = len(self.truth)
        p = np.array([0.3, 0.6])
        mean, std = np.array([0.0, 10.0]), np.array([1.0, 2.0])
        sample_means = self.truth.values.mean(axis=0)

        binary_sigma = np.sqrt(p * (1 - p) / n_rows)
        self.assertTrue((np.abs(sample_means[:2] - p) < 3 * binary_sigma).all())
        gauss_sigma = std / np.sqrt(n_rows)
        self.assertTrue((np.abs(sample_means[2:] - mean) < 3 * gauss_sigma).all())

    def test_observed_cells_are_unbiased(self):
        full = self.truth.values.mean(axis=0)
        observed = np.nanmean(self.masked.values, axis=0)
        scale = self.truth.values.std(axis=0)
        np.testing.assert_allclose(full / scale, observed / scale, atol=0.1)

    def test_half_missing(self):
        _, masked = generate(_spec(miss_rates=[0.5] * 4, n_rows=10000), seed=2)
        self.assertAlmostEqual(0.5, 1 - masked.observed.mean(), delta=0.02)

    def test_unlabelled_rows(self):
        self.assertEqual(500, int((self.truth.labels == UNLABELLED).sum()))

    def test_same_seed_same_data(self):
        truth, masked = generate(_spec(), seed=11)
        np.testing.assert_array_equal(self.truth.values, truth.values)
        np.testing.assert_array_equal(self.masked.observed, masked.observed)

    def test_other_seed_other_data(self):
        truth, _ = generate(_spec(), seed=12)
        self.assertFalse(np.array_equal(self.truth.values, truth.values))


class TestBayesReference(unittest.TestCase):
    """Monte-Carlo ceiling on balanced accuracy."""

    def test_too_few_samples(self):
        with self.assertRaises(ConfigError) as context_manager:
            bayes_reference(_spec(), n_mc=999)

        self.assertEqual(
            "n_mc must be at least 10000, got 999.", str(context_manager.exception)
        )

    def test_deterministic(self):
        first = bayes_reference(_spec(), n_mc=20_000, seed=3)
        self.assertEqual(first, bayes_reference(_spec(), n_mc=20_000, seed=3))
        self.assertTrue(0.5 <= first <= 1.0)

    def test_uninformative_model(self):
        spec = _spec(label_weights=[0.0] * 4, intercept=3.0)
        self.assertEqual(0.5, bayes_reference(spec, n_mc=10_000))

    def test_stronger_signal_is_easier(self):
        weak = _spec(label_weights=[0.2, -0.2, 0.1, 0.0], intercept=-0.5)
        strong = _spec(label_weights=[3.0, -3.0, 1.5, 0.0], intercept=-0.5)
        self.assertGreater(bayes_reference(strong), bayes_reference(weak))


class TestCohortLikeSpec(unittest.TestCase):
    """The default cohort-shaped generator."""

    @classmethod
    def setUpClass(cls):
        cls.spec = cohort_like_spec(n_rows=8000, seed=0)
        cls.truth, cls.masked = generate(cls.spec, seed=0)

    def test_columns(self):
        self.assertEqual((46, 22), (self.spec.n_binary, self.spec.n_continuous))
        self.assertEqual(12, int(np.count_nonzero(self.spec.label_weights)))

    def test_missingness(self):
        rates = np.array(self.spec.miss_rates)
        self.assertEqual(2, int((rates == 0.55).sum()))
        self.assertEqual(19, int((rates == 0.05).sum()))
        self.assertAlmostEqual(0.03, 1 - self.masked.observed.mean(), delta=0.005)

    def test_positive_rate(self):
        labelled = self.truth.labels[self.truth.labels != UNLABELLED]
        self.assertEqual(4000, labelled.size)
        self.assertAlmostEqual(0.25, labelled.mean(), delta=0.03)

    def test_bad_informative_count(self):
        with self.assertRaises(ConfigError):
            cohort_like_spec(n_informative=0)


class TestMaskAdditional(unittest.TestCase):
    """Hiding observed cells for imputation scoring."""

    def test_hidden_cells(self):
        _, masked = generate(_spec(), seed=1)
        more, hidden = mask_additional(masked, 0.2, seed=4)

        self.assertFalse((hidden & ~masked.observed).any())
        self.assertTrue(np.isnan(more.values[hidden]).all())
        np.testing.assert_array_equal(
            masked.observed & ~hidden, more.observed
        )
        self.assertAlmostEqual(0.2, hidden.sum() / masked.observed.sum(), delta=0.02)

    def test_bad_fraction(self):
        _, masked = generate(_spec(n_rows=10), seed=1)
        with self.assertRaises(ConfigError):
            mask_additional(masked, 1.0, seed=0)
