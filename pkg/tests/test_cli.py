"""Tests for the command-line interface."""

import json
import os
import unittest

import pandas as pd
import pytest

from mieo import __version__
from mieo.cli import EXIT_USAGE, EXIT_VALIDATION, main

DIR_PATH = os.path.dirname(__file__)
TEST_CONTENT_PATH = os.path.abspath(os.path.join(DIR_PATH, "test_content"))

MIEO_FLAGS = ["--embedding-dim", "4", "--epochs", "2", "--batch-size", "32"]
CLF_FLAGS = ["--epochs", "3", "--batch-size", "32"]


def _read_json(path):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """A small synthetic cohort, split into train/validation/test/unlabelled."""
    root = tmp_path_factory.mktemp("cohort")
    synth, splits = root / "synth", root / "splits"
    argv = ["synth-gen", "--out-dir", str(synth), "--n-rows", "400", "--seed", "3"]
    assert main(argv) == 0
    argv = ["split", "--data", str(synth / "masked.csv"), "--out-dir", str(splits)]
    assert main(argv) == 0
    return root


@pytest.fixture(scope="module")
def mieo_model(cohort):
    splits = cohort / "splits"
    out = cohort / "mieo.model"
    argv = [
        "train-mieo",
        "--data",
        str(splits / "train.csv"),
        "--unlabelled",
        str(splits / "unlabelled.csv"),
        "--validation",
        str(splits / "validation.csv"),
        "--out",
        str(out),
        "--history",
        str(cohort / "history.json"),
        "--seed",
        "1",
        *MIEO_FLAGS,
    ]
    assert main(argv) == 0
    return out


class TestCommandErrors(unittest.TestCase):
    """Exit codes and messages of commands that cannot run."""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, capsys):
        self.tmp_path = tmp_path
        self.capsys = capsys

    def _split(self, data):
        return main(
            [
                "split",
                "--data",
                os.path.join(TEST_CONTENT_PATH, data),
                "--schema",
                os.path.join(TEST_CONTENT_PATH, "cohort_schema.json"),
                "--out-dir",
                str(self.tmp_path / "splits"),
            ]
        )

    def test_usage_errors(self):
        for argv in ([], ["bogus"], ["split", "--data"]):
            with self.subTest(argv=argv):
                self.assertEqual(EXIT_USAGE, main(argv))

    def test_bad_csv(self):
        self.assertEqual(EXIT_VALIDATION, self._split("bad_binary.csv"))
        self.assertIn(
            "mieo: error: Binary column 'diabetic' has value '2' in row 2",
            self.capsys.readouterr().err,
        )

    def test_single_class(self):
        path = self.tmp_path / "negatives.csv"
        path.write_text("smoker,diabetic,age,cholesterol,label\n1,0,61.5,5.2,0\n")

        self.assertEqual(EXIT_VALIDATION, self._split(str(path)))
        self.assertIn(
            "Cannot stratify: class 1 is absent from the labelled rows.",
            self.capsys.readouterr().err,
        )

    def test_missing_file(self):
        model = str(self.tmp_path / "nope.model")
        argv = ["encode", "--model", model, "--data", "x", "--out", "y"]
        self.assertEqual(EXIT_VALIDATION, main(argv))

    def test_replay_of_a_replay(self):
        manifest = self.tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"argv": ["replay", "--manifest", "x"]}))
        self.assertEqual(EXIT_VALIDATION, main(["replay", "--manifest", str(manifest)]))


def test_version(capsys):

    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_split_outputs(cohort):
    splits = cohort / "splits"
    sizes = {
        name: len(pd.read_csv(splits / f"{name}.csv"))
        for name in ("train", "validation", "test", "unlabelled")
    }

    assert sizes == {"train": 128, "validation": 32, "test": 40, "unlabelled": 200}
    manifest = _read_json(splits / "manifest.json")
    assert manifest["command"] == "split"
    assert manifest["seed"] == 0
    assert manifest["mieo_version"] == __version__
    assert str(cohort / "synth" / "masked.csv") in manifest["inputs"]


def test_split_of_a_tiny_cohort(tmp_path):
    argv = [
        "split",
        "--data",
        os.path.join(TEST_CONTENT_PATH, "cohort.csv"),
        "--schema",
        os.path.join(TEST_CONTENT_PATH, "cohort_schema.json"),
        "--out-dir",
        str(tmp_path),
    ]
    assert main(argv) == 0
    assert len(pd.read_csv(tmp_path / "train.csv")) == 4
    assert len(pd.read_csv(tmp_path / "test.csv")) == 0



def test_train_mieo(cohort, mieo_model):
    history = _read_json(cohort / "history.json")
    manifest = _read_json(str(mieo_model) + ".manifest.json")

    assert [entry["epoch"] for entry in history] == [0, 1, 2]
    assert manifest["config"]["embedding_dim"] == 4
    assert manifest["seed"] == 1
    assert _read_json(mieo_model)["kind"] == "mieo"


def test_encode_and_impute(cohort, mieo_model, tmp_path):
    test_csv = str(cohort / "splits" / "test.csv")
    embedding, completed = tmp_path / "z.csv", tmp_path / "completed.csv"
    common = ["--model", str(mieo_model), "--data", test_csv]
    assert main(["encode", *common, "--out", str(embedding)]) == 0
    assert main(["impute", *common, "--out", str(completed)]) == 0

    frame = pd.read_csv(embedding)
    assert list(frame.columns) == ["z000", "z001", "z002", "z003", "label"]
    assert len(frame) == 40
    imputed = pd.read_csv(completed)
    assert not imputed.drop(columns="label").isna().any().any()


def test_classifiers_and_evaluation(cohort, mieo_model, tmp_path):
    splits = cohort / "splits"
    embedding_clf, raw_clf = str(tmp_path / "embedding.clf"), str(tmp_path / "raw.clf")
    common = [
        "--data",
        str(splits / "train.csv"),
        "--validation",
        str(splits / "validation.csv"),
        *CLF_FLAGS,
    ]
    with_mieo = ["--mieo-model", str(mieo_model)]

    argv = ["train-clf", "--mode", "embedding", *with_mieo, *common]
    assert main([*argv, "--out", embedding_clf]) == 0
    assert main(["train-clf", "--mode", "raw", *common, "--out", raw_clf]) == 0

    report = str(tmp_path / "report.json")
    evaluate = ["evaluate", "--data", str(splits / "test.csv"), "--report", report]
    assert main([*evaluate, "--clf", embedding_clf, *with_mieo]) == 0
    counts = _read_json(report)
    assert counts["0"]["support"] + counts["1"]["support"] == 40

    assert main([*evaluate, "--clf", raw_clf]) == 0
    assert main([*evaluate, "--clf", embedding_clf]) == EXIT_VALIDATION

    manifest = _read_json(raw_clf + ".manifest.json")
    assert manifest["config"]["mode"] == "raw"
    assert manifest["config"]["resolved_pos_weight"] > 0


def test_embedding_classifier_needs_mieo(cohort, tmp_path):
    argv = [
        "train-clf",
        "--mode",
        "embedding",
        "--data",
        str(cohort / "splits" / "train.csv"),
        "--out",
        str(tmp_path / "clf"),
    ]
    assert main(argv) == EXIT_VALIDATION


def test_grid_search_and_replay(cohort, tmp_path):
    mieo_grid, clf_grid = tmp_path / "mieo_grid.json", tmp_path / "clf_grid.json"
    mieo_axes = {"embedding_dim": [2, 4], "epochs": [1], "batch_size": [32]}
    clf_candidates = [{"hidden_widths": [4, 4, 4], "epochs": 2, "batch_size": 32}]
    mieo_grid.write_text(json.dumps(mieo_axes))
    clf_grid.write_text(json.dumps(clf_candidates))
    out = tmp_path / "search"
    argv = [
        "grid-search",
        "--data",
        str(cohort / "synth" / "masked.csv"),
        "--mieo-grid",
        str(mieo_grid),
        "--clf-grid",
        str(clf_grid),
        "--out-dir",
        str(out),
        "--baseline",
    ]
    assert main(argv) == 0

    names = [
        "trials.json",
        "trial_times.json",
        "best_mieo.model",
        "best_clf.model",
        "report.json",
        "report.txt",
    ]
    for name in names:
        assert (out / name).is_file()
    trials = _read_json(out / "trials.json")
    assert len(trials) == 3
    assert all("wall_time" not in trial for trial in trials)
    report = _read_json(out / "report.json")
    assert set(report["test"]) == {"MIEO+ANN", "ANN"}
    assert "Validation dataset" in (out / "report.txt").read_text()

    timed = "trial_times.json"
    first = {name: (out / name).read_bytes() for name in names if name != timed}
    assert main(["replay", "--manifest", str(out / "manifest.json")]) == 0
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name


def test_replay_synthetic_data(tmp_path):
    out = tmp_path / "synth"
    assert main(["-v", "synth-gen", "--out-dir", str(out), "--n-rows", "50"]) == 0
    manifest = _read_json(out / "manifest.json")
    masked = (out / "masked.csv").read_bytes()

    assert manifest["argv"][0] == "synth-gen"
    assert main(["replay", "--manifest", str(out / "manifest.json")]) == 0
    assert (out / "masked.csv").read_bytes() == masked
