"""Datasets, holdout splits, preprocessing, and batch iteration."""

import numpy as np
import pytest
from PIL import Image

from fedbed.errors import (
    DatasetTooSmall,
    ParseError,
    PathNotFound,
    UnknownColumn,
)
from fedbed.mlcore.data import (
    TabularDataset,
    apply_preprocessing,
    iterate_batches,
    load_folder_image_dataset,
    read_csv_table,
    split_holdout,
    table_to_tabular,
)
from fedbed.protocol import PreprocessingStep

from conftest import write_table_csv


@pytest.fixture
def csv_path(tmp_path):
    return write_table_csv(tmp_path / "data.csv",
                           ["age", "sex", "y"],
                           [[50 + i, i % 2, 2 * i] for i in range(27)])


class TestCsvLoading:
    def test_row_count_matches_fixture(self, csv_path):
        columns, rows = read_csv_table(csv_path)
        dataset = table_to_tabular(columns, rows, "y")
        assert len(dataset) == 27

    def test_missing_file(self, tmp_path):
        with pytest.raises(PathNotFound):
            read_csv_table(tmp_path / "nope.csv")

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(ParseError):
            read_csv_table(path)

    def test_non_numeric_cell_rejected(self, tmp_path):
        path = write_table_csv(tmp_path / "coded.csv", ["sex", "y"],
                               [["M", 1], ["F", 0]])
        columns, rows = read_csv_table(path)
        with pytest.raises(ParseError):
            table_to_tabular(columns, rows, "y")

    def test_unknown_target(self, csv_path):
        columns, rows = read_csv_table(csv_path)
        with pytest.raises(UnknownColumn):
            table_to_tabular(columns, rows, "nope")


class TestFolderImages:
    def _write_subject(self, root, name, image, mask):
        subject = root / name
        subject.mkdir(parents=True)
        Image.fromarray(image.astype(np.uint8), mode="L").save(
            subject / "image.pgm")
        Image.fromarray(mask.astype(np.uint8), mode="L").save(
            subject / "mask.pgm")

    def test_load_and_threshold(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(3):
            image = rng.integers(0, 256, size=(8, 8))
            mask = rng.integers(0, 256, size=(8, 8))
            self._write_subject(tmp_path, f"s{i}", image, mask)
        dataset = load_folder_image_dataset(tmp_path)
        assert len(dataset) == 3
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
        assert set(np.unique(dataset.masks)) <= {0, 1}

    def test_missing_mask(self, tmp_path):
        subject = tmp_path / "s0"
        subject.mkdir()
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(
            subject / "image.pgm")
        with pytest.raises(PathNotFound):
            load_folder_image_dataset(tmp_path)

    def test_features_flattened(self, tmp_path):
        self._write_subject(tmp_path, "s0",
                            np.full((4, 4), 128), np.full((4, 4), 255))
        self._write_subject(tmp_path, "s1",
                            np.zeros((4, 4)), np.zeros((4, 4)))
        dataset = load_folder_image_dataset(tmp_path)
        x, y = dataset.features_and_target()
        assert x.shape == (2, 16)
        assert y.shape == (2, 16)


class TestSplitHoldout:
    def test_sizes_for_30_at_10_percent(self):
        dataset = TabularDataset(("a", "y"), np.ones((30, 2)), "y")
        train, hold = split_holdout(dataset, 0.1, seed=0)
        assert (len(train), len(hold)) == (27, 3)

    def test_deterministic_given_seed(self):
        rows = np.arange(40, dtype=float).reshape(20, 2)
        dataset = TabularDataset(("a", "y"), rows, "y")
        t1, h1 = split_holdout(dataset, 0.25, seed=5)
        t2, h2 = split_holdout(dataset, 0.25, seed=5)
        assert np.array_equal(t1.rows, t2.rows)
        assert np.array_equal(h1.rows, h2.rows)

    def test_disjoint_and_exhaustive(self):
        rows = np.arange(42, dtype=float).reshape(21, 2)
        dataset = TabularDataset(("a", "y"), rows, "y")
        train, hold = split_holdout(dataset, 0.1, seed=3)
        assert len(train) == 19 and len(hold) == 2
        merged = np.vstack([train.rows, hold.rows])
        assert np.array_equal(np.sort(merged[:, 0]), rows[:, 0])

    def test_too_small(self):
        dataset = TabularDataset(("a", "y"), np.ones((1, 2)), "y")
        with pytest.raises(DatasetTooSmall):
            split_holdout(dataset, 0.1, seed=0)

    def test_minimum_one_holdout_sample(self):
        dataset = TabularDataset(("a", "y"), np.ones((5, 2)), "y")
        train, hold = split_holdout(dataset, 0.01, seed=0)
        assert len(hold) == 1


class TestPreprocessing:
    def _dataset(self):
        rng = np.random.default_rng(0)
        rows = np.column_stack([rng.normal(5, 2, 50), rng.uniform(0, 9, 50),
                                rng.normal(size=50)])
        return TabularDataset(("a", "b", "y"), rows, "y")

    def test_standardize(self):
        out = apply_preprocessing(self._dataset(),
                                  [PreprocessingStep(kind="standardize_columns")])
        x, _ = out.features_and_target()
        assert np.allclose(x.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(x.std(axis=0), 1.0, atol=1e-12)

    def test_minmax(self):
        out = apply_preprocessing(self._dataset(),
                                  [PreprocessingStep(kind="minmax_columns")])
        x, _ = out.features_and_target()
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_select_keeps_target(self):
        out = apply_preprocessing(
            self._dataset(),
            [PreprocessingStep(kind="select_columns", names=("a",))])
        assert out.column_names == ("a", "y")

    def test_select_unknown_column(self):
        with pytest.raises(UnknownColumn):
            apply_preprocessing(
                self._dataset(),
                [PreprocessingStep(kind="select_columns", names=("zz",))])

    def test_target_never_transformed(self):
        dataset = self._dataset()
        out = apply_preprocessing(dataset,
                                  [PreprocessingStep(kind="standardize_columns")])
        _, y_before = dataset.features_and_target()
        _, y_after = out.features_and_target()
        assert np.array_equal(y_before, y_after)


class TestBatches:
    def test_counts_and_coverage(self):
        batches = list(iterate_batches(10, 4, 5, seed=1))
        assert len(batches) == 5
        assert [len(b) for b in batches] == [4, 4, 2, 4, 4]
        epoch_one = np.concatenate(batches[:3])
        assert sorted(epoch_one) == list(range(10))

    def test_deterministic(self):
        a = [b.tolist() for b in iterate_batches(16, 5, 7, seed=9)]
        b = [b.tolist() for b in iterate_batches(16, 5, 7, seed=9)]
        assert a == b

    def test_reshuffles_between_epochs(self):
        batches = list(iterate_batches(32, 32, 2, seed=0))
        assert not np.array_equal(batches[0], batches[1])
