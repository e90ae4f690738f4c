import gzip
import json
import struct

import numpy as np
import pytest

from fmselect.data_io import (
    DataConsistencyError,
    DataFormatError,
    DatasetTable,
    column_subset,
    load_csv,
    load_idx,
    load_registry,
    make_batches,
    minmax_scale,
    resolve_dataset,
    split_table,
    write_idx,
)
from fmselect.tensor_core import make_rng


def idx_pair(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    if gz:
        for p in (ip, lp):
            p.with_name(p.name + ".gz").write_bytes(gzip.compress(p.read_bytes()))
        return ip.with_name(ip.name + ".gz"), lp.with_name(lp.name + ".gz")
    return ip, lp


class TestIdx:
    def test_two_zero_images(self, tmp_path):
        t = load_idx(*idx_pair(tmp_path, np.zeros((2, 28, 28)), [3, 7]))
        assert t.features.shape == (2, 784) and not np.any(t.features)
        np.testing.assert_array_equal(t.labels, [3, 7])

    def test_scaling_and_order(self, tmp_path):
        img = np.zeros((1, 2, 3), dtype=np.uint8)
        img[0, 0, 1], img[0, 1, 2] = 255, 51
        t = load_idx(*idx_pair(tmp_path, img, [0]))
        np.testing.assert_allclose(t.features[0], [0, 1, 0, 0, 0, 0.2])

    def test_gzip(self, tmp_path):
        img = make_rng(0).integers(0, 256, (4, 3, 3))
        a = load_idx(*idx_pair(tmp_path, img, [0, 1, 2, 3]))
        b = load_idx(*idx_pair(tmp_path, img, [0, 1, 2, 3], gz=True))
        np.testing.assert_array_equal(a.features, b.features)

    def test_bad_magic(self, tmp_path):
        ip, lp = idx_pair(tmp_path, np.zeros((2, 2, 2)), [0, 1])
        raw = bytearray(ip.read_bytes())
        raw[:4] = struct.pack(">I", 0x0801)
        ip.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp = idx_pair(tmp_path, np.zeros((2, 4, 4)), [0, 1])
        ip.write_bytes(ip.read_bytes()[:-5])
        with pytest.raises(DataFormatError):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, _ = idx_pair(tmp_path, np.zeros((3, 2, 2)), [0, 1, 2])
        (tmp_path / "other").mkdir()
        _, lp = idx_pair(tmp_path / "other", np.zeros((2, 2, 2)), [0, 1])
        with pytest.raises(DataConsistencyError):
            load_idx(ip, lp)


def write(path, text):
    path.write_text(text)
    return path


class TestCsv:
    def test_label_encoding(self, tmp_path):
        t = load_csv(write(tmp_path / "a.csv", "f,y\n1,a\n2,b\n3,a\n"), "y")
        np.testing.assert_array_equal(t.labels, [0, 1, 0])
        assert t.label_names == ["a", "b"] and t.n_classes == 2

    def test_minmax(self, tmp_path):
        t = load_csv(write(tmp_path / "a.csv", "f,c\n2,5\n4,5\n6,5\n"))
        np.testing.assert_allclose(t.features[:, 0], [0, 0.5, 1])
        np.testing.assert_array_equal(t.features[:, 1], 0)  # constant column
        assert t.labels is None and t.feature_names == ["f", "c"]

    def test_scaling_idempotent(self, tmp_path):
        t = load_csv(write(tmp_path / "a.csv", "f,g\n2,-1\n4,3\n9,0\n"))
        np.testing.assert_allclose(minmax_scale(t).features, t.features, atol=1e-15)

    def test_test_file_uses_train_stats(self, tmp_path):
        tr = load_csv(write(tmp_path / "tr.csv", "f,y\n0,a\n10,b\n"), "y")
        te = load_csv(write(tmp_path / "te.csv", "f,y\n5,b\n20,a\n"), "y",
                      stats=tr.scaling, label_names=tr.label_names)
        np.testing.assert_allclose(te.features[:, 0], [0.5, 1.0])  # clipped
        np.testing.assert_array_equal(te.labels, [1, 0])

    def test_unseen_test_label(self, tmp_path):
        tr = load_csv(write(tmp_path / "tr.csv", "f,y\n0,a\n1,b\n"), "y")
        with pytest.raises(DataConsistencyError):
            load_csv(write(tmp_path / "te.csv", "f,y\n0,c\n"), "y",
                     stats=tr.scaling, label_names=tr.label_names)

    def test_ragged(self, tmp_path):
        with pytest.raises(DataFormatError, match="line 3"):
            load_csv(write(tmp_path / "a.csv", "f,g\n1,2\n3\n"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataFormatError, match="line 3, column .g."):
            load_csv(write(tmp_path / "a.csv", "f,g\n1,2\n3,x\n"))

    def test_missing_label_column(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_csv(write(tmp_path / "a.csv", "f,g\n1,2\n"), "y")


class TestBatchesAndColumns:
    def test_batches_keep_short_tail(self):
        sizes = [len(b) for b in make_batches(10, 4, make_rng(0))]
        assert sizes == [4, 4, 2]

    def test_batches_cover_each_row_once(self):
        batches = make_batches(37, 8, make_rng(1))
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(37))

    def test_batches_seeded(self):
        a, b = make_batches(20, 3, make_rng(4)), make_batches(20, 3, make_rng(4))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_column_order(self):
        t = DatasetTable("t", np.arange(12.0).reshape(3, 4))
        np.testing.assert_array_equal(column_subset(t, [3, 1]).features, [[3, 1], [7, 5], [11, 9]])

    @pytest.mark.parametrize("bad", [[1, 1], [4], [-1], []])
    def test_column_errors(self, bad):
        with pytest.raises(ValueError):
            column_subset(DatasetTable("t", np.zeros((2, 4))), bad)


class TestTable:
    def test_label_range(self):
        with pytest.raises(DataConsistencyError):
            DatasetTable("t", np.zeros((2, 2)), np.array([0, 3]), 2)

    def test_non_finite(self):
        with pytest.raises(DataConsistencyError):
            DatasetTable("t", np.array([[np.nan, 1.0]]))

    def test_split(self):
        t = DatasetTable("t", np.arange(20.0)[:, None], np.arange(20) % 2, 2)
        s = split_table(t, 0.2, make_rng(0))
        assert s.train.n_rows == 16 and s.test.n_rows == 4
        together = np.sort(np.concatenate([s.train.features[:, 0], s.test.features[:, 0]]))
        np.testing.assert_array_equal(together, np.arange(20.0))


class TestRegistry:
    def test_relative_paths_and_split(self, tmp_path):
        rows = "\n".join(f"{i},{i % 3},{'abc'[i % 3]}" for i in range(50))
        write(tmp_path / "d.csv", "a,b,y\n" + rows + "\n")
        (tmp_path / "reg.json").write_text(json.dumps(
            {"toy": {"format": "csv", "train": "d.csv", "label_column": "y"}}))
        reg = load_registry(tmp_path / "reg.json")
        s1 = resolve_dataset(reg, "toy", seed=3)
        s2 = resolve_dataset(reg, "toy", seed=3)
        assert s1.train.n_rows == 40 and s1.test.n_rows == 10
        np.testing.assert_array_equal(s1.test.features, s2.test.features)
        sub = resolve_dataset(reg, "toy", seed=3, subset=12)
        assert sub.train.n_rows == 12 and sub.test.n_rows == 10

    def test_idx_with_test_files(self, tmp_path):
        write_idx(np.zeros((3, 2, 2)), [0, 1, 1], tmp_path / "ti", tmp_path / "tl")
        write_idx(np.zeros((2, 2, 2)), [1, 0], tmp_path / "vi", tmp_path / "vl")
        (tmp_path / "reg.json").write_text(json.dumps({"m": {
            "train_images": "ti", "train_labels": "tl", "test_images": "vi", "test_labels": "vl",
            "n_classes": 10}}))
        s = resolve_dataset(load_registry(tmp_path / "reg.json"), "m")
        assert (s.train.n_rows, s.test.n_rows) == (3, 2)
        assert s.train.n_classes == 10 and s.test.n_classes == 10

    def test_unknown_dataset(self, tmp_path):
        (tmp_path / "reg.json").write_text("{}")
        with pytest.raises(KeyError):
            resolve_dataset(load_registry(tmp_path / "reg.json"), "nope")

    def test_missing_registry(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_registry(tmp_path / "absent.json")
