import json
import os
import sys

import pandas as pd
import pytest
import torch

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from gala_lab.data_loader import (
    DatasetCorruptError,
    DatasetVersionError,
    load_dataset,
    load_results,
    serialize_dataset,
    to_data,
    to_data_list,
    write_results_workbook,
)
from gala_lab.graph_synth import build_splits


@pytest.fixture(scope="module")
def split():
    return build_splits(0.8, 0.6, per_class=4, seed=5)


@pytest.fixture
def dataset_file(tmp_path, split):
    path = tmp_path / "two_piece.jsonl"
    serialize_dataset(split, path)
    return path


class TestDatasetCodec:
    """Test cases for writing and reading dataset files."""

    def test_round_trip(self, split, dataset_file):
        loaded = load_dataset(dataset_file)
        assert loaded.train == split.train
        assert loaded.val == split.val
        assert loaded.test == split.test
        assert loaded.params == pytest.approx(split.params)
        assert loaded.seed == split.seed

    def test_byte_identical(self, split, dataset_file, tmp_path):
        again = tmp_path / "again.jsonl"
        serialize_dataset(build_splits(0.8, 0.6, per_class=4, seed=5), again)
        assert again.read_bytes() == dataset_file.read_bytes()

    def test_truncated_file(self, dataset_file):
        lines = dataset_file.read_text(encoding="utf-8").splitlines()
        dataset_file.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(DatasetCorruptError):
            load_dataset(dataset_file)

    def test_tampered_record(self, dataset_file):
        lines = dataset_file.read_text(encoding="utf-8").splitlines()
        record = json.loads(lines[1])
        record["y"] = (record["y"] + 1) % 3
        lines[1] = json.dumps(record, sort_keys=True, separators=(",", ":"))
        dataset_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetCorruptError):
            load_dataset(dataset_file)

    def test_unsupported_version(self, dataset_file):
        lines = dataset_file.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        header["version"] = 99
        lines[0] = json.dumps(header)
        dataset_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetVersionError):
            load_dataset(dataset_file)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DatasetCorruptError):
            load_dataset(path)

    def test_invalid_utf8(self, dataset_file):
        dataset_file.write_bytes(dataset_file.read_bytes() + b"\xff\xfe\x80\n")
        with pytest.raises(DatasetCorruptError):
            load_dataset(dataset_file)

    @pytest.mark.parametrize("counts", [None, [12, 4, 4], "12", {"train": "many"}])
    def test_malformed_counts(self, dataset_file, counts):
        lines = dataset_file.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        if counts is None:
            del header["counts"]
        else:
            header["counts"] = counts
        lines[0] = json.dumps(header)
        dataset_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetCorruptError):
            load_dataset(dataset_file)

    def test_missing_seed(self, dataset_file):
        lines = dataset_file.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        del header["seed"]
        lines[0] = json.dumps(header)
        dataset_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetCorruptError):
            load_dataset(dataset_file)


class TestToData:
    """Test cases for the PyG conversion."""

    def test_directed_layout(self, split):
        graph = split.train[0]
        data = to_data(graph, index=4)
        assert data.edge_index.shape == (2, 2 * len(graph.edges))
        u, v = graph.edges[0]
        assert data.edge_index[:, 0].tolist() == [u, v]
        assert data.edge_index[:, 1].tolist() == [v, u]
        assert data.inv_mask.shape == (2 * len(graph.edges),)
        assert data.inv_mask[0::2].bool().tolist() == graph.inv_edge_mask
        assert int(data.sample_idx) == 4

    def test_labels_and_bits(self, split):
        graph = split.train[0]
        data = to_data(graph)
        assert data.y.tolist() == [graph.label]
        assert int(data.c_bit) == graph.bits.c_bit
        assert int(data.s_bit) == graph.bits.s_bit
        assert data.x.dtype == torch.float

    def test_data_list_indices(self, split):
        data_list = to_data_list(split.val)
        assert [int(d.sample_idx) for d in data_list] == list(range(len(split.val)))


class TestResultsWorkbook:
    """Test cases for the per-dataset results workbook."""

    def test_write_and_load(self, tmp_path):
        frames = {
            "two_piece_0.7_0.9": pd.DataFrame({"method": ["erm", "gala"], "test_acc": [0.4, 0.7]}),
            "two_piece_0.8_0.6": pd.DataFrame({"method": ["erm"], "test_acc": [0.77]}),
        }
        path = tmp_path / "results.xlsx"
        write_results_workbook(frames, path)
        combined = load_results(path)
        assert len(combined) == 3
        assert set(combined["dataset"]) == set(frames)
        assert combined.loc[combined["method"] == "gala", "test_acc"].iloc[0] == pytest.approx(0.7)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_results(tmp_path / "missing.xlsx")
