import numpy as np
import pytest
import torch
import sys
import os
# Add the current directory to the path to import from gala_lab
sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from gala_lab.analysis import (
    RESULT_COLUMNS,
    SUMMARY_COLUMNS,
    accuracy_by_dataset,
    compare_methods,
    cooccurrence_curves,
    dataset_name,
    edge_score_gap,
    edge_scores_by_graph,
    eval_accuracy,
    filter_results,
    identification_f1,
    runs_to_frame,
    summarize_runs,
    sweep_table,
)
from gala_lab.env_assistant import partition_by_rule
from gala_lab.graph_synth import build_splits
from gala_lab.models import EncoderConfig, build_model
from gala_lab.scm_core import BitKind


@pytest.fixture
def sample_results():
    """Create a sample result table for testing."""
    records = [
        {"kind": "main", "method": "erm", "a": 0.7, "b": 0.9, "seed": 1, "test_acc": 0.40, "status": "ok"},
        {"kind": "main", "method": "erm", "a": 0.7, "b": 0.9, "seed": 2, "test_acc": 0.50, "status": "ok"},
        {"kind": "main", "method": "gala", "a": 0.7, "b": 0.9, "seed": 1, "test_acc": 0.70, "status": "ok",
         "identification_f1": 0.8, "negative_fraction": 0.1},
        {"kind": "main", "method": "gala", "a": 0.7, "b": 0.9, "seed": 2, "test_acc": np.nan, "status": "failed",
         "error": "TrainingDivergedError: nan"},
        {"kind": "main", "method": "gala", "a": 0.9, "b": 0.7, "seed": 1, "test_acc": 0.85, "status": "ok"},
    ]
    return runs_to_frame(records)


@pytest.fixture(scope="module")
def small_split():
    return build_splits(0.7, 0.9, per_class=4, seed=1, eval_per_class=2)


class TestIdentificationF1:
    """Test cases for the motif identification score."""

    def test_perfect_ranking(self):
        scores = [np.array([0.9, 0.8, 0.1, 0.2])]
        masks = [np.array([True, True, False, False])]
        assert identification_f1(scores, masks) == pytest.approx(1.0)

    def test_half_overlap(self):
        scores = [np.array([0.9, 0.1, 0.8, 0.2])]
        masks = [np.array([True, True, False, False])]
        assert identification_f1(scores, masks) == pytest.approx(0.5)

    def test_ties_prefer_lower_index(self):
        scores = [np.full(4, 0.5)]
        assert identification_f1(scores, [np.array([True, True, False, False])]) == pytest.approx(1.0)
        assert identification_f1(scores, [np.array([False, False, True, True])]) == pytest.approx(0.0)

    def test_mean_over_graphs(self):
        scores = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        masks = [np.array([True, False]), np.array([True, False])]
        assert identification_f1(scores, masks) == pytest.approx(0.5)

    def test_no_motif_edges(self):
        assert np.isnan(identification_f1([np.array([0.3])], [np.array([False])]))


class TestEdgeScoreGap:
    """Test cases for the invariant-vs-rest score gap."""

    def test_gap(self):
        scores = [np.array([0.9, 0.7, 0.2]), np.array([0.5, 0.1])]
        masks = [np.array([True, True, False]), np.array([True, False])]
        assert edge_score_gap(scores, masks) == pytest.approx(0.7 - 0.15)

    def test_undefined_without_both_groups(self):
        assert np.isnan(edge_score_gap([np.array([0.4])], [np.array([True])]))
        assert np.isnan(edge_score_gap([], []))


class TestModelEvaluation:
    """Test cases for evaluating trained models."""

    def test_accuracy_range(self, small_split):
        model = build_model("vanilla", EncoderConfig(hidden_dim=8), seed=0)
        assert 0.0 <= eval_accuracy(model, small_split.test) <= 1.0
        assert eval_accuracy(model, []) == 0.0

    def test_constant_predictor(self, small_split):
        model = build_model("vanilla", EncoderConfig(hidden_dim=8), seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor([5.0, 0.0, 0.0]))
        assert eval_accuracy(model, small_split.test) == pytest.approx(1.0 / 3.0)

    def test_scores_per_graph(self, small_split):
        model = build_model("interpretable", EncoderConfig(hidden_dim=8), seed=0)
        scores = edge_scores_by_graph(model, small_split.val)
        assert [len(s) for s in scores] == [len(g.edges) for g in small_split.val]
        f1 = identification_f1(scores, [g.inv_edge_mask for g in small_split.val])
        assert 0.0 <= f1 <= 1.0

    def test_no_scores_for_vanilla(self, small_split):
        model = build_model("vanilla", EncoderConfig(hidden_dim=8), seed=0)
        assert edge_scores_by_graph(model, small_split.val) == []


class TestCooccurrenceCurves:
    """Test cases for per-cell co-occurrence."""

    def test_spurious_rule_cells(self, small_split):
        partition = partition_by_rule(small_split.train, BitKind.SPURIOUS)
        curves = cooccurrence_curves(partition, small_split.train)
        assert curves["cell"].tolist() == ["positive", "negative"]
        assert curves["count"].sum() == len(small_split.train)
        assert curves.loc[0, "spurious"] == pytest.approx(1.0)
        if curves.loc[1, "count"]:
            assert curves.loc[1, "spurious"] == pytest.approx(0.0)

    def test_whole_split(self, small_split):
        curves = cooccurrence_curves(None, small_split.train)
        assert curves["cell"].tolist() == ["all"]
        assert curves.loc[0, "count"] == len(small_split.train)

    def test_whole_split_matches_strengths(self):
        split = build_splits(0.7, 0.9, per_class=1000, seed=12, eval_per_class=1)
        row = cooccurrence_curves(None, split.train).iloc[0]
        assert row["invariant"] == pytest.approx(0.7, abs=0.03)
        assert row["spurious"] == pytest.approx(0.9, abs=0.03)

    def test_size_mismatch(self, small_split):
        partition = partition_by_rule(small_split.train, BitKind.SPURIOUS)
        with pytest.raises(ValueError):
            cooccurrence_curves(partition, small_split.val)


class TestResultTables:
    """Test cases for result tables and summaries."""

    def test_fixed_columns(self, sample_results):
        assert list(sample_results.columns) == RESULT_COLUMNS

    def test_dataset_name(self):
        assert dataset_name(0.7, 0.9) == "two_piece_0.7_0.9"

    def test_filter_by_method(self, sample_results):
        result = filter_results(sample_results, methods=["gala"])
        assert len(result) == 2
        assert all(result["method"] == "gala")

    def test_filter_by_dataset(self, sample_results):
        result = filter_results(sample_results, datasets=[(0.9, 0.7)])
        assert len(result) == 1

    def test_filter_keeps_failures_on_request(self, sample_results):
        assert len(filter_results(sample_results, status=None)) == 5
        assert len(filter_results(sample_results, status="failed")) == 1

    def test_summarize_runs(self, sample_results):
        summary = summarize_runs(sample_results)
        assert list(summary.columns) == SUMMARY_COLUMNS
        erm = summary[summary["method"] == "erm"].iloc[0]
        assert erm["mean"] == pytest.approx(0.45)
        assert erm["std"] == pytest.approx(np.std([0.4, 0.5], ddof=1))
        assert erm["n_seeds"] == 2
        assert not erm["single_seed"]
        gala = summary[(summary["method"] == "gala") & (summary["a"] == 0.7)].iloc[0]
        assert gala["n_seeds"] == 1
        assert gala["single_seed"]
        assert np.isnan(gala["std"])
        assert gala["identification_f1"] == pytest.approx(0.8)

    def test_summarize_empty(self):
        summary = summarize_runs(runs_to_frame([]))
        assert summary.empty
        assert list(summary.columns) == SUMMARY_COLUMNS

    def test_compare_methods(self, sample_results):
        table = compare_methods(summarize_runs(sample_results))
        assert table.loc["two_piece_0.7_0.9", "gala"] == pytest.approx(0.7)
        assert table.loc["two_piece_0.7_0.9", "erm"] == pytest.approx(0.45)
        assert np.isnan(table.loc["two_piece_0.9_0.7", "erm"])

    def test_accuracy_by_dataset(self, sample_results):
        nested = accuracy_by_dataset(summarize_runs(sample_results))
        assert nested["two_piece_0.9_0.7"]["gala"][0] == pytest.approx(0.85)

    def test_sweep_table(self):
        records = [
            {"kind": "sweep_penalty", "method": "gala", "a": 0.7, "b": 0.9, "seed": s,
             "test_acc": acc, "penalty_weight": w, "status": "ok"}
            for s, w, acc in [(1, 0.5, 0.6), (2, 0.5, 0.7), (1, 2.0, 0.8)]
        ]
        table = sweep_table(runs_to_frame(records), "penalty_weight")
        assert table["penalty_weight"].tolist() == [0.5, 2.0]
        assert table["mean"].tolist() == pytest.approx([0.65, 0.8])
