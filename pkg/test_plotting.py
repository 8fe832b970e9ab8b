import os
import sys

import pandas as pd
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from gala_lab.plotting import (
    create_accuracy_plot,
    create_cooccurrence_plot,
    create_sweep_plot,
    create_training_curves,
    save_figure,
    save_report_figures,
)


@pytest.fixture
def summary():
    return pd.DataFrame({
        "method": ["erm", "gala", "erm", "gala"],
        "a": [0.7, 0.7, 0.9, 0.9],
        "b": [0.9, 0.9, 0.7, 0.7],
        "mean": [0.45, 0.7, 0.85, 0.86],
        "std": [0.05, float("nan"), 0.01, 0.02],
    })


@pytest.fixture
def history():
    return [
        {"epoch": e, "phase": "pretrain" if e <= 2 else "finetune", "loss": 1.0 / e,
         "cls_loss": 1.0 / e, "contrast_loss": 0.0, "train_acc": 0.5, "val_acc": 0.4}
        for e in range(1, 5)
    ]


class TestPlots:
    """Test cases for the report figures."""

    def test_empty_inputs_show_message(self):
        for fig in (
            create_accuracy_plot(pd.DataFrame()),
            create_cooccurrence_plot(pd.DataFrame()),
            create_sweep_plot({}),
            create_training_curves([]),
        ):
            assert len(fig.data) == 0
            assert len(fig.layout.annotations) == 1

    def test_accuracy_plot_one_trace_per_method(self, summary):
        fig = create_accuracy_plot(summary)
        assert [trace.name for trace in fig.data] == ["erm", "gala"]
        assert list(fig.data[0].x) == ["(0.7, 0.9)", "(0.9, 0.7)"]

    def test_cooccurrence_plot(self):
        curves = pd.DataFrame({
            "cell": ["positive", "negative"],
            "count": [90, 10],
            "invariant": [0.7, 0.7],
            "spurious": [1.0, 0.0],
        })
        fig = create_cooccurrence_plot(curves)
        assert len(fig.data) == 2
        assert list(fig.data[1].y) == [1.0, 0.0]

    def test_sweep_plot_skips_empty_tables(self):
        sweeps = {
            "penalty_weight": pd.DataFrame({"penalty_weight": [0.5, 1.0], "mean": [0.6, 0.7], "std": [0.1, 0.1]}),
            "upsample_k": pd.DataFrame(columns=["upsample_k", "mean", "std"]),
        }
        fig = create_sweep_plot(sweeps)
        assert len(fig.data) == 1
        assert fig.data[0].name == "penalty_weight"

    def test_training_curves(self, history):
        fig = create_training_curves(history)
        assert len(fig.data) == 5
        assert len(fig.layout.shapes) == 1

    def test_save_report_figures(self, tmp_path, summary):
        curves = {"two_piece_0.7_0.9": pd.DataFrame({
            "cell": ["positive"], "count": [1], "invariant": [1.0], "spurious": [1.0],
        })}
        written = save_report_figures(summary, tmp_path, curves=curves)
        assert [p.name for p in written] == ["accuracy.html", "cooccurrence_two_piece_0.7_0.9.html"]
        assert all(p.exists() for p in written)

    def test_cooccurrence_plot_labels_sources(self):
        curves = pd.DataFrame({
            "source": ["assistant", "assistant", "spurious_rule", "spurious_rule"],
            "cell": ["positive", "negative", "positive", "negative"],
            "count": [80, 20, 90, 10],
            "invariant": [0.7, 0.68, 0.7, 0.7],
            "spurious": [0.97, 0.1, 1.0, 0.0],
        })
        fig = create_cooccurrence_plot(curves)
        assert list(fig.data[0].x) == [
            "assistant positive", "assistant negative", "spurious_rule positive", "spurious_rule negative",
        ]

    def test_figures_load_plotly_from_cdn(self, tmp_path, summary):
        path = save_figure(create_accuracy_plot(summary), tmp_path / "accuracy.html")
        html = path.read_text(encoding="utf-8")
        assert "cdn.plot.ly" in html
        assert path.stat().st_size < 500_000
