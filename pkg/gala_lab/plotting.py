import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)


def _empty_figure(message: str) -> go.Figure:
    fig = go.Figure()
    fig.add_annotation(
        text=message,
        xref="paper", yref="paper",
        x=0.5, y=0.5, showarrow=False, font_size=16,
    )
    return fig


def create_cooccurrence_plot(curves: pd.DataFrame, title: str = "Motif co-occurrence with the label") -> go.Figure:
    """
    Bar chart of invariant and spurious co-occurrence per partition cell.

    Args:
        curves (pd.DataFrame): Output of ``analysis.cooccurrence_curves``, optionally
            with a ``source`` column as written by the suite audit
        title (str): Figure title

    Returns:
        go.Figure: Plotly figure object
    """
    if curves.empty:
        return _empty_figure("No partition available")

    cells = curves["cell"]
    if "source" in curves.columns:
        cells = curves["source"] + " " + curves["cell"]

    fig = go.Figure()
    for column, label in (("invariant", "Invariant motif"), ("spurious", "Spurious motif")):
        fig.add_trace(
            go.Bar(
                x=cells,
                y=curves[column],
                name=label,
                text=[f"{v:.2f}" for v in curves[column]],
                textposition="outside",
            )
        )
    fig.update_layout(
        title=title,
        barmode="group",
        xaxis_title="Partition cell",
        yaxis_title="P(motif class = label)",
        yaxis_range=[0, 1.1],
    )
    return fig


def create_sweep_plot(
    sweeps: Dict[str, pd.DataFrame],
    title: str = "Sensitivity of test accuracy",
) -> go.Figure:
    """
    One subplot per swept hyperparameter with mean accuracy and a std band.

    Args:
        sweeps (Dict[str, pd.DataFrame]): Parameter name -> ``analysis.sweep_table`` output
        title (str): Figure title
    """
    sweeps = {name: table for name, table in sweeps.items() if not table.empty}
    if not sweeps:
        return _empty_figure("No sweep results available")

    fig = make_subplots(rows=1, cols=len(sweeps), subplot_titles=list(sweeps))
    for col, (parameter, table) in enumerate(sweeps.items(), start=1):
        fig.add_trace(
            go.Scatter(
                x=table[parameter],
                y=table["mean"],
                error_y=dict(type="data", array=table["std"].fillna(0.0)),
                mode="lines+markers",
                name=parameter,
            ),
            row=1, col=col,
        )
        fig.update_xaxes(title_text=parameter, row=1, col=col)
        fig.update_yaxes(title_text="Test accuracy", row=1, col=col)
    fig.update_layout(title=title, showlegend=False)
    return fig


def create_accuracy_plot(summary: pd.DataFrame, title: str = "Test accuracy by method") -> go.Figure:
    """
    Grouped bars of mean test accuracy per dataset with std error bars.

    Args:
        summary (pd.DataFrame): Output of ``analysis.summarize_runs``
        title (str): Figure title
    """
    if summary.empty:
        return _empty_figure("No finished runs to plot")

    datasets = [f"({a:g}, {b:g})" for a, b in zip(summary["a"], summary["b"])]
    summary = summary.assign(dataset=datasets)
    fig = go.Figure()
    for method in sorted(summary["method"].unique()):
        rows = summary[summary["method"] == method]
        fig.add_trace(
            go.Bar(
                x=rows["dataset"],
                y=rows["mean"],
                error_y=dict(type="data", array=rows["std"].fillna(0.0)),
                name=method,
            )
        )
    fig.update_layout(
        title=title,
        barmode="group",
        xaxis_title="Dataset (a, b)",
        yaxis_title="Mean test accuracy",
        yaxis_range=[0, 1],
    )
    return fig


def create_training_curves(history: Sequence[Dict[str, float]], title: str = "Training curves") -> go.Figure:
    """Loss and train/validation accuracy per epoch, pretraining shaded."""
    if not history:
        return _empty_figure("No epochs were run")

    frame = pd.DataFrame(list(history))
    fig = make_subplots(rows=2, cols=1, subplot_titles=["Loss", "Accuracy"], vertical_spacing=0.15)
    for column in ("loss", "cls_loss", "contrast_loss"):
        fig.add_trace(go.Scatter(x=frame["epoch"], y=frame[column], mode="lines", name=column), row=1, col=1)
    for column in ("train_acc", "val_acc"):
        fig.add_trace(go.Scatter(x=frame["epoch"], y=frame[column], mode="lines", name=column), row=2, col=1)

    pretrain = frame[frame["phase"] == "pretrain"]
    if not pretrain.empty:
        fig.add_vrect(
            x0=pretrain["epoch"].min() - 0.5,
            x1=pretrain["epoch"].max() + 0.5,
            fillcolor="gray", opacity=0.15, line_width=0,
        )
    fig.update_layout(title=title)
    return fig


def save_figure(fig: go.Figure, path: Union[str, Path]) -> Path:
    """Write an HTML file that loads plotly.js from the CDN."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn", full_html=True)
    logger.info("Saved figure %s", path)
    return path


def save_report_figures(
    summary: pd.DataFrame,
    out_dir: Union[str, Path],
    sweeps: Optional[Dict[str, pd.DataFrame]] = None,
    curves: Optional[Dict[str, pd.DataFrame]] = None,
) -> List[Path]:
    """
    Write the report figures into ``out_dir``.

    Args:
        summary (pd.DataFrame): Per-method summary
        out_dir (Union[str, Path]): Destination directory
        sweeps (Optional[Dict[str, pd.DataFrame]]): Sweep tables by parameter
        curves (Optional[Dict[str, pd.DataFrame]]): Co-occurrence curves by dataset name

    Returns:
        List[Path]: Written files
    """
    out_dir = Path(out_dir)
    written = [save_figure(create_accuracy_plot(summary), out_dir / "accuracy.html")]
    if sweeps:
        written.append(save_figure(create_sweep_plot(sweeps), out_dir / "sweeps.html"))
    for name, table in (curves or {}).items():
        written.append(
            save_figure(create_cooccurrence_plot(table, title=f"Co-occurrence on {name}"), out_dir / f"cooccurrence_{name}.html")
        )
    return written
