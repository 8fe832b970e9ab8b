from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn

from gala_lab.data_loader import to_data_list
from gala_lab.env_assistant import Partition
from gala_lab.graph_synth import SyntheticGraph
from gala_lab.models import predict

RESULT_COLUMNS = [
    "kind",
    "method",
    "a",
    "b",
    "seed",
    "test_acc",
    "val_acc",
    "train_acc",
    "selected_epoch",
    "identification_f1",
    "edge_score_gap",
    "negative_fraction",
    "penalty_weight",
    "upsample_k",
    "status",
    "error",
]

SUMMARY_COLUMNS = [
    "method",
    "a",
    "b",
    "mean",
    "std",
    "n_seeds",
    "single_seed",
    "identification_f1",
    "negative_fraction",
]


def dataset_name(a: float, b: float) -> str:
    return f"two_piece_{a:g}_{b:g}"


def eval_accuracy(model: nn.Module, graphs: Sequence[SyntheticGraph]) -> float:
    """
    Fraction of graphs whose argmax prediction equals the label.

    Args:
        model (nn.Module): Trained model
        graphs (Sequence[SyntheticGraph]): Graphs to score

    Returns:
        float: Accuracy in [0, 1]; 0 for an empty list
    """
    if not graphs:
        return 0.0
    logits = predict(model, to_data_list(graphs)).logits
    labels = torch.tensor([g.label for g in graphs])
    return float((logits.argmax(dim=1) == labels).float().mean())


def edge_scores_by_graph(model: nn.Module, graphs: Sequence[SyntheticGraph]) -> List[np.ndarray]:
    """
    Per-graph edge scores, one per undirected edge in ``graph.edges`` order.

    Returns:
        List[np.ndarray]: Empty when the model has no edge scorer
    """
    if not graphs:
        return []
    scores = predict(model, to_data_list(graphs)).edge_scores
    if scores is None:
        return []
    # directed layout: edge e sits at 2e and 2e + 1
    undirected = scores[0::2].numpy()
    bounds = np.cumsum([0] + [len(g.edges) for g in graphs])
    return [undirected[start:stop] for start, stop in zip(bounds[:-1], bounds[1:])]


def identification_f1(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """
    Mean F1 between the top-k edges and the invariant motif, k = motif edge count.

    Ties in the ranking go to the lower edge index. Graphs without motif
    edges are skipped.

    Args:
        scores (Sequence[np.ndarray]): Per-graph edge scores
        masks (Sequence[np.ndarray]): Per-graph ground-truth invariant masks

    Returns:
        float: Mean F1 over graphs, NaN when no graph has motif edges
    """
    values = []
    for graph_scores, mask in zip(scores, masks):
        mask = np.asarray(mask, dtype=bool)
        k = int(mask.sum())
        if k == 0:
            continue
        top = np.argsort(-np.asarray(graph_scores, dtype=np.float64), kind="stable")[:k]
        # precision and recall share the denominator k, so F1 equals both
        values.append(mask[top].sum() / k)
    return float(np.mean(values)) if values else float("nan")


def edge_score_gap(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """Mean score on invariant edges minus mean score on the other edges."""
    if not scores:
        return float("nan")
    flat_scores = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores])
    flat_masks = np.concatenate([np.asarray(m, dtype=bool) for m in masks])
    if flat_masks.all() or not flat_masks.any():
        return float("nan")
    return float(flat_scores[flat_masks].mean() - flat_scores[~flat_masks].mean())


def _cooccurrence_row(cell: str, graphs: Sequence[SyntheticGraph]) -> Dict[str, float]:
    if not graphs:
        return {"cell": cell, "count": 0, "invariant": float("nan"), "spurious": float("nan")}
    return {
        "cell": cell,
        "count": len(graphs),
        "invariant": float(np.mean([g.bits.c_bit == g.label for g in graphs])),
        "spurious": float(np.mean([g.bits.s_bit == g.label for g in graphs])),
    }


def cooccurrence_curves(
    partition: Optional[Partition],
    graphs: Sequence[SyntheticGraph],
) -> pd.DataFrame:
    """
    Empirical P(motif class = label) per partition cell from ground-truth bits.

    Args:
        partition (Optional[Partition]): Assistant partition over ``graphs``;
            None gives a single row over the whole split
        graphs (Sequence[SyntheticGraph]): The partitioned graphs

    Returns:
        pd.DataFrame: Columns cell, count, invariant, spurious
    """
    if partition is None:
        return pd.DataFrame([_cooccurrence_row("all", graphs)])
    if partition.size != len(graphs):
        raise ValueError(f"partition covers {partition.size} graphs, got {len(graphs)}")
    rows = [
        _cooccurrence_row("positive", [graphs[i] for i in partition.positive_idx]),
        _cooccurrence_row("negative", [graphs[i] for i in partition.negative_idx]),
    ]
    return pd.DataFrame(rows)


def runs_to_frame(records: Sequence[Dict[str, object]]) -> pd.DataFrame:
    """
    Collect per-run records into a table with the fixed result column order.

    Missing fields become NaN; unknown fields are dropped.
    """
    frame = pd.DataFrame(list(records))
    for column in RESULT_COLUMNS:
        if column not in frame.columns:
            frame[column] = np.nan
    return frame[RESULT_COLUMNS]


def filter_results(
    data: pd.DataFrame,
    methods: Optional[List[str]] = None,
    datasets: Optional[List[Tuple[float, float]]] = None,
    status: Optional[str] = "ok",
) -> pd.DataFrame:
    """
    Filter run results by method, dataset strengths and run status.

    Args:
        data (pd.DataFrame): Result table
        methods (Optional[List[str]]): Methods to keep, all when None
        datasets (Optional[List[Tuple[float, float]]]): (a, b) pairs to keep, all when None
        status (Optional[str]): Keep only runs with this status, all when None

    Returns:
        pd.DataFrame: Filtered copy
    """
    keep = pd.Series(True, index=data.index)
    if methods is not None:
        keep &= data["method"].isin(methods)
    if datasets is not None:
        pairs = {(round(a, 6), round(b, 6)) for a, b in datasets}
        keep &= pd.Series(
            [(round(a, 6), round(b, 6)) in pairs for a, b in zip(data["a"], data["b"])],
            index=data.index,
        )
    if status is not None:
        keep &= data["status"] == status
    return data[keep].copy()


def summarize_runs(data: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and standard deviation of test accuracy per method and dataset.

    Args:
        data (pd.DataFrame): Result table from ``runs_to_frame``

    Returns:
        pd.DataFrame: One row per (method, a, b) in ``SUMMARY_COLUMNS`` order;
        ``std`` is NaN and ``single_seed`` True when only one seed finished
    """
    ok = filter_results(data)
    if ok.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)

    for column in ("test_acc", "identification_f1", "negative_fraction"):
        ok[column] = pd.to_numeric(ok[column], errors="coerce")

    summary = (
        ok.groupby(["method", "a", "b"], sort=True)
        .agg(
            mean=("test_acc", "mean"),
            std=("test_acc", "std"),
            n_seeds=("seed", "nunique"),
            identification_f1=("identification_f1", "mean"),
            negative_fraction=("negative_fraction", "mean"),
        )
        .reset_index()
    )
    summary["single_seed"] = summary["n_seeds"] < 2
    return summary[SUMMARY_COLUMNS]


def compare_methods(summary: pd.DataFrame) -> pd.DataFrame:
    """
    Pivot mean accuracies into a dataset x method table.

    Returns:
        pd.DataFrame: Index ``dataset``, one column per method
    """
    if summary.empty:
        return pd.DataFrame()
    table = summary.assign(dataset=[dataset_name(a, b) for a, b in zip(summary["a"], summary["b"])])
    return table.pivot_table(index="dataset", columns="method", values="mean", aggfunc="mean")


def sweep_table(data: pd.DataFrame, parameter: str) -> pd.DataFrame:
    """Mean and std of test accuracy per value of a swept hyperparameter."""
    ok = filter_results(data)
    if ok.empty:
        return pd.DataFrame(columns=[parameter, "mean", "std"])
    return (
        ok.groupby(parameter)["test_acc"]
        .agg(["mean", "std"])
        .reset_index()
        .sort_values(parameter)
    )


def accuracy_by_dataset(summary: pd.DataFrame) -> Dict[str, Dict[str, Tuple[float, float]]]:
    """Nested dict dataset -> method -> (mean, std), used by the report figures."""
    result: Dict[str, Dict[str, Tuple[float, float]]] = {}
    for _, row in summary.iterrows():
        name = dataset_name(row["a"], row["b"])
        result.setdefault(name, {})[row["method"]] = (float(row["mean"]), float(row["std"]))
    return result
