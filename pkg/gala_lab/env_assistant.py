import copy
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from sklearn.cluster import KMeans
from torch import nn
from torch_geometric.data import Data
from torch_geometric.loader import DataLoader
from tqdm import tqdm

from gala_lab.data_loader import to_data_list
from gala_lab.graph_synth import DatasetSplit, SyntheticGraph
from gala_lab.models import EncoderConfig, build_model, predict
from gala_lab.objectives import classification_loss
from gala_lab.scm_core import BitKind

logger = logging.getLogger(__name__)

BACKBONES = {
    "vanilla_encoder": "vanilla",
    "interpretable_backbone": "interpretable",
}
SELECTIONS = ("best_train", "best_val")
# largest minority repetition factor
MAX_UPSAMPLE = 4


class TrainingDivergedError(RuntimeError):
    """A training loss became NaN or infinite."""


@dataclass
class AssistantConfig:
    backbone: str = "vanilla_encoder"
    selection: str = "best_train"
    epochs: int = 20
    cluster_k: Optional[int] = None
    lr: float = 1e-3
    batch_size: int = 128
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {sorted(BACKBONES)}, got {self.backbone!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.cluster_k is not None and self.cluster_k < 2:
            raise ValueError(f"cluster_k must be >= 2, got {self.cluster_k}")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)


@dataclass
class Partition:
    """
    Split of the training graphs by the assistant.

    ``positive_idx`` holds graphs the assistant gets right, ``negative_idx`` the
    rest; ``proxy`` is the assistant's prediction (label or cluster id) per graph.
    """

    positive_idx: np.ndarray
    negative_idx: np.ndarray
    proxy: np.ndarray

    def __post_init__(self):
        self.positive_idx = np.sort(np.asarray(self.positive_idx, dtype=np.int64))
        self.negative_idx = np.sort(np.asarray(self.negative_idx, dtype=np.int64))
        self.proxy = np.asarray(self.proxy, dtype=np.int64)
        n = len(self.proxy)
        covered = np.concatenate([self.positive_idx, self.negative_idx])
        if len(covered) != n or not np.array_equal(np.sort(covered), np.arange(n)):
            raise ValueError("positive and negative cells must be disjoint and cover every graph")

    @property
    def size(self) -> int:
        return len(self.proxy)

    @property
    def correct(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.positive_idx] = True
        return mask

    @property
    def negative_fraction(self) -> float:
        return len(self.negative_idx) / self.size if self.size else 0.0

    def minority(self) -> str:
        """Name of the smaller cell; a tie counts the negative cell as minority."""
        return "positive" if len(self.positive_idx) < len(self.negative_idx) else "negative"

    def stats(self) -> Dict[str, float]:
        return {
            "num_graphs": self.size,
            "num_positive": len(self.positive_idx),
            "num_negative": len(self.negative_idx),
            "negative_fraction": self.negative_fraction,
        }


def _train_graphs(split: Union[DatasetSplit, Sequence[Data]]) -> List[Data]:
    if isinstance(split, DatasetSplit):
        return to_data_list(split.train)
    return list(split)


def _labels(data_list: Sequence[Data]) -> np.ndarray:
    return np.array([int(d.y) for d in data_list], dtype=np.int64)


def _accuracy(model: nn.Module, data_list: Sequence[Data]) -> float:
    if not data_list:
        return 0.0
    logits = predict(model, data_list).logits
    return float((logits.argmax(dim=1).numpy() == _labels(data_list)).mean())


def train_assistant(
    split: DatasetSplit,
    config: Optional[AssistantConfig] = None,
    seed: int = 0,
    progress: bool = False,
) -> nn.Module:
    """
    Train the environment assistant with plain ERM.

    Args:
        split (DatasetSplit): Dataset; the assistant sees only the training graphs
            (and the validation graphs when selecting by validation accuracy)
        config (Optional[AssistantConfig]): Backbone, selection rule and schedule
        seed (int): Seed for initialisation and batch order
        progress (bool): Show a progress bar over epochs

    Returns:
        nn.Module: Weights from the selected epoch, in eval mode

    Raises:
        TrainingDivergedError: If a batch loss is not finite
    """
    config = config or AssistantConfig()
    train_data = to_data_list(split.train)
    val_data = to_data_list(split.val) if config.selection == "best_val" else []
    model = build_model(BACKBONES[config.backbone], config.encoder, seed=seed)

    if config.epochs == 0 or not train_data:
        model.eval()
        return model

    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(train_data, batch_size=config.batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    best_score, best_state = -math.inf, None

    epochs = range(1, config.epochs + 1)
    if progress:
        epochs = tqdm(epochs, desc="assistant", leave=False)
    for epoch in epochs:
        model.train()
        for step, batch in enumerate(loader):
            optimizer.zero_grad()
            loss = classification_loss(model(batch).logits, batch.y)
            if not torch.isfinite(loss):
                logger.error("Assistant loss diverged at epoch %d batch %d: %s", epoch, step, loss.item())
                raise TrainingDivergedError(
                    f"assistant loss became {loss.item()} at epoch {epoch}, batch {step}; lower the learning rate"
                )
            loss.backward()
            optimizer.step()

        score = _accuracy(model, val_data if config.selection == "best_val" else train_data)
        logger.debug("Assistant epoch %d %s accuracy %.4f", epoch, config.selection, score)
        if score > best_score:
            best_score, best_state = score, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    logger.info("Assistant selected at %s accuracy %.4f", config.selection, best_score)
    return model


def partition_from_predictions(predictions, labels) -> Partition:
    """Cells from explicit predictions: positive iff the prediction equals the label."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    correct = predictions == labels
    return Partition(np.flatnonzero(correct), np.flatnonzero(~correct), predictions)


def partition_by_prediction(assistant: nn.Module, split: Union[DatasetSplit, Sequence[Data]]) -> Partition:
    """
    Partition training graphs by whether the assistant predicts their label.

    Args:
        assistant (nn.Module): Trained assistant
        split (Union[DatasetSplit, Sequence[Data]]): Dataset or its training graphs

    Returns:
        Partition: proxy is the predicted label
    """
    data_list = _train_graphs(split)
    predictions = predict(assistant, data_list).logits.argmax(dim=1).numpy()
    partition = partition_from_predictions(predictions, _labels(data_list))
    logger.info("Prediction partition: %d positive, %d negative", len(partition.positive_idx), len(partition.negative_idx))
    return partition


def partition_by_rule(graphs: Sequence[SyntheticGraph], which: BitKind) -> Partition:
    """Partition by the Bayes rule that predicts the label from one ground-truth bit."""
    which = BitKind(which)
    predictions = [g.bits.c_bit if which == BitKind.INVARIANT else g.bits.s_bit for g in graphs]
    return partition_from_predictions(predictions, [g.label for g in graphs])


def _kmeans(embeddings: np.ndarray, k: int, seed: int) -> np.ndarray:
    return KMeans(n_clusters=k, random_state=seed, max_iter=300, n_init=10).fit_predict(embeddings)


def partition_from_embeddings(embeddings, labels, k: int, seed: int = 0) -> Partition:
    """
    Cluster embeddings and mark graphs whose cluster's majority label matches theirs.

    Args:
        embeddings: (n, dim) array
        labels: Label per graph
        k (int): Number of clusters, at least 2
        seed (int): Seed of the centroid initialisation

    Returns:
        Partition: proxy is the cluster id
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = min(k, len(embeddings))

    clusters = _kmeans(embeddings, k, seed)
    if (np.bincount(clusters, minlength=k) == 0).any():
        logger.warning("k-means left an empty cluster; re-seeding once")
        clusters = _kmeans(embeddings, k, seed + 1)
        effective = len(np.unique(clusters))
        if effective < k:
            logger.warning("Accepting %d effective clusters out of %d", effective, k)

    majority = np.full(k, -1, dtype=np.int64)
    for cluster in np.unique(clusters):
        # ties go to the lower label
        majority[cluster] = int(np.bincount(labels[clusters == cluster]).argmax())
    correct = majority[clusters] == labels
    return Partition(np.flatnonzero(correct), np.flatnonzero(~correct), clusters)


def partition_by_clustering(
    assistant: nn.Module,
    split: Union[DatasetSplit, Sequence[Data]],
    k: Optional[int] = None,
    seed: int = 0,
) -> Partition:
    """
    Partition training graphs by k-means on the assistant's graph embeddings.

    Args:
        assistant (nn.Module): Trained assistant
        split (Union[DatasetSplit, Sequence[Data]]): Dataset or its training graphs
        k (Optional[int]): Cluster count, the number of classes by default
        seed (int): k-means seed
    """
    data_list = _train_graphs(split)
    k = k or assistant.config.num_classes
    embeddings = predict(assistant, data_list).graph_emb.numpy()
    partition = partition_from_embeddings(embeddings, _labels(data_list), k, seed)
    logger.info("Cluster partition (k=%d): %d positive, %d negative", k, len(partition.positive_idx), len(partition.negative_idx))
    return partition


def upsample_minority(partition: Partition, k: int) -> np.ndarray:
    """
    Training pool with the smaller cell repeated ``k`` times.

    Args:
        partition (Partition): Assistant partition
        k (int): Repetition factor for the minority cell, 1 to MAX_UPSAMPLE

    Returns:
        np.ndarray: Index multiset; the majority cell appears once
    """
    if not 1 <= k <= MAX_UPSAMPLE:
        raise ValueError(f"upsampling factor must lie in [1, {MAX_UPSAMPLE}], got {k}")
    minority = partition.positive_idx if partition.minority() == "positive" else partition.negative_idx
    base = np.arange(partition.size, dtype=np.int64)
    return np.concatenate([base] + [minority] * (k - 1))


def export_partition(
    partition: Partition,
    path: Union[str, os.PathLike],
    labels: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """
    Write one row per training graph: index, proxy, cell and optionally label.

    Returns:
        pd.DataFrame: The table that was written
    """
    frame = pd.DataFrame({
        "index": np.arange(partition.size),
        "proxy": partition.proxy,
        "cell": np.where(partition.correct, "positive", "negative"),
    })
    if labels is not None:
        frame["label"] = np.asarray(labels)
    frame.to_csv(path, index=False)
    return frame
