import copy
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn
from torch_geometric.data import Batch
from tqdm import tqdm

from gala_lab.data_loader import to_data_list
from gala_lab.env_assistant import (
    MAX_UPSAMPLE,
    AssistantConfig,
    Partition,
    TrainingDivergedError,
    partition_by_clustering,
    partition_by_prediction,
    train_assistant,
    upsample_minority,
)
from gala_lab.graph_synth import DatasetSplit
from gala_lab.models import EncoderConfig, build_model, predict
from gala_lab.objectives import (
    ContrastConfig,
    classification_loss,
    contrastive_loss,
    pair_statistics,
    sample_pairs_ciga,
    sample_pairs_gala,
    total_loss,
)

logger = logging.getLogger(__name__)

METHODS = ("gala", "erm", "erm_interpretable", "ciga_contrast", "oracle_groundtruth")
PENALTY_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
UPSAMPLE_GRID = (1, 2, 3, 4)
MODEL_KIND = {
    "gala": "interpretable",
    "erm": "vanilla",
    "erm_interpretable": "interpretable",
    "ciga_contrast": "interpretable",
    "oracle_groundtruth": "oracle",
}
# offset separating the assistant's seed from the main model's
ASSISTANT_SEED_OFFSET = 10_007


class PairSamplingError(RuntimeError):
    """Too many batches produced no cross-partition pairs."""


@dataclass
class TrainConfig:
    method: str = "gala"
    lr: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 100
    max_epochs: int = 200
    early_stop_patience: int = 5
    penalty_weight: float = 1.0
    upsample_k: int = 2
    seed: int = 1
    proxy: str = "label"
    one_side: bool = True
    match_assistant: bool = True
    max_negatives: Optional[int] = None
    similarity: str = "cosine"
    empty_batch_limit: float = 0.5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    assistant: AssistantConfig = field(default_factory=AssistantConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("batch_size", "upsample_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.upsample_k > MAX_UPSAMPLE:
            raise ValueError(f"upsample_k must be <= {MAX_UPSAMPLE}, got {self.upsample_k}")
        if self.penalty_weight < 0:
            raise ValueError(f"penalty_weight must be >= 0, got {self.penalty_weight}")
        if self.proxy not in ("label", "cluster"):
            raise ValueError(f"proxy must be 'label' or 'cluster', got {self.proxy!r}")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.assistant, dict):
            self.assistant = AssistantConfig(**self.assistant)

    @property
    def uses_contrast(self) -> bool:
        return self.method in ("gala", "ciga_contrast") and self.penalty_weight > 0

    def contrast_config(self) -> ContrastConfig:
        return ContrastConfig(
            penalty_weight=self.penalty_weight,
            similarity=self.similarity,
            one_side=self.one_side,
            max_negatives=self.max_negatives,
            match_assistant=self.match_assistant,
        )


@dataclass
class RunResult:
    method: str
    model: nn.Module
    history: List[Dict[str, float]]
    selected_epoch: int
    train_acc: float
    val_acc: float
    test_acc: float
    partition_stats: Optional[Dict[str, float]]
    wall_seconds: float
    seed: int
    config: TrainConfig

    def to_record(self) -> Dict[str, object]:
        """JSON-ready summary without the model weights."""
        return {
            "method": self.method,
            "seed": self.seed,
            "selected_epoch": self.selected_epoch,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "partition_stats": self.partition_stats,
            "wall_seconds": self.wall_seconds,
            "history": self.history,
            "config": asdict(self.config),
        }


def set_global_seed(seed: int) -> None:
    """Seed python, numpy and torch and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _accuracy(model: nn.Module, data_list) -> float:
    if not data_list:
        return 0.0
    logits = predict(model, data_list).logits
    labels = torch.cat([d.y for d in data_list])
    return float((logits.argmax(dim=1) == labels).float().mean())


def build_partition(split: DatasetSplit, config: TrainConfig) -> Partition:
    """
    Train the environment assistant and partition the training graphs.

    The assistant runs inside a forked RNG so the main run's random streams
    are not disturbed.
    """
    seed = config.seed + ASSISTANT_SEED_OFFSET
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        assistant = train_assistant(split, config.assistant, seed=seed)
        if config.proxy == "cluster":
            return partition_by_clustering(assistant, split, k=config.assistant.cluster_k, seed=seed)
        return partition_by_prediction(assistant, split)


def _epoch_batches(pool: np.ndarray, batch_size: int, generator: torch.Generator) -> List[np.ndarray]:
    order = pool[torch.randperm(len(pool), generator=generator).numpy()]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def run(
    method: str,
    split: DatasetSplit,
    config: Optional[TrainConfig] = None,
    partition: Optional[Partition] = None,
    progress: bool = False,
) -> RunResult:
    """
    Train one model with the given method and select it on validation accuracy.

    The first ``pretrain_epochs`` epochs use the classification loss only; the
    contrastive penalty (gala, ciga_contrast) starts afterwards, and so does
    early stopping.

    Args:
        method (str): One of ``METHODS``; overrides ``config.method``
        split (DatasetSplit): Train/validation/test graphs
        config (Optional[TrainConfig]): Hyperparameters
        partition (Optional[Partition]): Precomputed assistant partition for gala;
            trained on the fly when absent
        progress (bool): Show a progress bar over epochs

    Returns:
        RunResult: Best-validation model with its metrics and history

    Raises:
        TrainingDivergedError: If a loss becomes non-finite
        PairSamplingError: If more than ``empty_batch_limit`` of a gala epoch's
            batches have no anchors
    """
    config = replace(config or TrainConfig(method=method), method=method)
    started = time.perf_counter()
    set_global_seed(config.seed)

    train_data = to_data_list(split.train)
    val_data = to_data_list(split.val)
    test_data = to_data_list(split.test)
    labels = np.array([g.label for g in split.train], dtype=np.int64)
    model = build_model(MODEL_KIND[method], config.encoder, seed=config.seed)

    pool = np.arange(len(train_data), dtype=np.int64)
    if method == "gala" and config.uses_contrast:
        partition = partition or build_partition(split, config)
        pool = upsample_minority(partition, config.upsample_k)
        logger.info(
            "Partition: %d positive, %d negative; training pool %d graphs",
            len(partition.positive_idx), len(partition.negative_idx), len(pool),
        )
    else:
        partition = None

    contrast_config = config.contrast_config()
    generator = torch.Generator().manual_seed(config.seed)
    pair_rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    history: List[Dict[str, float]] = []
    best_val, best_state, selected_epoch, stale = -math.inf, None, 0, 0
    epochs = range(1, config.max_epochs + 1)
    if progress:
        epochs = tqdm(epochs, desc=method)

    for epoch in epochs:
        finetune = epoch > config.pretrain_epochs
        contrast_on = finetune and config.uses_contrast
        model.train()
        totals = {"loss": 0.0, "cls_loss": 0.0, "contrast_loss": 0.0}
        assignments = []
        batches = _epoch_batches(pool, config.batch_size, generator)

        for step, idx in enumerate(batches):
            batch = Batch.from_data_list([train_data[i] for i in idx])
            optimizer.zero_grad()
            out = model(batch)
            cls = classification_loss(out.logits, batch.y)
            loss = cls
            if contrast_on:
                if method == "gala":
                    assignment = sample_pairs_gala(
                        labels[idx],
                        partition.correct[idx],
                        partition.proxy[idx],
                        one_side=config.one_side,
                        match_assistant=config.match_assistant,
                        max_negatives=config.max_negatives,
                        rng=pair_rng,
                    )
                else:
                    assignment = sample_pairs_ciga(labels[idx], config.max_negatives, pair_rng)
                assignments.append(assignment)
                if not assignment.is_empty:
                    contrast = contrastive_loss(out.graph_emb, assignment, contrast_config)
                    loss = total_loss(cls, contrast, config.penalty_weight)
                    totals["contrast_loss"] += contrast.item() / len(batches)

            if not torch.isfinite(loss):
                logger.error("Loss diverged at epoch %d batch %d: %s", epoch, step, loss.item())
                raise TrainingDivergedError(
                    f"{method} loss became {loss.item()} at epoch {epoch}, batch {step}; "
                    "lower the learning rate or the penalty weight"
                )
            loss.backward()
            optimizer.step()
            totals["loss"] += loss.item() / len(batches)
            totals["cls_loss"] += cls.item() / len(batches)

        pairs = pair_statistics(assignments)
        if contrast_on and pairs["dropped"]:
            logger.warning("Epoch %d: %d anchors had no positive partner", epoch, pairs["dropped"])
        if method == "gala" and contrast_on and pairs["empty"] > config.empty_batch_limit * len(batches):
            logger.error("Epoch %d: %d of %d batches had no contrastive pairs", epoch, pairs["empty"], len(batches))
            raise PairSamplingError(
                f"{pairs['empty']} of {len(batches)} batches had no cross-partition pairs; "
                "raise upsample_k or batch_size"
            )

        record = {
            "epoch": epoch,
            "phase": "finetune" if finetune else "pretrain",
            **totals,
            "train_acc": _accuracy(model, train_data),
            "val_acc": _accuracy(model, val_data),
            "pairs": pairs["pairs"],
            "dropped_anchors": pairs["dropped"],
        }
        history.append(record)
        logger.info(
            "%s epoch %d [%s] loss %.4f train %.4f val %.4f",
            method, epoch, record["phase"], record["loss"], record["train_acc"], record["val_acc"],
        )

        if record["val_acc"] > best_val:
            best_val, selected_epoch, stale = record["val_acc"], epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        elif finetune:
            stale += 1
            if config.early_stop_patience and stale >= config.early_stop_patience:
                logger.info("Early stop at epoch %d; best epoch %d", epoch, selected_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    result = RunResult(
        method=method,
        model=model,
        history=history,
        selected_epoch=selected_epoch,
        train_acc=_accuracy(model, train_data),
        val_acc=_accuracy(model, val_data),
        test_acc=_accuracy(model, test_data),
        partition_stats=partition.stats() if partition is not None else None,
        wall_seconds=time.perf_counter() - started,
        seed=config.seed,
        config=config,
    )
    logger.info("%s seed %d: val %.4f test %.4f (epoch %d)", method, config.seed, result.val_acc, result.test_acc, selected_epoch)
    return result
