import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

logger = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "dot")


class EmptyAssignmentError(ValueError):
    """Contrastive loss requested for a pair assignment without anchors."""


@dataclass
class ContrastConfig:
    penalty_weight: float = 1.0
    temperature: float = 1.0
    similarity: str = "cosine"
    one_side: bool = True
    # None means every eligible graph in the batch
    max_negatives: Optional[int] = None
    # restrict negatives to graphs sharing the anchor's assistant prediction
    match_assistant: bool = True
    cross_partition: bool = True

    def __post_init__(self):
        if self.penalty_weight < 0:
            raise ValueError(f"penalty_weight must be >= 0, got {self.penalty_weight}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        if self.max_negatives is not None and self.max_negatives < 1:
            raise ValueError(f"max_negatives must be >= 1 or None, got {self.max_negatives}")


@dataclass
class PairAssignment:
    """
    Anchors with their positive and negative partners, all as batch indices.

    ``dropped`` counts candidate anchors skipped for lack of a positive.
    """

    anchors: List[int] = field(default_factory=list)
    positives: List[List[int]] = field(default_factory=list)
    negatives: List[List[int]] = field(default_factory=list)
    dropped: int = 0

    @property
    def is_empty(self) -> bool:
        return not self.anchors

    def num_pairs(self) -> int:
        return sum(len(p) for p in self.positives)

    def as_sets(self):
        """Comparable view: anchor -> (positive set, negative set)."""
        return {
            a: (frozenset(p), frozenset(n))
            for a, p, n in zip(self.anchors, self.positives, self.negatives)
        }


def _as_array(values) -> np.ndarray:
    if isinstance(values, Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def classification_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy over the batch."""
    return F.cross_entropy(logits, labels)


def _limit(candidates: np.ndarray, max_count: Optional[int], rng: Optional[np.random.Generator]) -> List[int]:
    if max_count is None or len(candidates) <= max_count:
        return candidates.tolist()
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(candidates, size=max_count, replace=False)).tolist()


def sample_pairs_gala(
    labels,
    correct,
    proxy,
    one_side: bool = True,
    match_assistant: bool = True,
    cross_partition: bool = True,
    max_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> PairAssignment:
    """
    Cross-partition pair sampling.

    Positives share the anchor's label but sit in the other partition cell
    (assistant correct vs incorrect); negatives carry a different label and,
    with ``match_assistant``, the same assistant prediction as the anchor.

    Args:
        labels: Class label per batch graph
        correct: Whether the assistant got each graph right
        proxy: Assistant prediction (label or cluster id) per graph
        one_side (bool): Use only assistant-incorrect graphs as anchors
        match_assistant (bool): Restrict negatives to the anchor's proxy value
        cross_partition (bool): Require positives from the opposite cell
        max_negatives (Optional[int]): Cap on negatives per anchor
        rng (Optional[np.random.Generator]): Stream for negative subsampling

    Returns:
        PairAssignment: Anchors without any positive are counted in ``dropped``
    """
    labels = _as_array(labels)
    correct = _as_array(correct).astype(bool)
    proxy = _as_array(proxy)
    if not (len(labels) == len(correct) == len(proxy)):
        raise ValueError("labels, correct and proxy must have the same length")

    index = np.arange(len(labels))
    candidates = index[~correct] if one_side else index
    assignment = PairAssignment()
    for i in candidates:
        positive = (labels == labels[i]) & (index != i)
        if cross_partition:
            positive &= correct != correct[i]
        negative = labels != labels[i]
        if match_assistant:
            negative &= proxy == proxy[i]
        if not positive.any():
            assignment.dropped += 1
            continue
        assignment.anchors.append(int(i))
        assignment.positives.append(index[positive].tolist())
        assignment.negatives.append(_limit(index[negative], max_negatives, rng))

    if assignment.dropped:
        logger.debug("Dropped %d anchors without a cross-partition positive", assignment.dropped)
    return assignment


def sample_pairs_ciga(
    labels,
    max_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> PairAssignment:
    """
    Intra-class pair sampling: any same-label graph is a positive.

    Args:
        labels: Class label per batch graph
        max_negatives (Optional[int]): Cap on negatives per anchor
        rng (Optional[np.random.Generator]): Stream for negative subsampling

    Returns:
        PairAssignment: Every graph with at least one same-label partner is an anchor
    """
    labels = _as_array(labels)
    index = np.arange(len(labels))
    assignment = PairAssignment()
    for i in index:
        positive = (labels == labels[i]) & (index != i)
        if not positive.any():
            assignment.dropped += 1
            continue
        assignment.anchors.append(int(i))
        assignment.positives.append(index[positive].tolist())
        assignment.negatives.append(_limit(index[labels != labels[i]], max_negatives, rng))

    if len(np.unique(labels)) < 2 and len(labels) > 0:
        logger.warning("Single-class batch: contrastive pairs have no negatives")
    return assignment


def similarity_matrix(embeddings: Tensor, similarity: str = "cosine", temperature: float = 1.0) -> Tensor:
    if similarity == "cosine":
        embeddings = F.normalize(embeddings, dim=1)
    return embeddings @ embeddings.t() / temperature


def contrastive_loss(
    embeddings: Tensor,
    assignment: PairAssignment,
    config: Optional[ContrastConfig] = None,
) -> Tensor:
    """
    InfoNCE over an explicit pair assignment.

    For every anchor a and positive p the term is
    -log(exp(s_ap) / (exp(s_ap) + sum_n exp(s_an))); the loss is the mean
    over all (a, p) pairs.

    Args:
        embeddings (Tensor): (batch, dim) graph embeddings
        assignment (PairAssignment): Pairs to contrast
        config (Optional[ContrastConfig]): Similarity and temperature

    Returns:
        Tensor: Scalar loss

    Raises:
        EmptyAssignmentError: If the assignment has no anchors
    """
    config = config or ContrastConfig()
    if assignment.is_empty:
        raise EmptyAssignmentError("pair assignment has no anchors")

    sims = similarity_matrix(embeddings, config.similarity, config.temperature)
    terms = []
    for anchor, positives, negatives in zip(assignment.anchors, assignment.positives, assignment.negatives):
        pos = sims[anchor, positives]
        neg = sims[anchor, negatives]
        logits = torch.cat([pos.unsqueeze(1), neg.unsqueeze(0).expand(len(positives), -1)], dim=1)
        terms.append(torch.logsumexp(logits, dim=1) - pos)
    return torch.cat(terms).mean()


def total_loss(cls: Tensor, contrast: Tensor, penalty_weight: float) -> Tensor:
    """Classification loss plus the weighted contrastive penalty."""
    if penalty_weight < 0:
        raise ValueError(f"penalty_weight must be >= 0, got {penalty_weight}")
    return cls + penalty_weight * contrast


def pair_statistics(assignments: Sequence[PairAssignment]) -> dict:
    """Totals across batches, logged once per epoch by the trainer."""
    return {
        "batches": len(assignments),
        "empty": sum(a.is_empty for a in assignments),
        "anchors": sum(len(a.anchors) for a in assignments),
        "pairs": sum(a.num_pairs() for a in assignments),
        "dropped": sum(a.dropped for a in assignments),
    }
