import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch_geometric.data import Batch
from torch_geometric.loader import DataLoader
from torch_geometric.nn import MessagePassing, global_add_pool, global_mean_pool
from torch_geometric.utils import scatter

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file has an unsupported version or does not match the model."""


@dataclass
class EncoderConfig:
    num_layers: int = 3
    hidden_dim: int = 32
    readout: str = "mean"
    dropout: float = 0.0
    in_dim: int = 1
    num_classes: int = 3
    # soft: reweight messages by edge scores; topk: keep ceil(r|E|) edges per graph
    mask_mode: str = "soft"
    topk_ratio: float = 0.25

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.readout not in ("mean", "sum"):
            raise ValueError(f"readout must be 'mean' or 'sum', got {self.readout!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mask_mode not in ("soft", "topk"):
            raise ValueError(f"mask_mode must be 'soft' or 'topk', got {self.mask_mode!r}")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ValueError(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")


class ModelOutput(NamedTuple):
    logits: Tensor
    graph_emb: Tensor
    edge_scores: Optional[Tensor]


class WeightedGINConv(MessagePassing):
    """
    GIN layer whose neighbour messages are scaled by optional edge weights.

    h_i' = MLP((1 + eps) * h_i + sum_j w_ij * h_j), with a learnable eps.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__(aggr="add")
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, out_dim),
            nn.BatchNorm1d(out_dim),
            nn.ReLU(),
            nn.Linear(out_dim, out_dim),
        )
        self.eps = nn.Parameter(torch.zeros(1))

    def forward(self, x: Tensor, edge_index: Tensor, edge_weight: Optional[Tensor] = None) -> Tensor:
        aggregated = self.propagate(edge_index, x=x, edge_weight=edge_weight)
        return self.mlp((1 + self.eps) * x + aggregated)

    def message(self, x_j: Tensor, edge_weight: Optional[Tensor]) -> Tensor:
        if edge_weight is None:
            return x_j
        return x_j * edge_weight.view(-1, 1)


class GraphEncoder(nn.Module):
    """Stack of weighted GIN layers with batch norm, residuals and a readout."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dims = [config.in_dim] + [config.hidden_dim] * config.num_layers
        self.convs = nn.ModuleList(WeightedGINConv(dims[i], dims[i + 1]) for i in range(config.num_layers))
        self.norms = nn.ModuleList(nn.BatchNorm1d(config.hidden_dim) for _ in range(config.num_layers))

    def forward(
        self,
        x: Tensor,
        edge_index: Tensor,
        batch: Tensor,
        edge_weight: Optional[Tensor] = None,
    ) -> Tuple[Tensor, Tensor]:
        h = x
        for layer, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            out = norm(conv(h, edge_index, edge_weight))
            if layer < len(self.convs) - 1:
                out = F.relu(out)
            out = F.dropout(out, p=self.config.dropout, training=self.training)
            # jump connection; the first layer changes width so it has none
            h = out + h if layer > 0 else out
        node_weight = None
        if edge_weight is not None:
            node_weight = node_weights(edge_index, edge_weight, h.size(0))
        return h, readout(h, batch, self.config.readout, node_weight)


def node_weights(edge_index: Tensor, edge_weight: Tensor, num_nodes: int) -> Tensor:
    """Weight of every node: the largest weight among its incoming edges, 0 when it has none."""
    return scatter(edge_weight, edge_index[1], dim=0, dim_size=num_nodes, reduce="max")


def readout(
    h: Tensor,
    batch: Tensor,
    kind: str = "mean",
    node_weight: Optional[Tensor] = None,
) -> Tensor:
    """
    Pool node embeddings into one vector per graph.

    With ``node_weight`` only the weighted subgraph is pooled: the sum readout
    scales each node by its weight and the mean readout divides by the total
    weight. A graph whose weights are all zero is pooled over all its nodes.

    Args:
        h (Tensor): Node embeddings
        batch (Tensor): Graph id of every node
        kind (str): ``mean`` or ``sum``
        node_weight (Optional[Tensor]): Per node weights in [0, 1]

    Returns:
        Tensor: Graph embeddings (num_graphs, hidden_dim)
    """
    if node_weight is None:
        if kind == "sum":
            return global_add_pool(h, batch)
        return global_mean_pool(h, batch)
    num_graphs = int(batch.max()) + 1 if batch.numel() else 0
    total = scatter(node_weight, batch, dim=0, dim_size=num_graphs, reduce="sum")
    # nothing selected
    empty = (total <= 0)[batch]
    node_weight = torch.where(empty, torch.ones_like(node_weight), node_weight)
    pooled = global_add_pool(h * node_weight.view(-1, 1), batch, size=num_graphs)
    if kind == "sum":
        return pooled
    total = scatter(node_weight, batch, dim=0, dim_size=num_graphs, reduce="sum")
    return pooled / total.view(-1, 1)


def encode(
    batch: Batch,
    encoder: GraphEncoder,
    edge_weights: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Run an encoder on a batch.

    Args:
        batch (Batch): PyG batch
        encoder (GraphEncoder): Encoder weights and config
        edge_weights (Optional[Tensor]): Per directed edge message weights

    Returns:
        Tuple[Tensor, Tensor]: Node embeddings and graph embeddings
    """
    if edge_weights is not None and edge_weights.numel() != batch.edge_index.size(1):
        raise ValueError(
            f"edge weight count {edge_weights.numel()} != edge count {batch.edge_index.size(1)}"
        )
    if batch.x.size(1) != encoder.config.in_dim:
        raise ValueError(f"node feature width {batch.x.size(1)} != encoder in_dim {encoder.config.in_dim}")
    return encoder(batch.x, batch.edge_index, batch.batch, edge_weights)


class EdgeScorer(nn.Module):
    """Two-layer perceptron on concatenated endpoint embeddings, symmetrised."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 1),
        )

    def forward(self, z: Tensor, edge_index: Tensor) -> Tensor:
        src, dst = edge_index
        forward_logit = self.mlp(torch.cat([z[src], z[dst]], dim=-1))
        backward_logit = self.mlp(torch.cat([z[dst], z[src]], dim=-1))
        return torch.sigmoid((forward_logit + backward_logit).view(-1) / 2)


def topk_edge_mask(scores: Tensor, edge_graph: Tensor, ratio: float) -> Tensor:
    """
    Keep the ceil(ratio * |E_g|) highest-scoring edges of every graph.

    Ties at the cutoff go to the lower edge index.

    Args:
        scores (Tensor): One score per edge
        edge_graph (Tensor): Graph id of every edge
        ratio (float): Fraction of edges kept, in (0, 1]

    Returns:
        Tensor: Boolean mask over edges
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    keep = torch.zeros_like(scores, dtype=torch.bool)
    for graph_id in torch.unique(edge_graph):
        idx = torch.nonzero(edge_graph == graph_id, as_tuple=False).view(-1)
        k = math.ceil(ratio * idx.numel())
        # stable sort keeps ascending edge index among equal scores
        order = torch.sort(scores[idx].detach(), descending=True, stable=True).indices
        keep[idx[order[:k]]] = True
    return keep


class VanillaGNN(nn.Module):
    """Encoder plus linear head; the ERM baseline and default environment assistant."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = GraphEncoder(config)
        self.head = nn.Linear(config.hidden_dim, config.num_classes)

    def forward(self, batch: Batch) -> ModelOutput:
        _, graph_emb = encode(batch, self.encoder)
        return ModelOutput(self.head(graph_emb), graph_emb, None)


class OracleGNN(VanillaGNN):
    """Classifier that passes messages along and pools over ground-truth invariant edges only."""

    def forward(self, batch: Batch) -> ModelOutput:
        _, graph_emb = encode(batch, self.encoder, batch.inv_mask)
        return ModelOutput(self.head(graph_emb), graph_emb, batch.inv_mask)


class InterpretableGNN(nn.Module):
    """
    Featurizer g scoring edges and classifier f_c reading the reweighted graph.

    Both halves share the encoder architecture but not their parameters.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.featurizer_encoder = GraphEncoder(config)
        self.featurizer_norm = nn.LayerNorm(config.hidden_dim)
        self.edge_scorer = EdgeScorer(config.hidden_dim)
        self.classifier_encoder = GraphEncoder(config)
        self.classifier_head = nn.Linear(config.hidden_dim, config.num_classes)

    def forward(self, batch: Batch) -> ModelOutput:
        scores = featurize(batch, self)
        weights = scores
        if self.config.mask_mode == "topk":
            weights = edge_weights_from_topk(batch, scores, self.config.topk_ratio)
        logits, graph_emb = classify(batch, weights, self)
        return ModelOutput(logits, graph_emb, scores)


def featurize(batch: Batch, model: InterpretableGNN) -> Tensor:
    """
    Score every directed edge in [0, 1]; both directions of an edge get the same score.

    Args:
        batch (Batch): PyG batch
        model (InterpretableGNN): Backbone holding the featurizer weights

    Returns:
        Tensor: Edge scores aligned with ``batch.edge_index``
    """
    node_emb, _ = encode(batch, model.featurizer_encoder)
    node_emb = model.featurizer_norm(node_emb)
    return model.edge_scorer(node_emb, batch.edge_index)


def classify(batch: Batch, scores: Tensor, model: InterpretableGNN) -> Tuple[Tensor, Tensor]:
    """
    Predict labels with messages reweighted by the edge scores.

    Returns:
        Tuple[Tensor, Tensor]: Logits (batch, num_classes) and the subgraph
        embeddings fed to the contrastive loss
    """
    _, graph_emb = encode(batch, model.classifier_encoder, scores)
    return model.classifier_head(graph_emb), graph_emb


def edge_weights_from_topk(batch: Batch, scores: Tensor, ratio: float) -> Tensor:
    """Hard top-k mask on undirected edges, applied to both directions, scores kept on survivors."""
    undirected = scores[0::2]
    edge_graph = batch.batch[batch.edge_index[0, 0::2]]
    keep = topk_edge_mask(undirected, edge_graph, ratio).repeat_interleave(2)
    return scores * keep.to(scores.dtype)


MODEL_TYPES = {
    "vanilla": VanillaGNN,
    "oracle": OracleGNN,
    "interpretable": InterpretableGNN,
}


def build_model(kind: str, config: EncoderConfig, seed: Optional[int] = None) -> nn.Module:
    """
    Instantiate a model with fan-in scaled initialisation.

    Args:
        kind (str): ``vanilla``, ``oracle`` or ``interpretable``
        config (EncoderConfig): Architecture
        seed (Optional[int]): If given, initialisation uses a private generator seeded with it
    """
    if kind not in MODEL_TYPES:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_TYPES)}")
    if seed is None:
        return MODEL_TYPES[kind](config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MODEL_TYPES[kind](config)


def parameter_checksum(model: nn.Module) -> float:
    return float(sum(p.detach().double().abs().sum() for p in model.parameters()))


def save_checkpoint(
    model: nn.Module,
    path: Union[str, Path],
    kind: str,
    metadata: Optional[Dict[str, object]] = None,
) -> None:
    """
    Save weights, architecture, RNG state and training metadata.

    Args:
        model (nn.Module): Model to store
        path (Union[str, Path]): Destination file
        kind (str): Key of ``MODEL_TYPES`` used to rebuild the model
        metadata (Optional[Dict[str, object]]): Free-form training metadata
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "encoder_config": asdict(model.config),
            "state_dict": model.state_dict(),
            "torch_rng_state": torch.get_rng_state(),
            "numpy_rng_state": np.random.get_state(),
            "metadata": metadata or {},
        },
        path,
    )
    logger.info("Saved %s checkpoint to %s", kind, path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[nn.Module, Dict[str, object]]:
    """
    Rebuild a model from ``save_checkpoint`` output.

    Returns:
        Tuple[nn.Module, Dict[str, object]]: Model in eval mode and the stored payload
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} is not supported")
    config = EncoderConfig(**payload["encoder_config"])
    model = build_model(payload["kind"], config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not fit the model: {exc}") from exc
    model.eval()
    return model, payload


@torch.no_grad()
def predict(model: nn.Module, data_list, batch_size: int = 256) -> ModelOutput:
    """
    Run a model over a list of PyG graphs in eval mode.

    Returns:
        ModelOutput: Concatenated logits, graph embeddings and edge scores
        (None for models without an edge scorer)
    """
    was_training = model.training
    model.eval()
    logits, embeddings, scores = [], [], []
    for batch in DataLoader(list(data_list), batch_size=batch_size, shuffle=False):
        out = model(batch)
        logits.append(out.logits)
        embeddings.append(out.graph_emb)
        if out.edge_scores is not None:
            scores.append(out.edge_scores)
    model.train(was_training)
    if not logits:
        hidden = model.config.hidden_dim
        return ModelOutput(torch.empty(0, model.config.num_classes), torch.empty(0, hidden), None)
    return ModelOutput(torch.cat(logits), torch.cat(embeddings), torch.cat(scores) if scores else None)
