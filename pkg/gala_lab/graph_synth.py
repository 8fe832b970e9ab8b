import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from gala_lab.scm_core import BitRecord, ScmError

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
BASE_NODES = 12
BASE_ATTACHMENT = 1
FEATURE_DIM = 1

Edge = Tuple[int, int]


@dataclass(frozen=True)
class Motif:
    name: str
    edges: Tuple[Edge, ...]
    num_nodes: int

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.num_nodes))
        graph.add_edges_from(self.edges)
        return graph


def _motif(name: str, graph: nx.Graph) -> Motif:
    graph = nx.convert_node_labels_to_integers(graph)
    edges = tuple(sorted((min(u, v), max(u, v)) for u, v in graph.edges()))
    return Motif(name=name, edges=edges, num_nodes=graph.number_of_nodes())


def _crane() -> nx.Graph:
    # square 1-2-3-4 with an apex joined to two opposite corners
    graph = nx.Graph()
    graph.add_edges_from([(1, 2), (2, 3), (3, 4), (4, 1), (0, 1), (0, 3)])
    return graph


INVARIANT_MOTIFS: Tuple[Motif, ...] = (
    _motif("house", nx.house_graph()),
    _motif("cycle", nx.cycle_graph(5)),
    _motif("crane", _crane()),
)

# spu0 / spu1 / spu2
SPURIOUS_MOTIFS: Tuple[Motif, ...] = (
    _motif("grid", nx.grid_2d_graph(3, 3)),
    _motif("hexagon", nx.cycle_graph(6)),
    _motif("star", nx.star_graph(4)),
)


@dataclass
class SyntheticGraph:
    """
    One two-piece graph.

    ``edges`` are undirected pairs ``(u, v)`` with ``u < v``; ``inv_edge_mask``
    marks the edges inside the invariant motif.
    """

    num_nodes: int
    edges: List[Edge]
    node_features: np.ndarray
    label: int
    inv_edge_mask: List[bool]
    bits: BitRecord
    env_id: int = 0

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.num_nodes))
        graph.add_edges_from(self.edges)
        return graph

    def invariant_subgraph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_edges_from(e for e, keep in zip(self.edges, self.inv_edge_mask) if keep)
        return graph

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and [tuple(e) for e in self.edges] == [tuple(e) for e in other.edges]
            and np.array_equal(self.node_features, other.node_features)
            and self.label == other.label
            and list(self.inv_edge_mask) == list(other.inv_edge_mask)
            and self.bits == other.bits
            and self.env_id == other.env_id
        )


@dataclass
class DatasetSplit:
    train: List[SyntheticGraph]
    val: List[SyntheticGraph]
    test: List[SyntheticGraph]
    # (a_train, b_train, b_val, b_test)
    params: Tuple[float, float, float, float]
    seed: int
    num_classes: int = NUM_CLASSES
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def a(self) -> float:
        return self.params[0]

    @property
    def b(self) -> float:
        return self.params[1]

    def splits(self) -> Dict[str, List[SyntheticGraph]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def sample_class_bit(
    y: int,
    strength: float,
    rng: np.random.Generator,
    num_classes: int = NUM_CLASSES,
) -> int:
    """
    Draw a motif class that equals the label with probability ``strength``.

    Args:
        y (int): Label
        strength (float): P(bit = y), at least 1 / num_classes
        rng (np.random.Generator): Random stream
        num_classes (int): Number of classes

    Returns:
        int: The realized class bit; otherwise uniform over the other classes
    """
    if not (1.0 / num_classes - 1e-12 <= strength <= 1.0):
        raise ScmError(f"strength must lie in [1/{num_classes}, 1], got {strength}")
    if rng.random() < strength:
        return y
    others = [c for c in range(num_classes) if c != y]
    return int(others[rng.integers(len(others))])


def assemble_graph(
    bits: BitRecord,
    rng: np.random.Generator,
    env_id: int = 0,
    base_nodes: int = BASE_NODES,
    attachment: int = BASE_ATTACHMENT,
) -> SyntheticGraph:
    """
    Build a preferential-attachment base graph and bridge both motifs onto it.

    Node ids are shuffled so that motif position carries no signal.

    Args:
        bits (BitRecord): Label and the two motif classes
        rng (np.random.Generator): Random stream for this graph
        env_id (int): Environment (split) identifier stored on the graph
        base_nodes (int): Size of the base graph
        attachment (int): Edges added per new node of the base graph

    Returns:
        SyntheticGraph: Connected graph with the invariant-motif edge mask
    """
    bits.validate(NUM_CLASSES)
    base = nx.barabasi_albert_graph(base_nodes, attachment, seed=int(rng.integers(2**31 - 1)))
    edges: List[Edge] = [(min(u, v), max(u, v)) for u, v in base.edges()]
    mask: List[bool] = [False] * len(edges)
    offset = base_nodes

    for motif, invariant in (
        (INVARIANT_MOTIFS[bits.c_bit], True),
        (SPURIOUS_MOTIFS[bits.s_bit], False),
    ):
        edges.extend((u + offset, v + offset) for u, v in motif.edges)
        mask.extend([invariant] * len(motif.edges))
        anchor = int(rng.integers(base_nodes))
        entry = offset + int(rng.integers(motif.num_nodes))
        edges.append((anchor, entry))
        mask.append(False)
        offset += motif.num_nodes

    num_nodes = offset
    permutation = rng.permutation(num_nodes)
    relabeled = [
        (min(permutation[u], permutation[v]), max(permutation[u], permutation[v]))
        for u, v in edges
    ]
    order = sorted(range(len(relabeled)), key=relabeled.__getitem__)

    return SyntheticGraph(
        num_nodes=num_nodes,
        edges=[(int(relabeled[i][0]), int(relabeled[i][1])) for i in order],
        node_features=np.ones((num_nodes, FEATURE_DIM), dtype=np.float32),
        label=bits.y,
        inv_edge_mask=[mask[i] for i in order],
        bits=bits,
        env_id=env_id,
    )


def _generate(
    a: float,
    b: float,
    per_class: int,
    seed_seq: np.random.SeedSequence,
    env_id: int,
) -> List[SyntheticGraph]:
    graphs = []
    streams = seed_seq.spawn(per_class * NUM_CLASSES)
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        y = i // per_class
        bits = BitRecord(y, sample_class_bit(y, a, rng), sample_class_bit(y, b, rng))
        graphs.append(assemble_graph(bits, rng, env_id=env_id))
    return graphs


def validation_strength(b: float, num_classes: int = NUM_CLASSES) -> float:
    return max(1.0 / num_classes, b - 0.2)


def build_splits(
    a: float,
    b: float,
    per_class: int,
    seed: int,
    eval_per_class: Optional[int] = None,
) -> DatasetSplit:
    """
    Generate train/validation/test splits of the three-class two-piece dataset.

    Validation weakens the spurious correlation to max(1/3, b - 0.2) and the
    test split removes it.

    Args:
        a (float): Invariant strength, > 1/3
        b (float): Training spurious strength
        per_class (int): Training graphs per class
        seed (int): Master seed; every graph gets its own derived stream
        eval_per_class (Optional[int]): Validation/test graphs per class,
            per_class / 3 rounded by default

    Returns:
        DatasetSplit: The three splits with their strength parameters
    """
    floor = 1.0 / NUM_CLASSES
    if a <= floor + 1e-12:
        raise ScmError(f"invariant strength must exceed 1/3 to be informative, got {a}")
    if not (floor - 1e-12 <= b <= 1.0) or a > 1.0:
        raise ScmError(f"strengths must lie in [1/3, 1], got a={a}, b={b}")
    if per_class < 1:
        raise ScmError(f"per_class must be at least 1, got {per_class}")
    if eval_per_class is None:
        eval_per_class = max(1, int(round(per_class / 3)))

    b_val = validation_strength(b)
    b_test = floor
    train_seq, val_seq, test_seq = np.random.SeedSequence(seed).spawn(3)
    logger.info(
        "Generating two-piece splits a=%.3f b=%.3f (val b=%.3f) with %d/%d graphs per class",
        a, b, b_val, per_class, eval_per_class,
    )
    return DatasetSplit(
        train=_generate(a, b, per_class, train_seq, env_id=0),
        val=_generate(a, b_val, eval_per_class, val_seq, env_id=1),
        test=_generate(a, b_test, eval_per_class, test_seq, env_id=2),
        params=(float(a), float(b), float(b_val), float(b_test)),
        seed=int(seed),
    )


def empirical_joint(graphs: Sequence[SyntheticGraph], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Empirical frequencies of (y, c_bit, s_bit) as a (K, K, K) array."""
    counts = np.zeros((num_classes,) * 3)
    for graph in graphs:
        counts[graph.bits.y, graph.bits.c_bit, graph.bits.s_bit] += 1
    return counts / max(len(graphs), 1)
