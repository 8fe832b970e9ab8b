import itertools
import os
import sys

import networkx as nx
import numpy as np
import pytest
from scipy import stats

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from gala_lab.graph_synth import (
    BASE_NODES,
    INVARIANT_MOTIFS,
    SPURIOUS_MOTIFS,
    assemble_graph,
    build_splits,
    empirical_joint,
    sample_class_bit,
    validation_strength,
)
from gala_lab.scm_core import BitRecord, EnvParams, ScmError, exact_joint


@pytest.fixture(scope="module")
def small_split():
    return build_splits(0.7, 0.9, per_class=6, seed=3)


class TestMotifs:
    """Test cases for the motif library."""

    def test_six_distinct_motifs(self):
        motifs = INVARIANT_MOTIFS + SPURIOUS_MOTIFS
        assert len(motifs) == 6
        for first, second in itertools.combinations(motifs, 2):
            assert not nx.is_isomorphic(first.to_networkx(), second.to_networkx()), (first.name, second.name)

    def test_motifs_connected(self):
        for motif in INVARIANT_MOTIFS + SPURIOUS_MOTIFS:
            assert nx.is_connected(motif.to_networkx()), motif.name

    def test_edge_counts(self):
        counts = {m.name: len(m.edges) for m in INVARIANT_MOTIFS + SPURIOUS_MOTIFS}
        assert counts == {"house": 6, "cycle": 5, "crane": 6, "grid": 12, "hexagon": 6, "star": 4}


class TestSampleClassBit:
    """Test cases for drawing a motif class."""

    def test_strength_one_returns_label(self):
        rng = np.random.default_rng(0)
        assert all(sample_class_bit(2, 1.0, rng) == 2 for _ in range(50))

    def test_rejects_strength_below_chance(self):
        with pytest.raises(ScmError):
            sample_class_bit(0, 0.2, np.random.default_rng(0))

    def test_empirical_rate(self):
        rng = np.random.default_rng(1)
        draws = [sample_class_bit(1, 0.8, rng) for _ in range(4000)]
        assert np.mean(np.array(draws) == 1) == pytest.approx(0.8, abs=0.03)


class TestAssembleGraph:
    """Test cases for graph assembly."""

    @pytest.fixture
    def graph(self):
        return assemble_graph(BitRecord(0, 1, 2), np.random.default_rng(7))

    def test_connected(self, graph):
        assert nx.is_connected(graph.to_networkx())

    def test_sizes(self, graph):
        assert graph.num_nodes == BASE_NODES + INVARIANT_MOTIFS[1].num_nodes + SPURIOUS_MOTIFS[2].num_nodes
        assert graph.node_features.shape == (graph.num_nodes, 1)
        assert len(graph.inv_edge_mask) == len(graph.edges)

    def test_invariant_mask_marks_motif(self, graph):
        assert sum(graph.inv_edge_mask) == len(INVARIANT_MOTIFS[1].edges)
        assert nx.is_isomorphic(graph.invariant_subgraph(), INVARIANT_MOTIFS[1].to_networkx())

    def test_edges_canonical(self, graph):
        assert all(u < v for u, v in graph.edges)
        assert graph.edges == sorted(graph.edges)
        assert len(set(graph.edges)) == len(graph.edges)

    def test_label_and_bits(self, graph):
        assert graph.label == 0
        assert graph.bits == BitRecord(0, 1, 2)


class TestBuildSplits:
    """Test cases for train/validation/test generation."""

    def test_sizes_and_params(self, small_split):
        assert len(small_split.train) == 18
        assert len(small_split.val) == 6
        assert len(small_split.test) == 6
        assert small_split.params == pytest.approx((0.7, 0.9, 0.7, 1.0 / 3.0))

    def test_labels_balanced(self, small_split):
        labels = [g.label for g in small_split.train]
        assert labels.count(0) == labels.count(1) == labels.count(2) == 6

    def test_deterministic(self, small_split):
        again = build_splits(0.7, 0.9, per_class=6, seed=3)
        assert again.train == small_split.train
        assert again.test == small_split.test

    def test_seed_changes_graphs(self, small_split):
        other = build_splits(0.7, 0.9, per_class=6, seed=4)
        assert other.train != small_split.train

    def test_environment_ids(self, small_split):
        assert {g.env_id for g in small_split.train} == {0}
        assert {g.env_id for g in small_split.val} == {1}
        assert {g.env_id for g in small_split.test} == {2}

    def test_rejects_uninformative_invariant(self):
        with pytest.raises(ScmError):
            build_splits(1.0 / 3.0, 0.9, per_class=2, seed=0)

    def test_validation_strength_floor(self):
        assert validation_strength(0.9) == pytest.approx(0.7)
        assert validation_strength(0.4) == pytest.approx(1.0 / 3.0)

    def test_empirical_strengths(self):
        split = build_splits(0.7, 0.9, per_class=300, seed=11, eval_per_class=1)
        joint = empirical_joint(split.train)
        invariant = sum(joint[y, y, :].sum() for y in range(3))
        spurious = sum(joint[y, :, y].sum() for y in range(3))
        assert invariant == pytest.approx(0.7, abs=0.06)
        assert spurious == pytest.approx(0.9, abs=0.04)

    @pytest.mark.parametrize("a,b,seed", [(0.7, 0.9, 21), (0.8, 0.6, 22)])
    def test_empirical_joint_fits_exact_joint(self, a, b, seed):
        per_class = 1000
        split = build_splits(a, b, per_class=per_class, seed=seed, eval_per_class=1)
        observed = empirical_joint(split.train) * len(split.train)
        # labels are balanced by construction, so every label row holds per_class draws
        expected = exact_joint(EnvParams.from_strengths(a, b, num_classes=3)).probs * 3 * per_class
        assert observed.sum(axis=(1, 2)) == pytest.approx([per_class] * 3)
        # 27 cells, 3 fixed row totals: 24 degrees of freedom
        result = stats.chisquare(observed.reshape(-1), expected.reshape(-1), ddof=2)
        assert result.pvalue > 1e-4
