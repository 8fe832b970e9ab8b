import json
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from gala_lab.scm_core import (
    BitKind,
    EnvironmentSet,
    EnvParams,
    exact_joint,
    marginal_strengths,
    mix_environments,
    mix_tables,
)
from gala_lab.theory_oracle import (
    CIGA,
    GALA,
    OracleError,
    PartitionRule,
    SamplingScheme,
    SchemeKind,
    SelectorChoice,
    Verdict,
    construct_twin,
    cross_partition_value,
    default_grid,
    faithful_augmentation,
    identifiability_scan,
    partition_profile,
    population_contrastive,
    recombine,
    run_verification,
    swap_augmentation,
    write_records,
)


@pytest.fixture
def shifted_set():
    return EnvironmentSet((EnvParams(0.2, 0.1), EnvParams(0.2, 0.3)))


class TestAugmentation:
    """Test cases for the augmentation operators."""

    def test_swap_augmentation_destroys_invariant_bit(self):
        mixed = mix_environments(EnvironmentSet((EnvParams(0.25, 0.1), EnvParams(0.25, 0.2))))
        augmented = swap_augmentation(mixed)
        assert augmented.alpha == pytest.approx(0.5, abs=1e-12)
        assert augmented.beta == pytest.approx(0.15, abs=1e-12)

    def test_swap_augmentation_from_mixed_params(self):
        augmented = swap_augmentation(EnvParams(0.25, 0.15))
        assert (augmented.alpha, augmented.beta) == (pytest.approx(0.5), pytest.approx(0.15))

    def test_faithful_augmentation_keeps_alpha(self):
        augmented = faithful_augmentation(EnvParams(0.25, 0.15))
        assert augmented.alpha == pytest.approx(0.25)
        assert augmented.beta == pytest.approx(0.5)

    @pytest.mark.parametrize("k", [2, 3])
    def test_recombine_marginals(self, k):
        table = exact_joint(EnvParams(0.2, 0.3, k))
        augmented = recombine(table, BitKind.SPURIOUS)
        invariant, spurious = marginal_strengths(augmented)
        assert invariant == pytest.approx(1.0 / k, abs=1e-12)
        assert spurious == pytest.approx(marginal_strengths(table)[1], abs=1e-12)


class TestConstructTwin:
    """Test cases for the indistinguishable twin."""

    def test_twin_parameters(self, shifted_set):
        twin = construct_twin(shifted_set)
        np.testing.assert_allclose([[e.alpha, e.beta] for e in twin.envs], [[0.1, 0.2], [0.3, 0.2]], atol=1e-12)

    def test_twin_has_same_mixture(self, shifted_set):
        twin = construct_twin(shifted_set)
        assert mix_tables(twin).allclose(mix_tables(shifted_set))
        assert mix_tables(twin).allclose(exact_joint(EnvParams(0.2, 0.2)))

    def test_twin_mixes_after_swapping_roles(self, shifted_set):
        mixed = mix_environments(construct_twin(shifted_set).swapped()).swapped()
        assert mixed.alpha == pytest.approx(0.2)
        assert mixed.beta == pytest.approx(0.2)

    def test_second_example(self):
        twin = construct_twin(EnvironmentSet((EnvParams(0.25, 0.1), EnvParams(0.25, 0.2))))
        np.testing.assert_allclose([[e.alpha, e.beta] for e in twin.envs], [[0.2, 0.15], [0.3, 0.15]], atol=1e-12)

    def test_equal_betas_rejected(self):
        with pytest.raises(OracleError):
            construct_twin(EnvironmentSet((EnvParams(0.2, 0.1), EnvParams(0.2, 0.1))))

    def test_three_environments_rejected(self):
        envs = (EnvParams(0.2, 0.1), EnvParams(0.2, 0.2), EnvParams(0.2, 0.3))
        with pytest.raises(OracleError):
            construct_twin(EnvironmentSet(envs))


class TestPopulationContrastive:
    """Test cases for the exact contrastive objective."""

    def test_ciga_prefers_stronger_spurious_bit(self):
        env_set = EnvironmentSet((EnvParams.from_strengths(0.7, 0.9),))
        invariant = population_contrastive(env_set, SelectorChoice.INVARIANT, CIGA)
        spurious = population_contrastive(env_set, SelectorChoice.SPURIOUS, CIGA)
        assert spurious > invariant

    def test_gala_prefers_invariant_bit(self):
        env_set = EnvironmentSet((EnvParams.from_strengths(0.7, 0.9),))
        invariant = population_contrastive(env_set, SelectorChoice.INVARIANT, GALA)
        spurious = population_contrastive(env_set, SelectorChoice.SPURIOUS, GALA)
        assert invariant > spurious

    def test_empty_cell_raises(self):
        env_set = EnvironmentSet((EnvParams.from_strengths(0.7, 1.0),))
        with pytest.raises(OracleError):
            population_contrastive(env_set, SelectorChoice.INVARIANT, GALA)

    def test_indifferent_rule_ties_on_diagonal(self):
        env_set = EnvironmentSet((EnvParams.from_strengths(0.8, 0.8),))
        scheme = SamplingScheme(SchemeKind.GALA_CROSS_PARTITION, PartitionRule.ASSISTANT_INDIFFERENT)
        invariant = population_contrastive(env_set, SelectorChoice.INVARIANT, scheme)
        spurious = population_contrastive(env_set, SelectorChoice.SPURIOUS, scheme)
        assert invariant == pytest.approx(spurious, abs=1e-9)

    def test_spurious_rule_not_neutral_on_diagonal(self):
        env_set = EnvironmentSet((EnvParams.from_strengths(0.8, 0.8),))
        invariant = population_contrastive(env_set, SelectorChoice.INVARIANT, GALA)
        spurious = population_contrastive(env_set, SelectorChoice.SPURIOUS, GALA)
        # positives never share the spurious bit and matched negatives always do
        assert spurious == pytest.approx(-1.0, abs=1e-12)
        assert invariant > spurious + 1e-6


class TestCrossPartitionSymmetry:
    """Test cases for swapping the two partition cells."""

    @staticmethod
    def _outcomes(a, b, selector):
        table = exact_joint(EnvParams.from_strengths(a, b, num_classes=3))
        y, c, s = np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij")
        codes = (c if selector == "invariant" else s).reshape(-1)
        similarity = (codes[:, None] == codes[None, :]).astype(float)
        return table.probs.reshape(-1), y.reshape(-1), s.reshape(-1), similarity

    @pytest.mark.parametrize("selector", ["invariant", "spurious"])
    @pytest.mark.parametrize("a,b", [(0.7, 0.9), (0.8, 0.6), (0.5, 0.5)])
    def test_swapping_cells(self, a, b, selector):
        weights, labels, predictions, similarity = self._outcomes(a, b, selector)
        correct = predictions == labels
        for matched in (predictions, None):
            forward = cross_partition_value(weights, labels, similarity, correct, matched)
            backward = cross_partition_value(weights, labels, similarity, ~correct, matched)
            assert forward == pytest.approx(backward, abs=1e-12)

    def test_matches_population_objective(self):
        weights, labels, predictions, similarity = self._outcomes(0.7, 0.9, "invariant")
        env_set = EnvironmentSet((EnvParams.from_strengths(0.7, 0.9),))
        expected = population_contrastive(env_set, SelectorChoice.INVARIANT, GALA)
        value = cross_partition_value(weights, labels, similarity, predictions == labels, predictions)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_empty_cell_raises(self):
        weights, labels, _, similarity = self._outcomes(0.7, 0.9, "invariant")
        with pytest.raises(OracleError):
            cross_partition_value(weights, labels, similarity, np.ones(len(weights), dtype=bool))


class TestPartitionProfile:
    """Test cases for per-cell agreement under an assistant rule."""

    def test_spurious_rule_separates_spurious_bit(self):
        table = exact_joint(EnvParams.from_strengths(0.7, 0.9, num_classes=3))
        profile = partition_profile(table, PartitionRule.ASSISTANT_SPURIOUS_BIT)
        assert profile["positive"]["s_match"] == pytest.approx(1.0)
        assert profile["negative"]["s_match"] == pytest.approx(0.0)
        assert profile["positive"]["c_match"] == pytest.approx(0.7)
        assert profile["negative"]["c_match"] == pytest.approx(0.7)
        assert profile["negative"]["mass"] == pytest.approx(0.1)

    @pytest.mark.parametrize("num_classes,a,b", [(3, 0.7, 0.9), (3, 0.8, 0.6), (2, 0.75, 0.85)])
    def test_conditional_invariant_distribution_matches(self, num_classes, a, b):
        table = exact_joint(EnvParams.from_strengths(a, b, num_classes=num_classes))
        profile = partition_profile(table, PartitionRule.ASSISTANT_SPURIOUS_BIT)
        positive, negative = profile["positive"]["c_given_y"], profile["negative"]["c_given_y"]
        assert positive.shape == (num_classes, num_classes)
        np.testing.assert_allclose(positive, negative, rtol=0, atol=1e-12)
        assert abs(profile["positive"]["s_match"] - 1.0) <= 1e-12
        assert abs(profile["negative"]["s_match"]) <= 1e-12

    def test_empty_cell_reports_zero_mass(self):
        table = exact_joint(EnvParams.from_strengths(0.7, 1.0, num_classes=3))
        profile = partition_profile(table, PartitionRule.ASSISTANT_SPURIOUS_BIT)
        assert profile["negative"]["mass"] == 0.0
        assert np.isnan(profile["negative"]["c_match"])


class TestIdentifiabilityScan:
    """Test cases for the strength-grid scan."""

    def test_default_grid(self):
        grid = default_grid()
        assert len(grid) == 81
        assert grid[0] == pytest.approx((0.4, 0.4))
        assert grid[-1] == pytest.approx((0.95, 0.95))

    def test_winners(self):
        report = identifiability_scan([(0.7, 0.9), (0.9, 0.7), (0.8, 0.8)])
        assert report.passed, report.violations
        assert report.winner(0.7, 0.9, SchemeKind.GALA_CROSS_PARTITION) == Verdict.INVARIANT.value
        assert report.winner(0.7, 0.9, SchemeKind.CIGA_INTRACLASS) == Verdict.SPURIOUS.value
        assert report.winner(0.9, 0.7, SchemeKind.CIGA_INTRACLASS) == Verdict.INVARIANT.value
        assert report.winner(0.8, 0.8, SchemeKind.GALA_CROSS_PARTITION) == Verdict.TIE.value
        assert report.winner(0.8, 0.8, SchemeKind.CIGA_INTRACLASS) == Verdict.TIE.value

    def test_full_grid_passes(self):
        assert identifiability_scan(default_grid()).passed

    def test_strength_one_is_undefined(self):
        report = identifiability_scan([(0.7, 1.0)])
        assert report.winner(0.7, 1.0, SchemeKind.GALA_CROSS_PARTITION) == Verdict.UNDEFINED.value

    def test_uninformative_point_rejected(self):
        with pytest.raises(OracleError):
            identifiability_scan([(0.3, 0.9)])


class TestRunVerification:
    """Test cases for the verification report."""

    def test_all_checks_pass(self):
        records = run_verification(grid_size=5)
        assert [r.name for r in records] == [
            "environment_generation_failure",
            "swap_augmentation_destroys_invariance",
            "twin_indistinguishability",
            "identifiability_scan",
        ]
        assert all(r.passed for r in records), [r.detail for r in records if not r.passed]

    def test_write_records(self, tmp_path):
        path = tmp_path / "checks.jsonl"
        write_records(run_verification(grid_size=3), path)
        lines = path.read_text(encoding="utf-8").strip().split("\n")
        assert len(lines) == 4
        assert json.loads(lines[0])["name"] == "environment_generation_failure"
