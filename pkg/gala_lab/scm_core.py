import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TOLERANCE = 1e-12


class ScmError(ValueError):
    """Raised for invalid two-piece SCM parameters or environment sets."""


class BitKind(str, Enum):
    INVARIANT = "invariant"
    SPURIOUS = "spurious"


def uniform_parameter(num_classes: int) -> float:
    """
    Corruption parameter at which a bit carries no information about the label.

    Binary bits flip with probability alpha, so 0.5 destroys the correlation;
    three-class bits are redrawn uniformly with probability alpha, so 1.0 does.
    """
    return 0.5 if num_classes == 2 else 1.0


def strength_to_parameter(strength: float, num_classes: int) -> float:
    """
    Invert a co-occurrence strength P(bit = Y) into a corruption parameter.

    Args:
        strength (float): Probability that the bit equals the label
        num_classes (int): 2 or 3

    Returns:
        float: alpha (or beta) producing that strength
    """
    if num_classes == 2:
        return 1.0 - strength
    return (1.0 - strength) * num_classes / (num_classes - 1)


@dataclass(frozen=True)
class EnvParams:
    """(alpha, beta) corruption parameters of one two-piece environment."""

    alpha: float
    beta: float
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes not in (2, 3):
            raise ScmError(f"num_classes must be 2 or 3, got {self.num_classes}")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not (-TOLERANCE <= value <= 1.0 + TOLERANCE) or math.isnan(value):
                raise ScmError(f"{name} must lie in [0, 1], got {value}")
            # snap values pushed outside [0, 1] by float round-off
            object.__setattr__(self, name, float(min(1.0, max(0.0, value))))

    @classmethod
    def from_strengths(cls, a: float, b: float, num_classes: int = 3) -> "EnvParams":
        """Build parameters from co-occurrence strengths (a, b) as used in the dataset names."""
        return cls(
            strength_to_parameter(a, num_classes),
            strength_to_parameter(b, num_classes),
            num_classes,
        )

    def strengths(self) -> Tuple[float, float]:
        return (
            bit_corruption_prob(self, BitKind.INVARIANT),
            bit_corruption_prob(self, BitKind.SPURIOUS),
        )

    def swapped(self) -> "EnvParams":
        return EnvParams(self.beta, self.alpha, self.num_classes)


@dataclass(frozen=True)
class EnvironmentSet:
    """Training environments with their mixture proportions (uniform by default)."""

    envs: Tuple[EnvParams, ...]
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        envs = tuple(self.envs)
        if not envs:
            raise ScmError("an environment set needs at least one environment")
        if len({env.num_classes for env in envs}) != 1:
            raise ScmError("all environments must share num_classes")
        if self.weights is None:
            weights = tuple(1.0 / len(envs) for _ in envs)
        else:
            weights = tuple(float(w) for w in self.weights)
        if len(weights) != len(envs):
            raise ScmError("one weight per environment is required")
        if any(w < 0 for w in weights):
            raise ScmError("mixture weights must be nonnegative")
        if abs(sum(weights) - 1.0) > TOLERANCE:
            raise ScmError(f"mixture weights must sum to 1, got {sum(weights)!r}")
        object.__setattr__(self, "envs", envs)
        object.__setattr__(self, "weights", weights)

    @property
    def num_classes(self) -> int:
        return self.envs[0].num_classes

    def swapped(self) -> "EnvironmentSet":
        return EnvironmentSet(tuple(env.swapped() for env in self.envs), self.weights)

    def __iter__(self) -> Iterator[Tuple[EnvParams, float]]:
        return iter(zip(self.envs, self.weights))

    def __len__(self) -> int:
        return len(self.envs)


@dataclass(frozen=True)
class BitRecord:
    """Realized label, invariant bit and spurious bit of one graph."""

    y: int
    c_bit: int
    s_bit: int

    def validate(self, num_classes: int) -> None:
        for name, value in (("y", self.y), ("c_bit", self.c_bit), ("s_bit", self.s_bit)):
            if not 0 <= value < num_classes:
                raise ScmError(f"{name}={value} outside [0, {num_classes})")


@dataclass(frozen=True)
class JointTable:
    """
    Exact distribution over (y, c_bit, s_bit).

    ``probs[y, c, s]`` holds the probability of each outcome; the array has
    shape ``(K, K, K)`` for ``K = num_classes``.
    """

    num_classes: int
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        k = self.num_classes
        if probs.shape != (k, k, k):
            raise ScmError(f"probability array must have shape {(k, k, k)}, got {probs.shape}")
        if (probs < -TOLERANCE).any():
            raise ScmError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > TOLERANCE:
            raise ScmError(f"total mass must be 1, got {probs.sum()!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, outcome: Tuple[int, int, int]) -> float:
        return float(self.probs[outcome])

    def as_dict(self) -> Dict[Tuple[int, int, int], float]:
        k = self.num_classes
        return {
            (y, c, s): float(self.probs[y, c, s])
            for y in range(k)
            for c in range(k)
            for s in range(k)
        }

    def label_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=(1, 2))

    def bit_given_label(self, which: BitKind) -> np.ndarray:
        """Matrix ``P(bit | y)`` with rows indexed by y."""
        axis = 2 if which == BitKind.INVARIANT else 1
        joint = self.probs.sum(axis=axis)
        marginal = joint.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(marginal > 0, joint / marginal, 0.0)

    def swapped(self) -> "JointTable":
        """Exchange the roles of the invariant and spurious bits."""
        return JointTable(self.num_classes, np.transpose(self.probs, (0, 2, 1)).copy())

    def allclose(self, other: "JointTable", tol: float = TOLERANCE) -> bool:
        return self.num_classes == other.num_classes and bool(
            np.max(np.abs(self.probs - other.probs)) <= tol
        )


def bit_corruption_prob(env: EnvParams, which: BitKind) -> float:
    """
    Probability that the realized bit equals the label.

    Args:
        env (EnvParams): Environment parameters
        which (BitKind): Invariant (alpha) or spurious (beta) bit

    Returns:
        float: P(bit = Y)
    """
    param = env.alpha if BitKind(which) == BitKind.INVARIANT else env.beta
    if env.num_classes == 2:
        return 1.0 - param
    # the uniform redraw lands back on Y one time in num_classes
    return 1.0 - param + param / env.num_classes


def _bit_distribution(y: int, p_match: float, num_classes: int) -> np.ndarray:
    dist = np.full(num_classes, (1.0 - p_match) / (num_classes - 1))
    dist[y] = p_match
    return dist


def exact_joint(env: EnvParams) -> JointTable:
    """
    Exact joint table of one environment; c and s are independent given y.

    Args:
        env (EnvParams): Environment parameters

    Returns:
        JointTable: P(y, c_bit, s_bit) with a uniform label marginal
    """
    k = env.num_classes
    p_c = bit_corruption_prob(env, BitKind.INVARIANT)
    p_s = bit_corruption_prob(env, BitKind.SPURIOUS)
    probs = np.zeros((k, k, k))
    for y in range(k):
        probs[y] = np.outer(_bit_distribution(y, p_c, k), _bit_distribution(y, p_s, k)) / k
    return JointTable(k, probs)


def mix_environments(env_set: EnvironmentSet) -> EnvParams:
    """
    Collapse training environments into the mixed environment.

    The invariant parameter must agree across environments; the spurious
    parameters are averaged with the mixture weights.

    Args:
        env_set (EnvironmentSet): Environments and weights

    Returns:
        EnvParams: (alpha, sum_i w_i * beta_i)
    """
    alphas = [env.alpha for env in env_set.envs]
    if max(alphas) - min(alphas) > TOLERANCE:
        logger.error("Cannot mix environments with different alphas: %s", alphas)
        raise ScmError(
            f"environments disagree on the invariant parameter: {alphas}; "
            "P(Y|G_c) must be shared across training environments"
        )
    beta = sum(w * env.beta for env, w in env_set)
    return EnvParams(alphas[0], beta, env_set.num_classes)


def mix_tables(env_set: EnvironmentSet) -> JointTable:
    """Weighted mixture of the per-environment joint tables."""
    probs = sum(w * exact_joint(env).probs for env, w in env_set)
    return JointTable(env_set.num_classes, probs)


def marginal_strengths(table: JointTable) -> Tuple[float, float]:
    """
    Invariant and spurious correlation strengths of a table.

    Returns:
        Tuple[float, float]: (P(c_bit = Y), P(s_bit = Y))
    """
    k = table.num_classes
    invariant = sum(table.probs[y, y, :].sum() for y in range(k))
    spurious = sum(table.probs[y, :, y].sum() for y in range(k))
    return float(invariant), float(spurious)


def conditional_entropy(table: JointTable, which: BitKind) -> float:
    """H(bit | Y) in nats."""
    conditional = table.bit_given_label(which)
    label = table.label_marginal()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(conditional > 0, -conditional * np.log(conditional), 0.0)
    return float((label * terms.sum(axis=1)).sum())


def dominant_bit(table: JointTable, tol: float = TOLERANCE) -> Optional[BitKind]:
    """The bit with lower conditional entropy given Y, or None when they tie."""
    h_c = conditional_entropy(table, BitKind.INVARIANT)
    h_s = conditional_entropy(table, BitKind.SPURIOUS)
    if abs(h_c - h_s) <= tol:
        return None
    return BitKind.INVARIANT if h_c < h_s else BitKind.SPURIOUS


def variation_consistent(env_set: EnvironmentSet) -> bool:
    """
    Check that every environment orders H(C|Y) and H(S|Y) the same way.

    Environments where the two entropies tie make the set inconsistent,
    since the twin of such a set cannot be told apart from it.
    """
    dominants = {dominant_bit(exact_joint(env)) for env in env_set.envs}
    return None not in dominants and len(dominants) == 1
