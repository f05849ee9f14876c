"""Four-way branching scenario tree for a rotated two-dimensional random walk.

Level ``i`` holds ``4**i`` nodes ordered lexicographically by sign path, with
the per-step child order (++, +-, -+, --): the first sign drives the first
rotated component, the second sign the second. Node ``n`` at level ``i`` has
children ``4n .. 4n+3`` at level ``i+1``, so every subtree is a contiguous
block of the next levels.

The tree is built on the rotated walk directly; original-frame increments
are derived through the rotation (row convention ``dW = dW_rot @ U``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GuardError, ValidationError

MAX_STEPS = 10
ORTHOGONALITY_TOL = 1e-10

# (first rotated sign, second rotated sign) for child slots 0..3.
CHILD_SIGNS = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.int8)


class Filtration(enum.Enum):
    """Observer information: everything, the first rotated component, or nothing."""

    FULL = "full"
    PARTIAL = "partial"
    TRIVIAL = "trivial"

    @classmethod
    def parse(cls, text: str) -> "Filtration":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValidationError(f"unknown filtration {text!r}; expected full, partial or trivial") from None


def rotation_from_angle(angle: float) -> np.ndarray:
    """Rotation matrix ``[[cos, sin], [-sin, cos]]`` for an angle in radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


def level_of(size: int) -> int:
    """Level whose node count is ``size``; raises if ``size`` is not a power of 4."""
    level = 0
    while 4**level < size:
        level += 1
    if 4**level != size:
        raise ValidationError(f"{size} values do not match any tree level (need a power of 4)")
    return level


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    num_steps: int
    horizon: float
    rotation: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def levels(self) -> range:
        return range(self.num_steps + 1)

    def time(self, level: int) -> float:
        return level * self.dt

    def num_nodes(self, level: int) -> int:
        return 4**level

    def base_weights(self, level: int) -> np.ndarray:
        return np.full(4**level, 0.25**level)

    def _cached(self, key, build):
        if key not in self._cache:
            value = build()
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            self._cache[key] = value
        return self._cache[key]

    def signs(self, level: int) -> np.ndarray:
        """Sign paths, shape ``(4**level, level, 2)``."""

        def build():
            nodes = np.arange(4**level)
            shifts = 2 * np.arange(level - 1, -1, -1)
            digits = (nodes[:, None] >> shifts[None, :]) & 3
            return CHILD_SIGNS[digits]

        return self._cached(("signs", level), build)

    def last_signs(self, level: int) -> np.ndarray:
        """Signs of the step that led into each level-``level`` node, shape ``(4**level, 2)``."""
        if level < 1:
            raise ValidationError("the root has no incoming step")
        return CHILD_SIGNS[np.arange(4**level) & 3]

    def rotated_increments(self, level: int) -> np.ndarray:
        return self.signs(level) * self.sqrt_dt

    def increments(self, level: int) -> np.ndarray:
        """Original-frame increments along each path, shape ``(4**level, level, 2)``."""
        return self.rotated_increments(level) @ self.rotation

    def rotated_path(self, level: int) -> np.ndarray:
        """Rotated walk ``W~`` at times ``0..level`` along each path."""

        def build():
            path = np.zeros((4**level, level + 1, 2))
            np.cumsum(self.rotated_increments(level), axis=1, out=path[:, 1:])
            return path

        return self._cached(("rotated_path", level), build)

    def path(self, level: int) -> np.ndarray:
        """Original-frame walk ``W`` at times ``0..level`` along each path."""
        return self._cached(("path", level), lambda: self.rotated_path(level) @ self.rotation)

    def ancestors(self, level: int, ancestor_level: int) -> np.ndarray:
        """Index of each level-``level`` node's ancestor at ``ancestor_level``."""
        if ancestor_level > level:
            raise ValidationError("ancestor level must not exceed the node level")
        return np.arange(4**level) >> (2 * (level - ancestor_level))

    def lift(self, values: np.ndarray, to_level: int) -> np.ndarray:
        """Copy per-node values down to every descendant at ``to_level``."""
        values = np.asarray(values)
        return values[self.ancestors(to_level, level_of(values.shape[0]))]

    def atoms(self, filtration: Filtration, level: int) -> np.ndarray:
        """Atom id of each node at ``level`` (atoms are numbered lexicographically)."""

        def build():
            nodes = np.arange(4**level)
            if filtration is Filtration.FULL:
                return nodes
            if filtration is Filtration.TRIVIAL:
                return np.zeros_like(nodes)
            first_bits = (self.signs(level)[:, :, 0] < 0).astype(np.int64)
            weights = 1 << np.arange(level - 1, -1, -1)
            return first_bits @ weights if level else np.zeros_like(nodes)

        return self._cached(("atoms", filtration, level), build)

    def num_atoms(self, filtration: Filtration, level: int) -> int:
        return {Filtration.FULL: 4**level, Filtration.PARTIAL: 2**level, Filtration.TRIVIAL: 1}[filtration]

    def atom_members(self, filtration: Filtration, level: int) -> np.ndarray:
        """Node indices grouped by atom, shape ``(num_atoms, atom_size)``."""

        def build():
            order = np.argsort(self.atoms(filtration, level), kind="stable")
            return order.reshape(self.num_atoms(filtration, level), -1)

        return self._cached(("members", filtration, level), build)

    def child_atoms(self, filtration: Filtration, level: int) -> np.ndarray:
        """For each atom at ``level``, the ids of the atoms at ``level + 1`` it splits into."""
        children = 4 * self.atom_members(filtration, level)[:, :1] + np.arange(4)
        atoms = self.atoms(filtration, level + 1)[children]
        return np.array([np.unique(row) for row in atoms])


def build_tree(num_steps: int, horizon: float = 1.0, rotation=None) -> ScenarioTree:
    """Build the scenario tree with ``num_steps`` steps over ``[0, horizon]``."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValidationError("num_steps must be >= 1", code="VALIDATION_TREE")
    if num_steps > MAX_STEPS:
        raise GuardError(f"num_steps {num_steps} exceeds the cap of {MAX_STEPS}", code="GUARD_TREE_SIZE")
    if not horizon > 0:
        raise ValidationError("horizon must be positive", code="VALIDATION_TREE")
    rotation = np.eye(2) if rotation is None else np.array(rotation, dtype=float)
    if rotation.shape != (2, 2):
        raise ValidationError("rotation must be a 2x2 matrix", code="VALIDATION_TREE")
    defect = float(np.max(np.abs(rotation @ rotation.T - np.eye(2))))
    if defect > ORTHOGONALITY_TOL:
        raise ValidationError(f"rotation is not orthogonal: Gram defect {defect:.3e}", code="VALIDATION_TREE")
    rotation.setflags(write=False)
    return ScenarioTree(int(num_steps), float(horizon), rotation)


@dataclass(frozen=True)
class AdaptedProcess:
    """Per-level node values; ``values[k]`` belongs to level ``start + k``."""

    values: tuple
    measurability: Filtration = Filtration.FULL
    start: int = 0

    def __getitem__(self, level: int) -> np.ndarray:
        if level < self.start:
            raise IndexError(f"process starts at level {self.start}")
        return self.values[level - self.start]

    def __len__(self) -> int:
        return len(self.values)

    def measurability_defect(self, tree: ScenarioTree) -> float:
        """Largest spread of values inside a single atom of the declared filtration."""
        worst = 0.0
        for k, vals in enumerate(self.values):
            groups = np.asarray(vals)[tree.atom_members(self.measurability, self.start + k)]
            if groups.size:
                worst = max(worst, float(np.max(groups.max(axis=1) - groups.min(axis=1))))
        return worst


def atom_means(tree: ScenarioTree, values, filtration: Filtration, level: int, weights=None) -> np.ndarray:
    """Conditional expectation of level-``j`` values given the atoms at ``level``, one entry per atom.

    ``weights`` are unnormalised path probabilities at level ``j``; base weights
    are used when omitted. Reductions run in a fixed order so results do not
    depend on threading.
    """
    values = np.asarray(values, dtype=float)
    source = level_of(values.shape[0])
    if level > source:
        raise ValidationError(f"cannot condition level-{source} values on the later level {level}")
    trailing = values.shape[1:]
    block = 4 ** (source - level)
    members = tree.atom_members(filtration, level)
    if weights is None:
        reduced = values.reshape(4**level, block, *trailing).sum(axis=1)
        grouped = reduced[members].sum(axis=1)
        return grouped / (block * members.shape[1])
    weights = np.asarray(weights, dtype=float)
    weighted = (values.reshape(values.shape[0], -1) * weights[:, None]).reshape(values.shape)
    numerator = weighted.reshape(4**level, block, *trailing).sum(axis=1)[members].sum(axis=1)
    mass = weights.reshape(4**level, block).sum(axis=1)[members].sum(axis=1)
    return numerator / mass.reshape(-1, *([1] * len(trailing)))


def cond_expect(tree: ScenarioTree, values, filtration: Filtration, level: int, weights=None) -> np.ndarray:
    """Conditional expectation given G at ``level``, returned per level-``level`` node."""
    return atom_means(tree, values, filtration, level, weights)[tree.atoms(filtration, level)]


def martingale_coefficients(tree: ScenarioTree, children):
    """Expand child values over the orthogonal basis ``{1, e1, e2, e1 e2}``.

    ``children[..., k]`` is the value in child slot ``k``. Returns
    ``(mean, z, residual)`` with ``z`` in the rotated frame, such that
    ``child = mean + z1 e1 sqrt(dt) + z2 e2 sqrt(dt) + residual e1 e2 dt``.
    """
    x = np.asarray(children, dtype=float)
    if x.shape[-1] != 4:
        raise ValidationError("expected exactly four child values")
    pp, pm, mp, mm = (x[..., k] for k in range(4))
    mean = ((pp + pm) + (mp + mm)) / 4
    z1 = ((pp + pm) - (mp + mm)) / (4 * tree.sqrt_dt)
    z2 = ((pp - pm) + (mp - mm)) / (4 * tree.sqrt_dt)
    residual = ((pp - pm) - (mp - mm)) / (4 * tree.dt)
    return mean, np.stack([z1, z2], axis=-1), residual


def level_coefficients(tree: ScenarioTree, next_values):
    """``martingale_coefficients`` for every node of the level below ``next_values``."""
    next_values = np.asarray(next_values, dtype=float)
    return martingale_coefficients(tree, next_values.reshape(-1, 4))


def branch_probabilities(tree: ScenarioTree, theta, level: int) -> np.ndarray:
    """Child probabilities under a rotated-frame drift ``theta``, shape ``(4**level, 4)``."""
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (4**level, 2))
    scaled = np.abs(theta) * tree.sqrt_dt
    if np.any(scaled >= 1.0):
        node, comp = np.unravel_index(int(np.argmax(scaled)), scaled.shape)
        raise GuardError(
            f"tilt magnitude {scaled[node, comp]:.6g} >= 1 at level {level}, node {node}, component {comp + 1}; "
            "the time step is too coarse for this drift",
            code="GUARD_TILT",
        )
    first = 1.0 + np.outer(theta[:, 0], CHILD_SIGNS[:, 0]) * tree.sqrt_dt
    second = 1.0 + np.outer(theta[:, 1], CHILD_SIGNS[:, 1]) * tree.sqrt_dt
    return first * second / 4.0


@dataclass(frozen=True)
class MeasureWeights:
    """Path probabilities of an equivalent measure, one array per level."""

    levels: tuple

    @property
    def weight(self) -> np.ndarray:
        return self.levels[-1]


def path_weights(tree: ScenarioTree, branch_probs: Sequence[np.ndarray]) -> tuple:
    """Multiply per-step child probabilities into path probabilities for every level."""
    levels = [np.ones(1)]
    for probs in branch_probs:
        levels.append((levels[-1][:, None] * probs).reshape(-1))
    return tuple(levels)


def tilt_measure(tree: ScenarioTree, theta: Sequence) -> MeasureWeights:
    """Reweight branches so the rotated increments acquire drift ``theta``.

    ``theta[i]`` has shape ``(4**i, 2)`` (or broadcasts to it) for ``i < N``.
    """
    if len(theta) != tree.num_steps:
        raise ValidationError(f"need one drift per step ({tree.num_steps}), got {len(theta)}")
    probs = [branch_probabilities(tree, theta[i], i) for i in range(tree.num_steps)]
    return MeasureWeights(path_weights(tree, probs))
