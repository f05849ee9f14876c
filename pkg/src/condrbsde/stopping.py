"""Optimal stopping with partial information.

A G-stopping time is a stop/continue label per (level, G-atom); once an atom
stops, every later atom inside it is ignored. The conditional Snell value is
``E[Y_t | G_t]`` of the reflected solution, and the optimal time stops the
first time the conditional gap closes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .crbsde import (
    Scheme,
    SolutionTriple,
    implicit_step,
    problem_generator,
    problem_weights,
    solve_backward,
)
from .errors import GuardError, ValidationError
from .lattice import AdaptedProcess, Filtration, ScenarioTree, atom_means, level_coefficients
from .model import DriverKind, ReflectedProblem, evaluate_problem

ENUMERATION_GUARD = 10**6


@dataclass(frozen=True, eq=False)
class GStoppingTime:
    """Stop decisions ``decisions[k]`` (bool per atom) for levels ``start + k``."""

    tree: ScenarioTree
    filtration: Filtration
    start: int
    decisions: tuple

    def leaf_levels(self) -> np.ndarray:
        """Stopping level seen by each terminal node."""
        tree, n_steps = self.tree, self.tree.num_steps
        levels = np.full(4**n_steps, n_steps)
        alive = np.ones(4**n_steps, dtype=bool)
        for k, stop in enumerate(self.decisions):
            level = self.start + k
            hit = tree.lift(np.asarray(stop)[tree.atoms(self.filtration, level)], n_steps)
            levels[alive & hit] = level
            alive &= ~hit
        return levels

    def stops_at(self, level: int) -> np.ndarray:
        """Per level-``level`` node: does the path stop exactly here."""
        leaves = self.leaf_levels().reshape(4**level, -1)
        return leaves[:, 0] == level

    def __eq__(self, other) -> bool:
        return isinstance(other, GStoppingTime) and np.array_equal(self.leaf_levels(), other.leaf_levels())

    def __hash__(self) -> int:
        return hash(self.leaf_levels().tobytes())


def _children_per_atom(filtration: Filtration) -> int:
    return {Filtration.FULL: 4, Filtration.PARTIAL: 2, Filtration.TRIVIAL: 1}[filtration]


def stopping_time_count(tree: ScenarioTree, filtration: Filtration, start: int = 0) -> int:
    """Number of G-stopping times valued in ``start..N``: ``c(i) = 1 + c(i+1)**k``, ``c(N) = 1``."""
    k = _children_per_atom(filtration)
    count = 1
    for _ in range(tree.num_steps - start):
        count = 1 + count**k
    return count ** tree.num_atoms(filtration, start)


def enumerate_g_stopping_times(tree: ScenarioTree, filtration: Filtration, start: int = 0) -> Iterator[GStoppingTime]:
    """Yield every G-stopping time valued in ``start..N`` exactly once."""
    if not 0 <= start <= tree.num_steps:
        raise ValidationError(f"start level {start} outside 0..{tree.num_steps}")
    total = stopping_time_count(tree, filtration, start)
    if total > ENUMERATION_GUARD:
        raise GuardError(f"{total} stopping times exceed the enumeration guard {ENUMERATION_GUARD}", code="GUARD_STOPPING")
    memo = {}

    def strategies(level: int, atom: int) -> list:
        key = (level, atom)
        if key not in memo:
            options = [((level, atom),)]
            if level < tree.num_steps:
                children = tree.child_atoms(filtration, level)[atom]
                for combo in itertools.product(*(strategies(level + 1, int(c)) for c in children)):
                    options.append(tuple(point for part in combo for point in part))
            memo[key] = options
        return memo[key]

    roots = range(tree.num_atoms(filtration, start))
    for combo in itertools.product(*(strategies(start, a) for a in roots)):
        decisions = [np.zeros(tree.num_atoms(filtration, lvl), dtype=bool) for lvl in range(start, tree.num_steps + 1)]
        for part in combo:
            for level, atom in part:
                decisions[level - start][atom] = True
        yield GStoppingTime(tree, filtration, start, tuple(decisions))


def stopped_value(problem: ReflectedProblem, tau: GStoppingTime, t: int, tree: ScenarioTree) -> np.ndarray:
    """``E[y^tau_t | G_t]`` per level-``t`` node for the unreflected equation stopped at ``tau``.

    The payoff is the terminal value where ``tau = N`` and the barrier where ``tau < N``.
    """
    if tau.start < t:
        raise ValidationError("stopping time must not start before t")
    data = evaluate_problem(problem, tree)
    thetas, weights = problem_weights(problem, tree, data)
    generator = problem_generator(problem, tree, data, thetas)
    leaves = tau.leaf_levels()
    n_steps = tree.num_steps
    y = np.where(leaves == n_steps, data.terminal, data.barriers[n_steps])
    for i in reversed(range(t, n_steps)):
        mean, z_rot, residual = level_coefficients(tree, y)
        z = z_rot @ tree.rotation
        cont, _ = implicit_step(mean, lambda v, i=i: generator(i, v, z, z_rot, residual), tree.dt, i)
        stop_here = leaves.reshape(4**i, -1)[:, 0] == i
        y = np.where(stop_here, data.barriers[i], cont)
    level_weights = None if weights is None else weights[t]
    return atom_means(tree, y, problem.filtration, t, level_weights)[tree.atoms(problem.filtration, t)]


PROVEN_KINDS = (DriverKind.CONSTANT_IN_YZ, DriverKind.AFFINE)


def snell_envelope(problem: ReflectedProblem, tree: ScenarioTree, conjecture: bool = False):
    """Solve the reflected problem and project ``Y`` onto G; returns ``(values, solution)``."""
    if problem.driver.kind not in PROVEN_KINDS and not conjecture:
        raise ValidationError(
            f"the stopping representation is established only for constant and affine drivers, "
            f"not {problem.driver.kind.value}; pass conjecture=True to compute it anyway",
            code="VALIDATION_UNPROVEN_DRIVER",
        )
    if (
        problem.driver.kind is DriverKind.AFFINE
        and problem.filtration is Filtration.TRIVIAL
        and not conjecture
        and any(np.any(problem.driver.z_coefficient(v) != 0) for v in evaluate_problem(problem, tree).views[:-1])
    ):
        raise ValidationError(
            "a z-coefficient needs a G-generating noise component; the trivial filtration has none "
            "(pass conjecture=True to compute anyway)",
            code="VALIDATION_UNPROVEN_DRIVER",
        )
    solution = solve_backward(problem, tree, Scheme.IMPLICIT_Y)
    values = []
    for i in tree.levels:
        level_weights = None if solution.weights is None else solution.weights[i]
        means = atom_means(tree, solution.Y[i], problem.filtration, i, level_weights)
        values.append(means[tree.atoms(problem.filtration, i)])
    return AdaptedProcess(tuple(values), problem.filtration), solution


def snell_value(problem: ReflectedProblem, tree: ScenarioTree, conjecture: bool = False) -> AdaptedProcess:
    """``E[Y_t | G_t]`` of the solved reflected problem at every level."""
    return snell_envelope(problem, tree, conjecture)[0]


def default_gap_tolerance(solution: SolutionTriple) -> float:
    scale = max(float(np.max(np.abs(y))) for y in solution.Y.values)
    return 1e-9 * (1.0 + scale)


def optimal_stopping_time(
    solution: SolutionTriple, problem: ReflectedProblem, tol: Optional[float] = None, start: int = 0
) -> GStoppingTime:
    """Stop on each G-atom at the first level where the conditional gap is within ``tol``."""
    tree, filtration = solution.tree, problem.filtration
    tol = default_gap_tolerance(solution) if tol is None else tol
    decisions, alive = [], np.ones(tree.num_atoms(filtration, start), dtype=bool)
    for level in range(start, tree.num_steps + 1):
        members = tree.atom_members(filtration, level)
        if level > start:
            parents = tree.atoms(filtration, level - 1)[members[:, 0] // 4]
            alive = still_alive[parents]
        gap = solution.gaps[level][members[:, 0]]
        stop = alive & ((gap <= tol) | (level == tree.num_steps))
        decisions.append(stop)
        still_alive = alive & ~stop
    return GStoppingTime(tree, filtration, start, tuple(decisions))


@dataclass(frozen=True)
class AdjointGamma:
    values: AdaptedProcess


def adjoint_gamma(tree: ScenarioTree, a, b, t: int = 0, filtration: Filtration = Filtration.PARTIAL) -> AdjointGamma:
    """Multiplicative Euler scheme ``Gamma_{i+1} = Gamma_i (1 + a_i dt + b_i e1 sqrt(dt))`` with ``Gamma_t = 1``.

    ``a`` and ``b`` are numbers or per-level node arrays; the noise is the
    first rotated component.
    """
    gammas = [np.ones(4**t)]
    for i in range(t, tree.num_steps):
        a_i = np.broadcast_to(np.asarray(a if np.isscalar(a) else a[i], dtype=float), (4**i,))
        b_i = np.broadcast_to(np.asarray(b if np.isscalar(b) else b[i], dtype=float), (4**i,))
        first = tree.last_signs(i + 1)[:, 0]
        factor = 1.0 + np.repeat(a_i, 4) * tree.dt + np.repeat(b_i, 4) * first * tree.sqrt_dt
        if np.any(factor <= 0):
            node = int(np.argmin(factor))
            raise ValidationError(
                f"adjoint factor {factor[node]:.6g} <= 0 at level {i + 1}, node {node}", code="VALIDATION_GAMMA"
            )
        gammas.append(np.repeat(gammas[-1], 4) * factor)
    return AdjointGamma(AdaptedProcess(tuple(gammas), filtration, start=t))


def snell_rows(values: AdaptedProcess, tau: GStoppingTime):
    """Rows ``(time_index, g_atom_id, snell_value, stop)`` per G-atom."""
    tree, filtration = tau.tree, tau.filtration
    for level in tree.levels:
        members = tree.atom_members(filtration, level)
        stop = tau.decisions[level - tau.start] if level >= tau.start else np.zeros(len(members), dtype=bool)
        for atom, nodes in enumerate(members):
            yield level, atom, values[level][nodes[0]], int(bool(stop[atom]))
