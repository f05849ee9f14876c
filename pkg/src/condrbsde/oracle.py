"""Brute-force references for the solvers.

Everything here is coded directly against the tree and the problem data:
tilted expectations use explicit branch probabilities, implicit steps are
solved by bisection, and stopping times and controls are enumerated
exhaustively. Nothing imports the solver modules being checked.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GuardError, NumericalError, ValidationError
from .lattice import CHILD_SIGNS, Filtration, ScenarioTree, atom_means, branch_probabilities
from .model import (
    ControlGrid,
    ControlProblem,
    Driver,
    DriverKind,
    ReflectedProblem,
    eval_driver,
    evaluate_problem,
    validate_problem,
    weak_problem,
)

ENUMERATION_GUARD = 10**6
BISECTION_TOL = 1e-14


@dataclass(frozen=True)
class ReferenceSolution:
    """Per-level ``Y``, original-frame ``Z`` and cumulative ``K`` (``K[0] = 0``)."""

    Y: tuple
    Z: tuple
    K: tuple

    @property
    def value(self) -> float:
        return float(self.Y[0][0])


def _child_probabilities(problem: ReflectedProblem, tree: ScenarioTree, data, level: int) -> np.ndarray:
    n = 4**level
    if problem.tilt is None:
        return np.full((n, 4), 0.25)
    theta = np.broadcast_to(np.asarray(problem.tilt(data.views[level], data.controls[level]), dtype=float), (n, 2))
    return branch_probabilities(tree, theta, level)


def _bisect(continuation, driver_at, dt: float, lipschitz: float, level: int) -> np.ndarray:
    """Solve ``y = continuation + driver_at(y) dt`` elementwise; the left side minus right side increases in ``y``."""
    if lipschitz * dt >= 1.0:
        raise ValidationError("bisection needs mu*dt < 1", code="VALIDATION_CONTRACTION")
    first = driver_at(continuation)
    radius = np.abs(first) * dt / (1.0 - lipschitz * dt) * (1.0 + 1e-9) + 1e-300
    lo, hi = continuation - radius, continuation + radius
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        excess = mid - continuation - driver_at(mid) * dt
        lo = np.where(excess < 0, mid, lo)
        hi = np.where(excess < 0, hi, mid)
        if np.all(hi - lo <= BISECTION_TOL * np.maximum(1.0, np.abs(mid))):
            return 0.5 * (lo + hi)
    raise NumericalError(f"bisection failed to bracket the implicit step at level {level}", code="NUMERICAL_BISECTION")


def _reference_solve(problem: ReflectedProblem, tree: ScenarioTree) -> ReferenceSolution:
    data = evaluate_problem(problem, tree)
    filtration, dt = problem.filtration, tree.dt
    signs = CHILD_SIGNS.astype(float)
    n_steps = tree.num_steps
    ys, zs, pushes = [None] * (n_steps + 1), [None] * n_steps, [None] * n_steps
    ys[n_steps] = data.terminal
    probs = [_child_probabilities(problem, tree, data, i) for i in range(n_steps)]
    weights = [np.ones(1)]
    for p in probs:
        weights.append((weights[-1][:, None] * p).reshape(-1))
    for i in reversed(range(n_steps)):
        children = ys[i + 1].reshape(-1, 4)
        continuation = np.sum(children * probs[i], axis=1)
        z = (children @ signs) / (4 * tree.sqrt_dt) @ tree.rotation
        view, control = data.views[i], data.controls[i]
        y_tilde = _bisect(
            continuation, lambda y: eval_driver(problem.driver, view, y, z, control), dt, problem.driver.lipschitz, i
        )
        shortfall = atom_means(tree, data.barriers[i] - y_tilde, filtration, i, weights[i])
        pushes[i] = np.maximum(shortfall, 0.0)[tree.atoms(filtration, i)]
        ys[i], zs[i] = y_tilde + pushes[i], z
    ks = [np.zeros(1)]
    for i in range(n_steps):
        ks.append(np.repeat(ks[-1] + pushes[i], 4))
    return ReferenceSolution(tuple(ys), tuple(zs), tuple(ks))


def direct_fixed_point(problem: ReflectedProblem, tree: ScenarioTree) -> ReferenceSolution:
    """Reflected solution with every implicit step solved by bisection to 1e-14."""
    validate_problem(problem, tree)
    return _reference_solve(problem, tree)


# --- stopping ------------------------------------------------------------------------------


def _leaf_sets(tree: ScenarioTree, filtration: Filtration):
    """Leaf masks of every atom, per level."""
    n_steps = tree.num_steps
    return [
        [tree.lift(tree.atoms(filtration, level) == a, n_steps) for a in range(tree.num_atoms(filtration, level))]
        for level in tree.levels
    ]


def _atom_strategies(tree, filtration, level, atom, leaves, memo):
    """Matrix of stopping levels over all leaves (-1 outside the atom), one row per strategy."""
    key = (level, atom)
    if key in memo:
        return memo[key]
    mask = leaves[level][atom]
    stop_now = np.where(mask, level, -1).astype(np.int8)[None, :]
    rows = stop_now
    if level < tree.num_steps:
        members = tree.atoms(filtration, level)
        node = int(np.flatnonzero(members == atom)[0])
        children = np.unique(tree.atoms(filtration, level + 1)[4 * node + np.arange(4)])
        combined = None
        for child in children:
            block = _atom_strategies(tree, filtration, level + 1, int(child), leaves, memo)
            combined = block if combined is None else np.maximum(combined[:, None, :], block[None, :, :]).reshape(
                -1, block.shape[1]
            )
        rows = np.concatenate([stop_now, combined])
    memo[key] = rows
    return rows


def _count(tree, filtration, start):
    k = {Filtration.FULL: 4, Filtration.PARTIAL: 2, Filtration.TRIVIAL: 1}[filtration]
    per_atom = 1
    for _ in range(tree.num_steps - start):
        per_atom = 1 + per_atom**k
    return per_atom, per_atom ** tree.num_atoms(filtration, start)


def _stopped_values_batch(problem, tree, data, stop_levels, start, probs, weights):
    """``E[y^tau_start | G_start]`` per atom for a batch of stopping-level matrices ``(B, leaves)``."""
    n_steps, dt = tree.num_steps, tree.dt
    signs = CHILD_SIGNS.astype(float)
    y = np.where(stop_levels == n_steps, data.terminal[None, :], data.barriers[n_steps][None, :])
    for i in reversed(range(start, n_steps)):
        children = y.reshape(y.shape[0], -1, 4)
        continuation = np.sum(children * probs[i][None], axis=2)
        z = (children @ signs) / (4 * tree.sqrt_dt) @ tree.rotation
        view, control = data.views[i], data.controls[i]
        cont = _bisect(
            continuation, lambda v: eval_driver(problem.driver, view, v, z, control), dt, problem.driver.lipschitz, i
        )
        here = stop_levels.reshape(stop_levels.shape[0], 4**i, -1)[:, :, 0] == i
        y = np.where(here, data.barriers[i][None, :], cont)
    return atom_means(tree, y.T, problem.filtration, start, weights[start])


def brute_force_stopping(problem: ReflectedProblem, tree: ScenarioTree, batch: int = 4096) -> list:
    """Per level ``t``, the per-atom sup over G-stopping times ``tau >= t`` of ``E[y^tau_t | G_t]``."""
    validate_problem(problem, tree)
    filtration = problem.filtration
    for start in tree.levels:
        _, total = _count(tree, filtration, start)
        if total > ENUMERATION_GUARD:
            raise GuardError(f"{total} stopping times from level {start} exceed the guard", code="GUARD_STOPPING")
    data = evaluate_problem(problem, tree)
    probs = [_child_probabilities(problem, tree, data, i) for i in range(tree.num_steps)]
    weights = [np.ones(1)]
    for p in probs:
        weights.append((weights[-1][:, None] * p).reshape(-1))
    batched = problem.driver.kind is not DriverKind.GENERAL
    leaves, memo = _leaf_sets(tree, filtration), {}
    sups = []
    for start in tree.levels:
        best = np.full(tree.num_atoms(filtration, start), -np.inf)
        for atom in range(tree.num_atoms(filtration, start)):
            rows = _atom_strategies(tree, filtration, start, atom, leaves, memo)
            # leaves outside the atom never matter for this atom's value; stop them at once
            rows = np.where(rows < 0, start, rows)
            step = batch if batched else 1
            for lo in range(0, rows.shape[0], step):
                values = _stopped_values_batch(problem, tree, data, rows[lo : lo + step], start, probs, weights)
                best[atom] = max(best[atom], float(values[atom].max()))
        sups.append(best)
    return sups


# --- controls ------------------------------------------------------------------------------


def adapted_controls(tree: ScenarioTree, filtration: Filtration, grid: ControlGrid):
    """All grid-valued processes constant on G-atoms at levels ``0..N-1``, lexicographic in the atom labels."""
    slots = [(i, a) for i in range(tree.num_steps) for a in range(tree.num_atoms(filtration, i))]
    total = len(grid) ** len(slots)
    if total > ENUMERATION_GUARD:
        raise GuardError(f"{total} control processes exceed the guard {ENUMERATION_GUARD}", code="GUARD_CONTROLS")
    values = grid.values
    for labels in itertools.product(range(len(grid)), repeat=len(slots)):
        indices = [np.zeros(tree.num_atoms(filtration, i), dtype=int) for i in range(tree.num_steps)]
        for (i, a), label in zip(slots, labels):
            indices[i][a] = label
        yield [values[indices[i][tree.atoms(filtration, i)]] for i in range(tree.num_steps)], indices


def weak_value(problem: ControlProblem, tree: ScenarioTree, control) -> float:
    """Time-0 value of the reflected problem under the measure tilted by ``control``."""
    return _reference_solve(weak_problem(problem, control), tree).value


def brute_force_controls(problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid):
    """Best weak value over all G-adapted grid-valued controls; returns ``(value, control, indices)``.

    Ties keep the first process in enumeration order.
    """
    best = (-np.inf, None, None)
    for control, indices in adapted_controls(tree, problem.filtration, grid):
        value = weak_value(problem, tree, control)
        if value > best[0]:
            best = (value, control, indices)
    return best


def brute_force_game(problem: ControlProblem, tree: ScenarioTree, grid_u: ControlGrid, grid_v: ControlGrid):
    """``min_u max_v J(u, v)`` over adapted grid-valued processes of both players."""
    us = list(adapted_controls(tree, problem.filtration, grid_u))
    vs = list(adapted_controls(tree, problem.filtration, grid_v))
    if len(us) * len(vs) > ENUMERATION_GUARD:
        raise GuardError(f"{len(us) * len(vs)} control pairs exceed the guard", code="GUARD_CONTROLS")
    upper = np.inf
    for u, _ in us:
        worst = max(weak_value(problem, tree, [(a, b) for a, b in zip(u, v)]) for v, _ in vs)
        upper = min(upper, worst)
    return upper


def brute_force_dual_selectors(
    problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid, selectors: Optional[Filtration] = None
) -> float:
    """Sup over G-adapted controls and adapted piece selectors of linear reflected values.

    For a polyhedral driver with pieces ``(alpha_k, beta_k, c_k)`` acting on the
    first rotated component, a selector picks one piece per (level, atom); the
    tilt ``b(v)`` is added to the selected ``z`` slope and the equation is
    solved under the base measure. Selectors are G-adapted unless
    ``selectors`` names a finer filtration (FULL gives node-wise selectors,
    whose linear drivers are no longer G-measurable).
    """
    selectors = problem.filtration if selectors is None else selectors
    driver = problem.driver
    if driver.kind is not DriverKind.MAX_AFFINE:
        raise ValidationError("dual enumeration needs a polyhedral driver", code="VALIDATION_DRIVER")
    direction = tree.rotation[0]
    slopes = []
    for piece in driver.pieces:
        beta = float(np.dot(piece.slope_z, direction))
        if np.max(np.abs(np.asarray(piece.slope_z) - beta * direction)) > 1e-12:
            raise ValidationError("pieces must act through the first rotated component", code="VALIDATION_DRIVER")
        slopes.append((piece.slope_y, beta))
    pieces = ControlGrid(tuple(range(len(driver.pieces))))
    best = -np.inf
    for control, _ in adapted_controls(tree, problem.filtration, grid):
        frozen = weak_problem(problem, control)
        for selector, _ in adapted_controls(tree, selectors, pieces):
            chosen = [s.astype(int) for s in selector]

            def y_coef(view, chosen=chosen):
                return np.array([slopes[k][0] for k in chosen[view.level]])

            def z_coef(view, chosen=chosen, control=control):
                tilt = 0.0 if problem.tilt is None else problem.tilt(view, control[view.level])
                return np.array([slopes[k][1] for k in chosen[view.level]]) + tilt

            def intercept(view, ctrl, chosen=chosen):
                per_piece = [
                    np.broadcast_to(
                        _piece_intercept(p, view, ctrl, driver.controlled), (view.num_nodes,)
                    )
                    for p in driver.pieces
                ]
                return np.choose(chosen[view.level], per_piece)

            bound = driver.lipschitz + _tilt_bound(problem, tree, control)
            if selectors is problem.filtration:
                linear = Driver.affine(y_coef, z_coef, intercept, bound=bound, controlled=True)
            else:
                def rule(view, y, z, ctrl, y_coef=y_coef, z_coef=z_coef, intercept=intercept):
                    return y_coef(view) * y + z_coef(view) * (z @ direction) + intercept(view, ctrl)

                linear = Driver.general(rule, bound, controlled=True)
            base = ReflectedProblem(
                problem.terminal, linear, problem.barrier, problem.filtration, frozen.state, control, None
            )
            best = max(best, _reference_solve(base, tree).value)
    return best


def _piece_intercept(piece, view, control, controlled: bool):
    if not callable(piece.intercept):
        return piece.intercept
    return piece.intercept(view, control) if controlled else piece.intercept(view)


def _tilt_bound(problem: ControlProblem, tree: ScenarioTree, control) -> float:
    if problem.tilt is None:
        return 0.0
    frozen = weak_problem(problem, control)
    data = evaluate_problem(frozen, tree)
    return max(float(np.max(np.abs(problem.tilt(v, c)))) for v, c in zip(data.views[:-1], data.controls))
