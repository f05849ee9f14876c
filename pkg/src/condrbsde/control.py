"""Controlled reflected problems: Hamiltonians, dual drivers and feedbacks.

Four problems are covered:

* linear weak control with partial information, solved on the G-marginal tree;
* polyhedral (convex) drivers, reduced to a single driver through the
  Fenchel dual family;
* full-information control in the strong formulation, solved with the
  pointwise Hamiltonian under the weak route;
* zero-sum games whose inf-sup Hamiltonian satisfies the Isaacs condition.

Control sets are finite grids and every argmax/argmin keeps the lowest grid
index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .crbsde import Scheme, SolutionTriple, backward_sweep, solve_backward
from .errors import ValidationError
from .lattice import Filtration, ScenarioTree, atom_means, branch_probabilities
from .model import (
    AffinePiece,
    ControlGrid,
    ControlProblem,
    Driver,
    DriverKind,
    Formulation,
    LevelView,
    ReflectedProblem,
    eval_driver,
    evaluate_problem,
    per_node,
    rotated_state_tilt,
    strong_problem,
    validate_problem,
    weak_problem,
)
from .oracle import adapted_controls
from .stopping import GStoppingTime, enumerate_g_stopping_times, stopped_value

DOMINANCE_TOL = 1e-12
MEASURABILITY_TOL = 1e-12


@dataclass(frozen=True)
class HamiltonianTable:
    """Optimised driver values and optimisers per level (per G-atom or per node).

    For games ``argmax`` holds the maximiser of ``min_u F`` and ``arginf`` the
    minimiser of ``max_v F``; ``isaacs_gap`` is the worst ``|inf sup - sup inf|``.
    """

    values: tuple
    argmax: tuple
    arginf: Optional[tuple] = None
    isaacs_gap: float = 0.0


# --- linear control on the G-marginal tree ------------------------------------------------


@dataclass(frozen=True)
class FilteredSolution:
    """Reflected solution on the G-marginal tree; every entry is per G-atom."""

    P: tuple
    Q: tuple
    K: tuple
    barrier: tuple
    gaps: tuple


@dataclass(frozen=True, eq=False)
class LinearBRRResult:
    value: float
    solution: FilteredSolution
    hamiltonian: HamiltonianTable
    stopping: GStoppingTime
    tree: ScenarioTree
    filtration: Filtration
    grid: ControlGrid
    slopes: tuple
    intercepts: tuple

    def feedback(self, level: int, z1) -> np.ndarray:
        """Grid index maximising ``z1 b(v) + g(v)`` on each G-atom at ``level``."""
        z1 = np.broadcast_to(np.asarray(z1, dtype=float), (self.tree.num_atoms(self.filtration, level),))
        return np.argmax(z1[:, None] * self.slopes[level] + self.intercepts[level], axis=1)

    def feedback_control(self) -> list:
        """The optimal feedback evaluated along the solution, as per-level node values."""
        values = self.grid.values
        return [values[idx[self.tree.atoms(self.filtration, i)]] for i, idx in enumerate(self.hamiltonian.argmax)]

    def feedback_rows(self):
        """Rows ``(time_index, g_atom_id, control)``."""
        values = self.grid.values
        for level, idx in enumerate(self.hamiltonian.argmax):
            for atom, k in enumerate(idx):
                yield level, atom, values[k]


def _atom_constant(tree: ScenarioTree, values: np.ndarray, filtration: Filtration, level: int, name: str) -> np.ndarray:
    grouped = values[tree.atom_members(filtration, level)]
    spread = float(np.max(grouped.max(axis=1) - grouped.min(axis=1)))
    if spread > MEASURABILITY_TOL:
        raise ValidationError(f"{name} is not G-measurable at level {level} (spread {spread:.3g})", code="VALIDATION_DRIVER")
    return grouped[:, 0].copy()


def _require_grid(grid: ControlGrid) -> None:
    if grid is None or len(grid) == 0:
        raise ValidationError("control grid must not be empty", code="VALIDATION_GRID")


def _grid_control(view: LevelView, point) -> np.ndarray:
    return np.full(view.num_nodes, float(point))


def _tilt_values(problem: ControlProblem, view: LevelView, control) -> np.ndarray:
    if problem.tilt is None:
        return np.zeros(view.num_nodes)
    return per_node(problem.tilt(view, control), view.num_nodes)


def _child_signs(tree: ScenarioTree, filtration: Filtration, level: int) -> np.ndarray:
    """First rotated sign of each child atom, shape ``(atoms, children)``."""
    children = tree.child_atoms(filtration, level)
    first_member = tree.atom_members(filtration, level + 1)[:, 0]
    return tree.last_signs(level + 1)[first_member, 0][children]


def solve_linear_brr(problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid) -> LinearBRRResult:
    """Maximise the weak value of a linear driver over G-adapted grid controls.

    The value process ``P = E[Y | G]`` of the optimally controlled equation is
    reflected atomwise on the G-marginal tree, with driver
    ``a P + beta Q + max_v {Q b(v) + E[g(v) | G]}`` where ``Q`` is the
    first-rotated martingale coefficient of ``P``.
    """
    _require_grid(grid)
    driver = problem.driver
    filtration = problem.filtration
    if problem.formulation is not Formulation.WEAK_PARTIAL:
        raise ValidationError("linear control needs the weak partial-information formulation", code="VALIDATION_FORMULATION")
    if filtration is Filtration.TRIVIAL:
        raise ValidationError("the trivial filtration has no G-generating component to tilt", code="VALIDATION_FILTRATION")
    if driver.kind not in (DriverKind.AFFINE, DriverKind.CONSTANT_IN_YZ):
        raise ValidationError(f"linear control needs an affine driver, got {driver.kind.value}", code="VALIDATION_DRIVER")
    data = evaluate_problem(weak_problem(problem, None), tree)
    dt, sqrt_dt, n_steps = tree.dt, tree.sqrt_dt, tree.num_steps

    barrier = [atom_means(tree, data.barriers[i], filtration, i) for i in tree.levels]
    terminal = atom_means(tree, data.terminal, filtration, n_steps)
    if np.any(terminal < barrier[n_steps] - 1e-12):
        atom = int(np.argmin(terminal - barrier[n_steps]))
        raise ValidationError(f"terminal constraint violated on G-atom {atom}", code="VALIDATION_TERMINAL")

    ys, zs, slopes, intercepts = [], [], [], []
    for view in data.views[:-1]:
        i = view.level
        if driver.kind is DriverKind.AFFINE:
            ys.append(_atom_constant(tree, driver.y_coefficient(view), filtration, i, "y coefficient"))
            zs.append(_atom_constant(tree, driver.z_coefficient(view), filtration, i, "z coefficient"))
        else:
            ys.append(np.zeros(tree.num_atoms(filtration, i)))
            zs.append(np.zeros(tree.num_atoms(filtration, i)))
        b_cols, g_cols = [], []
        for point in grid.points:
            control = _grid_control(view, point)
            b_cols.append(_atom_constant(tree, _tilt_values(problem, view, control), filtration, i, "tilt"))
            g_cols.append(atom_means(tree, driver.intercept_values(view, control if driver.controlled else None), filtration, i))
        slopes.append(np.stack(b_cols, axis=1))
        intercepts.append(np.stack(g_cols, axis=1))
        if np.max(np.abs(slopes[-1])) * sqrt_dt >= 1.0:
            # same guard as the tilted branch probabilities
            branch_probabilities(tree, np.array([[np.max(np.abs(slopes[-1])), 0.0]]), i)
        if np.max(np.abs(zs[-1][:, None] + slopes[-1])) * sqrt_dt > 1.0 or np.max(ys[-1]) * dt >= 1.0:
            raise ValidationError(
                f"one-step map is not monotone at level {i}: need |beta + b| sqrt(dt) <= 1 and a dt < 1",
                code="VALIDATION_MONOTONE",
            )

    P = [None] * (n_steps + 1)
    Q, pushes, h_values, h_argmax = ([None] * n_steps for _ in range(4))
    P[n_steps] = terminal
    for i in reversed(range(n_steps)):
        children = tree.child_atoms(filtration, i)
        child_values = P[i + 1][children]
        mean = child_values.mean(axis=1)
        q = (child_values * _child_signs(tree, filtration, i)).mean(axis=1) / sqrt_dt
        scores = q[:, None] * slopes[i] + intercepts[i]
        best = np.argmax(scores, axis=1)
        h = scores[np.arange(len(best)), best]
        unreflected = (mean + (zs[i] * q + h) * dt) / (1.0 - ys[i] * dt)
        P[i] = np.maximum(unreflected, barrier[i])
        Q[i], pushes[i], h_values[i], h_argmax[i] = q, P[i] - unreflected, zs[i] * q + h, best

    K = [np.zeros(1)]
    for i in range(n_steps):
        parents = tree.atoms(filtration, i)[tree.atom_members(filtration, i + 1)[:, 0] // 4]
        K.append((K[-1] + pushes[i])[parents])
    gaps = tuple(p - s for p, s in zip(P, barrier))
    solution = FilteredSolution(tuple(P), tuple(Q), tuple(K), tuple(barrier), gaps)
    tau = _first_hitting(tree, filtration, gaps)
    table = HamiltonianTable(tuple(h_values), tuple(h_argmax))
    return LinearBRRResult(
        float(P[0][0]), solution, table, tau, tree, filtration, grid, tuple(slopes), tuple(intercepts)
    )


def _first_hitting(tree: ScenarioTree, filtration: Filtration, gaps) -> GStoppingTime:
    scale = max(float(np.max(np.abs(g))) for g in gaps)
    tol = 1e-9 * (1.0 + scale)
    decisions, alive = [], np.ones(1, dtype=bool)
    for level in tree.levels:
        if level > 0:
            parents = tree.atoms(filtration, level - 1)[tree.atom_members(filtration, level)[:, 0] // 4]
            alive = still[parents]
        stop = alive & ((gaps[level] <= tol) | (level == tree.num_steps))
        decisions.append(stop)
        still = alive & ~stop
    return GStoppingTime(tree, filtration, 0, tuple(decisions))


def mixed_value_oracle(problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid) -> float:
    """Brute-force ``sup_tau sup_v`` of stopped, tilted, unreflected values at time 0."""
    _require_grid(grid)
    taus = list(enumerate_g_stopping_times(tree, problem.filtration))
    best = -math.inf
    for control, _ in adapted_controls(tree, problem.filtration, grid):
        frozen = weak_problem(problem, control)
        for tau in taus:
            best = max(best, float(stopped_value(frozen, tau, 0, tree)[0]))
    return best


# --- polyhedral drivers -------------------------------------------------------------------


@dataclass(frozen=True)
class DualEntry:
    """One dual index: slopes ``(alpha, beta)`` on ``(y, z~1)`` and the pieces and grid points it covers."""

    slope_y: float
    slope_z1: float
    pieces: tuple
    controls: tuple


@dataclass(frozen=True, eq=False)
class DualFamily:
    """Dual indices of ``phi(y, z~1, v) = f(y, z, v) + b(v) z~1`` after control reduction.

    Without a tilt every piece keeps its slopes and the intercept becomes
    ``c_bar = max_v c(v)``. With a tilt the slope on ``z~1`` moves with ``v``,
    so each (piece, grid point) stays a separate index.
    """

    entries: tuple
    driver: Driver
    grid: Optional[ControlGrid]
    tilt: Optional[Callable] = None

    def __len__(self) -> int:
        return len(self.entries)

    def coefficients(self, view: LevelView):
        """Per-entry ``alpha`` (E,), ``beta`` (E, n) and ``c_bar`` (E, n) at one level."""
        n = view.num_nodes
        alphas = np.array([e.slope_y for e in self.entries])
        betas = np.empty((len(self.entries), n))
        cbars = np.empty((len(self.entries), n))
        for k, entry in enumerate(self.entries):
            tilt = 0.0
            if self.tilt is not None:
                tilt = per_node(self.tilt(view, _grid_control(view, self.grid.points[entry.controls[0]])), n)
            betas[k] = entry.slope_z1 + tilt
            candidates = [
                _piece_intercept(self.driver, self.driver.pieces[p], view, self.grid, c)
                for p in entry.pieces
                for c in entry.controls
            ]
            cbars[k] = np.max(np.stack(candidates), axis=0)
        return alphas, betas, cbars

    def reconstruct(self, view: LevelView, y, z1) -> np.ndarray:
        """``max_i {alpha_i y + beta_i z~1 + c_bar_i}`` per node."""
        alphas, betas, cbars = self.coefficients(view)
        y = np.asarray(y, dtype=float)
        z1 = np.asarray(z1, dtype=float)
        planes = alphas[:, None] * y + betas * z1 + cbars
        return planes.max(axis=0)


def _piece_intercept(driver: Driver, piece, view: LevelView, grid: Optional[ControlGrid], index) -> np.ndarray:
    if not callable(piece.intercept):
        return per_node(piece.intercept, view.num_nodes)
    if driver.controlled:
        return per_node(piece.intercept(view, _grid_control(view, grid.points[index])), view.num_nodes)
    return per_node(piece.intercept(view), view.num_nodes)


def _first_component_slopes(driver: Driver, rotation: np.ndarray) -> list:
    direction = rotation[0]
    slopes = []
    for piece in driver.pieces:
        beta = float(np.dot(piece.slope_z, direction))
        if np.max(np.abs(np.asarray(piece.slope_z) - beta * direction)) > 1e-12:
            raise ValidationError("pieces must act through the first rotated component", code="VALIDATION_DRIVER")
        slopes.append((piece.slope_y, beta))
    return slopes


def fenchel_dual(
    driver: Driver, grid: Optional[ControlGrid] = None, tilt: Optional[Callable] = None, rotation=None
) -> DualFamily:
    """Dual family of a polyhedral driver, with the control maximised out of the intercepts."""
    if driver.kind is DriverKind.AFFINE and not callable(driver.y_coef) and not callable(driver.z_coef):
        direction = np.eye(2)[0] if rotation is None else np.asarray(rotation)[0]
        piece = AffinePiece(float(driver.y_coef), tuple(float(driver.z_coef) * direction), driver.intercept)
        driver = Driver.max_affine([piece], controlled=driver.controlled)
    if driver.kind is not DriverKind.MAX_AFFINE:
        raise ValidationError("the dual family needs a polyhedral driver", code="VALIDATION_DRIVER")
    if driver.controlled:
        _require_grid(grid)
    slopes = _first_component_slopes(driver, np.eye(2) if rotation is None else np.asarray(rotation))
    controls = tuple(range(len(grid))) if grid is not None else (0,)
    merged: dict = {}
    for index, slope in enumerate(slopes):
        merged.setdefault(slope, []).append(index)
    entries = []
    if tilt is None:
        for (alpha, beta), pieces in merged.items():
            entries.append(DualEntry(alpha, beta, tuple(pieces), controls))
    else:
        for (alpha, beta), pieces in merged.items():
            for c in controls:
                entries.append(DualEntry(alpha, beta, tuple(pieces), (c,)))
    return DualFamily(tuple(entries), driver, grid, tilt)


@dataclass(frozen=True, eq=False)
class ConvexBRRResult:
    value: float
    solution: SolutionTriple
    family: DualFamily


def solve_convex_brr(problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid) -> ConvexBRRResult:
    """Solve the reflected equation whose driver is rebuilt from the control-reduced dual family."""
    _require_grid(grid)
    if problem.formulation is not Formulation.WEAK_PARTIAL:
        raise ValidationError("convex control needs the weak partial-information formulation", code="VALIDATION_FORMULATION")
    family = fenchel_dual(problem.driver, grid, problem.tilt, tree.rotation)
    base = weak_problem(problem, None)
    data = evaluate_problem(base, tree)
    tables = [family.coefficients(view) for view in data.views[:-1]]
    lipschitz = max(max(float(np.max(np.abs(a))), float(np.max(np.abs(b)))) for a, b, _ in tables)
    direction = tree.rotation[0]

    def rule(view, y, z, control):
        alphas, betas, cbars = tables[view.level]
        planes = alphas[:, None] * y + betas * (z @ direction) + cbars
        return planes.max(axis=0)

    reduced = ReflectedProblem(
        problem.terminal, Driver.general(rule, lipschitz), problem.barrier, problem.filtration, base.state
    )
    solution = solve_backward(reduced, tree, Scheme.IMPLICIT_Y)
    return ConvexBRRResult(solution.value, solution, family)


# --- weak and strong values of a fixed control --------------------------------------------


def weak_value_for_control(control, problem: ControlProblem, tree: ScenarioTree) -> float:
    """Time-0 value with ``control`` frozen and its drift moved into the measure."""
    return solve_backward(weak_problem(problem, control), tree).value


def strong_value_for_control(control, problem: ControlProblem, tree: ScenarioTree) -> float:
    """Time-0 value with the controlled drift kept in the Euler rollout of the state."""
    return solve_backward(strong_problem(problem, control), tree).value


def pair_controls(u, v) -> list:
    """Zip two per-level control sequences into the ``(u, v)`` pairs a game expects."""
    return [(a, b) for a, b in zip(u, v)]


# --- full-information Hamiltonians --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StrongBRRResult:
    value: float
    solution: SolutionTriple
    hamiltonian: HamiltonianTable
    grid: ControlGrid

    def feedback_control(self) -> list:
        """Per-level node values of the maximising control along the solution."""
        return [self.grid.values[idx] for idx in self.hamiltonian.argmax]


@dataclass(frozen=True, eq=False)
class GameResult:
    value: float
    solution: SolutionTriple
    hamiltonian: HamiltonianTable
    grid_u: ControlGrid
    grid_v: ControlGrid

    @property
    def isaacs_gap(self) -> float:
        return self.hamiltonian.isaacs_gap

    def saddle_controls(self):
        """``(u*, v*)`` as per-level node values."""
        u = [self.grid_u.values[idx] for idx in self.hamiltonian.arginf]
        v = [self.grid_v.values[idx] for idx in self.hamiltonian.argmax]
        return u, v


def _full_information(problem: ControlProblem, expected: Formulation) -> None:
    if problem.formulation is not expected:
        raise ValidationError(f"expected a {expected.value} problem", code="VALIDATION_FORMULATION")
    if problem.filtration is not Filtration.FULL:
        raise ValidationError("full-information control needs the full filtration", code="VALIDATION_FILTRATION")


def _candidate_table(problem: ControlProblem, tree: ScenarioTree, views, controls):
    """Rotated tilts per level and candidate control, with the tilt guard checked."""
    table = []
    for view in views:
        thetas = []
        for control in controls(view):
            theta = rotated_state_tilt(problem.state, view, control)
            branch_probabilities(tree, theta, view.level)
            thetas.append(theta)
        table.append(thetas)
    return table


def _tilted_driver(problem, view, y, z, z_rot, residual, control, theta, dt):
    f = eval_driver(problem.driver, view, y, z, control)
    return f + np.sum(theta * z_rot, axis=-1) + theta[:, 0] * theta[:, 1] * dt * residual


def solve_strong_brrf(problem: ControlProblem, tree: ScenarioTree, grid: ControlGrid) -> StrongBRRResult:
    """Reflect pointwise with the Hamiltonian ``max_v {f(v) + theta(v) . z~ + theta1 theta2 dt r}``.

    ``theta(v) = U sigma^-1 b(v)`` is the rotated tilt of the drift; the
    cross term with the residual coefficient ``r`` makes each candidate equal
    to the exact one-step value under the product-tilted branch weights.
    """
    _require_grid(grid)
    _full_information(problem, Formulation.STRONG_FULL)
    base = weak_problem(problem, None)
    validate_problem(base, tree)
    data = evaluate_problem(base, tree)
    views = data.views[:-1]
    thetas = _candidate_table(problem, tree, views, lambda view: [_grid_control(view, p) for p in grid.points])
    dt = tree.dt

    def scores(level, y, z, z_rot, residual):
        view = views[level]
        return np.stack([
            _tilted_driver(problem, view, y, z, z_rot, residual, _grid_control(view, p), thetas[level][k], dt)
            for k, p in enumerate(grid.points)
        ])

    def generator(level, y, z, z_rot, residual):
        return scores(level, y, z, z_rot, residual).max(axis=0)

    lipschitz = problem.driver.lipschitz + _max_tilt(thetas)
    solution = backward_sweep(tree, Filtration.FULL, data.terminal, data.barriers, generator, lipschitz)
    values, argmax = [], []
    for i in range(tree.num_steps):
        s = scores(i, solution.continuation[i], solution.Z[i], solution.Z[i] @ tree.rotation.T, solution.residual[i])
        argmax.append(np.argmax(s, axis=0))
        values.append(s.max(axis=0))
    return StrongBRRResult(solution.value, solution, HamiltonianTable(tuple(values), tuple(argmax)), grid)


def _max_tilt(thetas) -> float:
    return max(float(np.max(np.linalg.norm(t, axis=-1))) for level in thetas for t in level)


def solve_zero_sum(
    problem: ControlProblem,
    tree: ScenarioTree,
    grid_u: ControlGrid,
    grid_v: ControlGrid,
    tol_isaacs: float = 1e-12,
) -> GameResult:
    """Reflect pointwise with ``min_u max_v F``, rejecting any evaluation where the Isaacs gap exceeds ``tol_isaacs``."""
    _require_grid(grid_u)
    _require_grid(grid_v)
    _full_information(problem, Formulation.ZERO_SUM)
    if not tol_isaacs > 0:
        raise ValidationError("tol_isaacs must be positive", code="VALIDATION_TOLERANCE")
    base = weak_problem(problem, None)
    validate_problem(base, tree)
    data = evaluate_problem(base, tree)
    views = data.views[:-1]
    pairs = [(a, b) for a in grid_u.points for b in grid_v.points]

    def pair_control(view, pair):
        return (_grid_control(view, pair[0]), _grid_control(view, pair[1]))

    thetas = _candidate_table(problem, tree, views, lambda view: [pair_control(view, p) for p in pairs])
    dt, shape = tree.dt, (len(grid_u), len(grid_v))
    worst = {"gap": 0.0}

    def payoffs(level, y, z, z_rot, residual):
        view = views[level]
        table = np.stack([
            _tilted_driver(problem, view, y, z, z_rot, residual, pair_control(view, p), thetas[level][k], dt)
            for k, p in enumerate(pairs)
        ])
        return table.reshape(shape + table.shape[1:])

    def generator(level, y, z, z_rot, residual):
        table = payoffs(level, y, z, z_rot, residual)
        upper = table.max(axis=1).min(axis=0)
        lower = table.min(axis=0).max(axis=0)
        gap = np.abs(upper - lower)
        node = np.unravel_index(int(np.argmax(gap)), gap.shape)
        if gap[node] > tol_isaacs:
            raise ValidationError(
                f"Isaacs condition fails at level {level}, node {node[-1]}: gap {gap[node]:.3g} > {tol_isaacs:.3g}",
                code="VALIDATION_ISAACS",
            )
        worst["gap"] = max(worst["gap"], float(gap[node]))
        return upper

    lipschitz = problem.driver.lipschitz + _max_tilt(thetas)
    solution = backward_sweep(tree, Filtration.FULL, data.terminal, data.barriers, generator, lipschitz)
    values, arginf, argmax = [], [], []
    for i in range(tree.num_steps):
        table = payoffs(i, solution.continuation[i], solution.Z[i], solution.Z[i] @ tree.rotation.T, solution.residual[i])
        arginf.append(np.argmin(table.max(axis=1), axis=0))
        argmax.append(np.argmax(table.min(axis=0), axis=0))
        values.append(table.max(axis=1).min(axis=0))
    hamiltonian = HamiltonianTable(tuple(values), tuple(argmax), tuple(arginf), worst["gap"])
    return GameResult(solution.value, solution, hamiltonian, grid_u, grid_v)
