"""Backward solvers for equations reflected on their conditional mean.

At step ``i`` the child values of ``Y_{i+1}`` are expanded into
``(mean, z, residual)``; the unreflected value ``Y~_i = mean + f dt`` is then
pushed up by the G-measurable amount ``max(0, -E[Y~_i - S_i | G_i])``.
The push applied at time ``i`` is booked as ``K_{i+1} - K_i``, so ``K_0 = 0``
and ``K_{i+1}`` is known at time ``i``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .lattice import (
    AdaptedProcess,
    ScenarioTree,
    atom_means,
    branch_probabilities,
    level_coefficients,
    path_weights,
)
from .model import Driver, ProblemData, ReflectedProblem, eval_driver, evaluate_problem, validate_problem

FIXED_POINT_TOL = 1e-13
FIXED_POINT_SWEEPS = 200


class Scheme(enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT_Y = "implicit_y"


@dataclass(frozen=True)
class Diagnostics:
    worst_gap: float
    flatness_defect: float
    identity_defect: float
    picard_iterations: Optional[int] = None
    contraction_ratios: tuple = ()


@dataclass(frozen=True, eq=False)
class SolutionTriple:
    """Solved ``(Y, Z, K)`` with the intermediate quantities of the scheme.

    ``Z`` is in the original frame and defined for levels ``0..N-1``;
    ``continuation[i]`` is the value before the push at time ``i`` and
    ``gaps[i]`` the conditional gap ``E[Y_i - S_i | G_i]`` per node.
    """

    tree: ScenarioTree
    scheme: Scheme
    Y: AdaptedProcess
    Z: AdaptedProcess
    K: AdaptedProcess
    pushes: tuple
    residual: tuple
    continuation: tuple
    driver_values: tuple
    gaps: tuple
    weights: Optional[tuple] = None
    diagnostics: Optional[Diagnostics] = None

    @property
    def value(self) -> float:
        return float(self.Y[0][0])

    @property
    def filtration(self):
        return self.K.measurability


# Generator signature: (level, y, z_original, z_rotated, residual) -> per-node values.
Generator = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def problem_weights(problem: ReflectedProblem, tree: ScenarioTree, data: ProblemData):
    """Rotated drifts and path weights of the problem's tilt, or ``(None, None)``."""
    if problem.tilt is None:
        return None, None
    thetas = []
    for view, control in zip(data.views[:-1], data.controls):
        theta = np.asarray(problem.tilt(view, control), dtype=float)
        thetas.append(np.array(np.broadcast_to(theta, (view.num_nodes, 2))))
    probs = [branch_probabilities(tree, theta, i) for i, theta in enumerate(thetas)]
    return tuple(thetas), path_weights(tree, probs)


def problem_generator(problem: ReflectedProblem, tree: ScenarioTree, data: ProblemData, thetas=None) -> Generator:
    """Driver plus the exact one-step correction of the tilted conditional mean.

    Under branch probabilities tilted by ``theta`` the child average becomes
    ``mean + (theta . z~ + theta1 theta2 dt residual) dt``, so the tilt enters
    the step as an extra generator term.
    """
    driver = problem.driver

    def generate(level, y, z, z_rot, residual):
        f = eval_driver(driver, data.views[level], y, z, data.controls[level])
        if thetas is not None:
            theta = thetas[level]
            f = f + np.sum(theta * z_rot, axis=-1) + theta[:, 0] * theta[:, 1] * tree.dt * residual
        return f

    return generate


def implicit_step(mean, evaluate: Callable[[np.ndarray], np.ndarray], dt: float, level: int):
    """Solve ``y = mean + evaluate(y) dt`` by fixed-point sweeps; returns ``(y, evaluate(y_prev))``."""
    y = mean + evaluate(mean) * dt
    for _ in range(FIXED_POINT_SWEEPS):
        f = evaluate(y)
        updated = mean + f * dt
        converged = np.max(np.abs(updated - y)) <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(updated)))
        y = updated
        if converged:
            return y, f
    raise NumericalError(f"implicit step did not converge at level {level}", code="NUMERICAL_FIXED_POINT")


def backward_sweep(
    tree: ScenarioTree,
    filtration,
    terminal: np.ndarray,
    barriers,
    generator: Generator,
    lipschitz: float,
    scheme: Scheme = Scheme.IMPLICIT_Y,
    weights: Optional[tuple] = None,
) -> SolutionTriple:
    """Backward induction with one-step conditional reflection."""
    n_steps, dt = tree.num_steps, tree.dt
    if scheme is Scheme.IMPLICIT_Y and lipschitz * dt >= 1.0:
        raise ValidationError(
            f"implicit step needs mu*dt < 1, got {lipschitz * dt:.6g}", code="VALIDATION_CONTRACTION"
        )
    ys = [None] * (n_steps + 1)
    zs, residuals, pushes, conts, fs = ([None] * n_steps for _ in range(5))
    ys[n_steps] = np.asarray(terminal, dtype=float)
    level_weights = (lambda i: None) if weights is None else (lambda i: weights[i])
    for i in reversed(range(n_steps)):
        mean, z_rot, residual = level_coefficients(tree, ys[i + 1])
        z = z_rot @ tree.rotation

        def evaluate(y, i=i, z=z, z_rot=z_rot, residual=residual):
            return generator(i, y, z, z_rot, residual)

        if scheme is Scheme.EXPLICIT:
            f = evaluate(mean)
            cont = mean + f * dt
        else:
            cont, f = implicit_step(mean, evaluate, dt, i)
        atoms = tree.atoms(filtration, i)
        shortfall = atom_means(tree, cont - barriers[i], filtration, i, level_weights(i))
        push = np.maximum(0.0, -shortfall)[atoms]
        ys[i] = cont + push
        zs[i], residuals[i], pushes[i], conts[i], fs[i] = z, residual, push, cont, f
    gap_list = [
        atom_means(tree, ys[i] - barriers[i], filtration, i, level_weights(i))[tree.atoms(filtration, i)]
        for i in tree.levels
    ]
    ks = [np.zeros(1)]
    for i in range(n_steps):
        ks.append(np.repeat(ks[-1] + pushes[i], 4))
    return SolutionTriple(
        tree=tree,
        scheme=scheme,
        Y=AdaptedProcess(tuple(ys)),
        Z=AdaptedProcess(tuple(zs)),
        K=AdaptedProcess(tuple(ks), filtration),
        pushes=tuple(pushes),
        residual=tuple(residuals),
        continuation=tuple(conts),
        driver_values=tuple(fs),
        gaps=tuple(gap_list),
        weights=weights,
    )


def solve_backward(
    problem: ReflectedProblem, tree: ScenarioTree, scheme: Scheme = Scheme.IMPLICIT_Y, validate: bool = True
) -> SolutionTriple:
    """Solve the conditionally reflected equation by backward induction."""
    if validate:
        validate_problem(problem, tree)
    data = evaluate_problem(problem, tree)
    thetas, weights = problem_weights(problem, tree, data)
    solution = backward_sweep(
        tree, problem.filtration, data.terminal, data.barriers,
        problem_generator(problem, tree, data, thetas), problem.driver.lipschitz, scheme, weights,
    )
    return replace(solution, diagnostics=residuals(solution, problem, tree, data))


def weighted_norm(tree: ScenarioTree, ys, zs, rate: float) -> float:
    """``sqrt(sum_i exp(rate t_i) dt E[|y_i|^2 + |z_i|^2])`` over levels ``0..N-1``."""
    total = 0.0
    for i, (y, z) in enumerate(zip(ys, zs)):
        total += math.exp(rate * tree.time(i)) * tree.dt * (np.mean(y**2) + np.mean(np.sum(z**2, axis=-1)))
    return math.sqrt(total)


def solve_picard(
    problem: ReflectedProblem, tree: ScenarioTree, tol: float = 1e-12, max_iter: int = 200
) -> SolutionTriple:
    """Picard iteration: freeze the driver at the previous iterate and solve the reflected problem.

    The iterate is ``(Y~, Z)`` where ``Y~`` is the pre-push value, the point at
    which the implicit scheme evaluates the driver; the fixed point therefore
    coincides with :func:`solve_backward` under ``IMPLICIT_Y``. Successive
    differences are measured in the exponentially weighted norm with rate
    ``4 mu^2 + 1``.
    """
    if not tol > 0:
        raise ValidationError("Picard tolerance must be positive", code="VALIDATION_TOLERANCE")
    validate_problem(problem, tree)
    data = evaluate_problem(problem, tree)
    mu = problem.driver.lipschitz
    rate = 4 * mu**2 + 1
    n_steps = tree.num_steps
    guess_y = [np.zeros(4**i) for i in range(n_steps)]
    guess_z = [np.zeros((4**i, 2)) for i in range(n_steps)]
    previous, ratios = None, []
    for iteration in range(1, max_iter + 1):
        frozen = [
            eval_driver(problem.driver, data.views[i], guess_y[i], guess_z[i], data.controls[i])
            for i in range(n_steps)
        ]
        frozen_driver = Driver.constant(lambda view, frozen=frozen: frozen[view.level])
        solution = solve_backward(replace(problem, driver=frozen_driver), tree, Scheme.IMPLICIT_Y, validate=False)
        new_y, new_z = list(solution.continuation), list(solution.Z.values)
        diff = weighted_norm(
            tree, [a - b for a, b in zip(new_y, guess_y)], [a - b for a, b in zip(new_z, guess_z)], rate
        )
        floor = 1e-12 * (1.0 + weighted_norm(tree, new_y, new_z, rate))
        if previous is not None and previous > floor and diff > floor:
            ratios.append(diff / previous)
        if diff <= tol:
            diagnostics = replace(
                residuals(solution, problem, tree, data),
                picard_iterations=iteration - 1,
                contraction_ratios=tuple(ratios),
            )
            return replace(solution, diagnostics=diagnostics)
        previous, guess_y, guess_z = diff, new_y, new_z
    last = ratios[-1] if ratios else float("nan")
    raise NumericalError(
        f"Picard iteration did not converge in {max_iter} sweeps (last contraction ratio {last:.4g})",
        code="NUMERICAL_PICARD",
    )


def residuals(solution: SolutionTriple, problem: ReflectedProblem, tree: ScenarioTree, data=None) -> Diagnostics:
    """Recompute the one-step identity defect, worst conditional gap and flatness defect."""
    data = evaluate_problem(problem, tree) if data is None else data
    thetas, weights = problem_weights(problem, tree, data)
    generator = problem_generator(problem, tree, data, thetas)
    filtration = solution.K.measurability
    ys, ks = solution.Y, solution.K
    identity, flatness, worst_gap = 0.0, 0.0, math.inf
    for i in tree.levels:
        level_weights = None if weights is None else weights[i]
        gap = atom_means(tree, ys[i] - data.barriers[i], filtration, i, level_weights)
        worst_gap = min(worst_gap, float(gap.min()))
        if i == tree.num_steps:
            continue
        push_per_child = (ks[i + 1] - np.repeat(ks[i], 4)).reshape(-1, 4)
        mean, z_rot, residual = level_coefficients(tree, ys[i + 1])
        z = z_rot @ tree.rotation
        y_star = mean if solution.scheme is Scheme.EXPLICIT else ys[i] - push_per_child[:, 0]
        f = generator(i, y_star, z, z_rot, residual)
        children = ys[i + 1].reshape(-1, 4)
        defect = ys[i][:, None] - children - (f * tree.dt)[:, None] - push_per_child + (children - mean[:, None])
        identity = max(identity, float(np.max(np.abs(defect))))
        largest_push = np.abs(push_per_child).max(axis=1)[tree.atom_members(filtration, i)].max(axis=1)
        flatness += float(np.sum(np.abs(gap) * largest_push))
    return Diagnostics(worst_gap, flatness, identity)


def k_representation_check(
    solution: SolutionTriple, problem: ReflectedProblem, tree: ScenarioTree, driver_at: str = "scheme"
) -> float:
    """Largest gap between ``K_N - K_s`` and the running-max formula built from ``(Y, Z)``.

    With ``F_s`` the left-point integral of ``f(t, Y, Z)`` and ``M_s`` the
    martingale part of ``Y``, let ``D_s = E[xi + F_N - M_N | G_N] - E[F_s - M_s | G_s]
    - E[S_s | G_s]``. Then ``K_N - K_s = max_{s <= u <= N} (D_u)^-``.

    ``driver_at="scheme"`` integrates the driver values the backward step used,
    for which the identity is exact. ``driver_at="solution"`` plugs the
    reflected ``(Y, Z)`` into the driver; that moves each step by at most
    ``mu dt`` times its push, so the error is bounded by ``mu dt max K_N``.
    """
    if driver_at not in ("scheme", "solution"):
        raise ValidationError(f"driver_at must be 'scheme' or 'solution', got {driver_at!r}")
    if problem.tilt is not None:
        raise ValidationError("the representation check runs under the base measure only", code="VALIDATION_TILT")
    data = evaluate_problem(problem, tree)
    filtration = solution.K.measurability
    n_steps, dt = tree.num_steps, tree.dt
    ys, zs = solution.Y, solution.Z
    integral, martingale = [np.zeros(1)], [np.zeros(1)]
    for j in range(n_steps):
        if driver_at == "scheme":
            f = solution.driver_values[j]
        else:
            f = eval_driver(problem.driver, data.views[j], ys[j], zs[j], data.controls[j])
        mean = ys[j + 1].reshape(-1, 4).mean(axis=1)
        integral.append(np.repeat(integral[j] + f * dt, 4))
        martingale.append(np.repeat(martingale[j] - mean, 4) + ys[j + 1])

    def projected(values, level):
        return tree.lift(atom_means(tree, values, filtration, level)[tree.atoms(filtration, level)], n_steps)

    anchor = projected(data.terminal + integral[n_steps] - martingale[n_steps], n_steps)
    distance = np.stack(
        [
            anchor - projected(integral[s] - martingale[s], s) - projected(data.barriers[s], s)
            for s in tree.levels
        ]
    )
    running_min = np.minimum.accumulate(distance[::-1], axis=0)[::-1]
    formula = np.maximum(0.0, -running_min)
    k_terminal = solution.K[n_steps]
    actual = np.stack([k_terminal - tree.lift(solution.K[s], n_steps) for s in tree.levels])
    return float(np.max(np.abs(formula - actual)))


def solution_rows(solution: SolutionTriple):
    """Rows ``(time_index, node_id, g_atom_id, Y, Z1, Z2, K, constraint_gap)`` for export."""
    tree = solution.tree
    filtration = solution.K.measurability
    for i in tree.levels:
        atoms = tree.atoms(filtration, i)
        z = solution.Z[i] if i < tree.num_steps else None
        for node in range(4**i):
            z1, z2 = (z[node, 0], z[node, 1]) if z is not None else (math.nan, math.nan)
            yield (
                i, node, int(atoms[node]), solution.Y[i][node], z1, z2, solution.K[i][node], solution.gaps[i][node]
            )
