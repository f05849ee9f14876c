"""Problem data: drivers, state dynamics, control grids and validation."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .lattice import Filtration, ScenarioTree, atom_means, cond_expect

TERMINAL_TOL = 1e-12
MEASURABILITY_TOL = 1e-12


@dataclass(frozen=True)
class StatePaths:
    """Solved state per level, ``levels[i]`` of shape ``(4**i, d)``."""

    levels: tuple

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


@dataclass(frozen=True, eq=False)
class LevelView:
    """Everything a path functional may read at one level of the tree.

    Without a state model, ``x`` falls back to the original-frame Brownian path.
    """

    tree: ScenarioTree
    level: int
    filtration: Filtration = Filtration.FULL
    states: Optional[StatePaths] = None

    @property
    def time(self) -> float:
        return self.tree.time(self.level)

    @property
    def dt(self) -> float:
        return self.tree.dt

    @property
    def num_nodes(self) -> int:
        return 4**self.level

    @property
    def signs(self) -> np.ndarray:
        return self.tree.signs(self.level)

    @property
    def rotated_w(self) -> np.ndarray:
        """Rotated walk at the current time, shape ``(n, 2)``."""
        return self.tree.rotated_path(self.level)[:, -1, :]

    @property
    def w(self) -> np.ndarray:
        return self.tree.path(self.level)[:, -1, :]

    @property
    def x(self) -> np.ndarray:
        if self.states is None:
            return self.w
        return self.states.levels[self.level]

    @cached_property
    def x_path(self) -> np.ndarray:
        """State history ``(n, level + 1, d)`` up to the current time."""
        if self.states is None:
            return self.tree.path(self.level)
        return np.stack(
            [self.states.levels[k][self.tree.ancestors(self.level, k)] for k in range(self.level + 1)], axis=1
        )

    @cached_property
    def x_filtered(self) -> np.ndarray:
        """``E[X_t | G_t]`` per node."""
        return cond_expect(self.tree, self.x, self.filtration, self.level)


def per_node(value, n: int) -> np.ndarray:
    out = np.broadcast_to(np.asarray(value, dtype=float), (n,))
    return np.array(out)


# --- drivers -------------------------------------------------------------------------------


class DriverKind(enum.Enum):
    CONSTANT_IN_YZ = "constant_in_yz"
    AFFINE = "affine"
    MAX_AFFINE = "max_affine"
    GENERAL = "general"


@dataclass(frozen=True)
class AffinePiece:
    """One plane ``slope_y * y + slope_z . z + intercept`` of a polyhedral driver.

    ``slope_z`` multiplies the original-frame ``z``; ``intercept`` is a number or a
    functional ``(view)`` / ``(view, control)`` when the driver is controlled.
    """

    slope_y: float
    slope_z: tuple
    intercept: object = 0.0


def _coefficient(coef, view: LevelView, control, controlled: bool) -> np.ndarray:
    if callable(coef):
        coef = coef(view, control) if controlled else coef(view)
    return per_node(coef, view.num_nodes)


@dataclass(frozen=True)
class Driver:
    """Generator of the backward equation; build with the classmethods."""

    kind: DriverKind
    lipschitz: float
    intercept: object = 0.0
    y_coef: object = 0.0
    z_coef: object = 0.0
    pieces: tuple = ()
    rule: Optional[Callable] = None
    controlled: bool = False
    bound: float = math.inf

    def __post_init__(self):
        if not self.lipschitz >= 0:
            raise ValidationError("Lipschitz constant must be >= 0", code="VALIDATION_DRIVER")

    @classmethod
    def zero(cls) -> "Driver":
        return cls(DriverKind.CONSTANT_IN_YZ, 0.0)

    @classmethod
    def constant(cls, value, controlled: bool = False) -> "Driver":
        """Driver that ignores ``(y, z)``; ``value`` is a number or path functional."""
        return cls(DriverKind.CONSTANT_IN_YZ, 0.0, intercept=value, controlled=controlled)

    @classmethod
    def affine(cls, y_coef, z_coef, intercept, bound: Optional[float] = None, controlled: bool = False) -> "Driver":
        """``a y + beta z~1 + c`` where ``z~1`` is the first rotated component of ``z``.

        ``a`` and ``beta`` must be G-measurable; when either is a functional,
        ``bound`` declares ``sup |a|, |beta|`` and doubles as the Lipschitz constant.
        """
        if bound is None:
            if callable(y_coef) or callable(z_coef):
                raise ValidationError("functional affine coefficients need a declared bound", code="VALIDATION_DRIVER")
            bound = max(abs(float(y_coef)), abs(float(z_coef)))
        return cls(
            DriverKind.AFFINE, float(bound), intercept=intercept, y_coef=y_coef, z_coef=z_coef,
            controlled=controlled, bound=float(bound),
        )

    @classmethod
    def max_affine(cls, pieces: Sequence[AffinePiece], controlled: bool = False) -> "Driver":
        pieces = tuple(
            AffinePiece(float(p.slope_y), tuple(float(s) for s in p.slope_z), p.intercept) for p in pieces
        )
        if not pieces:
            raise ValidationError("a polyhedral driver needs at least one piece", code="VALIDATION_DRIVER")
        mu = max(max(abs(p.slope_y), math.hypot(*p.slope_z)) for p in pieces)
        return cls(DriverKind.MAX_AFFINE, mu, pieces=pieces, controlled=controlled)

    @classmethod
    def general(cls, rule: Callable, lipschitz: float, controlled: bool = False) -> "Driver":
        """``rule(view, y, z, control)`` returning per-node values, with declared Lipschitz constant."""
        return cls(DriverKind.GENERAL, float(lipschitz), rule=rule, controlled=controlled)

    def y_coefficient(self, view: LevelView) -> np.ndarray:
        return _coefficient(self.y_coef, view, None, False)

    def z_coefficient(self, view: LevelView) -> np.ndarray:
        return _coefficient(self.z_coef, view, None, False)

    def intercept_values(self, view: LevelView, control=None) -> np.ndarray:
        return _coefficient(self.intercept, view, control, self.controlled)


def eval_driver(driver: Driver, view: LevelView, y, z, control=None) -> np.ndarray:
    """Evaluate the driver at every node of ``view``.

    ``y`` has shape ``(..., n)`` and ``z`` (original frame) ``(..., n, 2)``;
    leading batch axes broadcast except for GENERAL rules, which receive
    whatever they are given.
    """
    if driver.controlled and control is None:
        raise ValidationError("controlled driver evaluated without a control", code="VALIDATION_CONTROL")
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    kind = driver.kind
    if kind is DriverKind.CONSTANT_IN_YZ:
        return np.broadcast_to(driver.intercept_values(view, control), y.shape).copy()
    if kind is DriverKind.AFFINE:
        first_rotated = z @ view.tree.rotation[0]
        return (
            driver.y_coefficient(view) * y
            + driver.z_coefficient(view) * first_rotated
            + driver.intercept_values(view, control)
        )
    if kind is DriverKind.MAX_AFFINE:
        planes = [
            p.slope_y * y + z @ np.asarray(p.slope_z) + _coefficient(p.intercept, view, control, driver.controlled)
            for p in driver.pieces
        ]
        return np.max(np.stack(planes), axis=0)
    return np.asarray(driver.rule(view, y, z, control), dtype=float)


# --- state dynamics ------------------------------------------------------------------------


class PathDependence(enum.Enum):
    MARKOVIAN = "markovian"
    PATH = "path"


@dataclass(frozen=True)
class StateModel:
    """Euler-discretised state ``dX = b(t, X, v) dt + sigma(t, X) dW``.

    ``drift(view, control)`` and ``diffusion(view)`` may be constants; the
    diffusion has shape ``(d, 2)`` per node. A ``None`` drift means driftless.
    """

    initial: tuple
    diffusion: object
    drift: object = None
    path_dependence: PathDependence = PathDependence.MARKOVIAN
    drift_bound: float = math.inf
    diffusion_bound: float = math.inf
    condition_cap: float = 1e8

    @property
    def dim(self) -> int:
        return len(self.initial)

    def diffusion_at(self, view: LevelView) -> np.ndarray:
        sigma = self.diffusion(view) if callable(self.diffusion) else self.diffusion
        return np.array(np.broadcast_to(np.asarray(sigma, dtype=float), (view.num_nodes, self.dim, 2)))

    def drift_at(self, view: LevelView, control) -> np.ndarray:
        if self.drift is None:
            return np.zeros((view.num_nodes, self.dim))
        b = np.asarray(self.drift(view, control) if callable(self.drift) else self.drift, dtype=float)
        if self.dim == 1 and b.ndim == 1 and b.shape[0] == view.num_nodes:
            b = b[:, None]
        return np.array(np.broadcast_to(np.asarray(b, dtype=float), (view.num_nodes, self.dim)))

    def driftless(self) -> "StateModel":
        return StateModel(
            self.initial, self.diffusion, None, self.path_dependence, self.drift_bound,
            self.diffusion_bound, self.condition_cap,
        )


def check_diffusion(sigma: np.ndarray, level: int, cap: float) -> None:
    singular = np.linalg.svd(sigma, compute_uv=False)
    smallest = singular[:, -1]
    with np.errstate(divide="ignore"):
        condition = np.where(smallest > 0, singular[:, 0] / np.where(smallest > 0, smallest, 1.0), np.inf)
    if np.any(condition > cap):
        node = int(np.argmax(condition))
        raise ValidationError(
            f"diffusion is not invertible at level {level}, node {node} (condition number {condition[node]:.3g})",
            code="VALIDATION_DIFFUSION",
        )


def control_at(control, view: LevelView):
    """Control values at a level: ``control`` is ``None``, a per-level sequence or a feedback ``(view) -> values``."""
    if control is None:
        return None
    if callable(control):
        return control(view)
    return control[view.level]


def rollout_state(
    state: StateModel, tree: ScenarioTree, control=None, *, driftless: bool = False,
    filtration: Filtration = Filtration.FULL,
) -> StatePaths:
    """Roll the Euler scheme forward along every branch."""
    levels = [np.asarray(state.initial, dtype=float).reshape(1, -1)]
    for i in range(tree.num_steps):
        view = LevelView(tree, i, filtration, StatePaths(tuple(levels)))
        sigma = state.diffusion_at(view)
        check_diffusion(sigma, i, state.condition_cap)
        if np.max(np.abs(sigma)) > state.diffusion_bound:
            raise ValidationError(f"diffusion exceeds its declared bound at level {i}", code="VALIDATION_BOUND")
        drift = np.zeros((view.num_nodes, state.dim)) if driftless else state.drift_at(view, control_at(control, view))
        if np.max(np.abs(drift), initial=0.0) > state.drift_bound:
            raise ValidationError(f"drift exceeds its declared bound at level {i}", code="VALIDATION_BOUND")
        dw = tree.increments(i + 1)[:, -1, :]
        nxt = np.repeat(levels[-1] + drift * tree.dt, 4, axis=0)
        nxt += np.einsum("nij,nj->ni", np.repeat(sigma, 4, axis=0), dw)
        levels.append(nxt)
    return StatePaths(tuple(levels))


# --- controls ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlGrid:
    """Finite control set; points keep their order, which is also the tie-break order."""

    points: tuple
    spacing: Optional[float] = None

    def __post_init__(self):
        points = tuple(self.points)
        if not points:
            raise ValidationError("control grid must not be empty", code="VALIDATION_GRID")
        keys = [tuple(np.atleast_1d(np.asarray(p, dtype=float))) for p in points]
        if len(set(keys)) != len(keys):
            raise ValidationError("control grid contains duplicate points", code="VALIDATION_GRID")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


# --- problems ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ReflectedProblem:
    """Data of a conditionally reflected backward equation.

    ``terminal(view)`` and ``barrier(view)`` return per-node values at
    ``view.level``. ``control`` optionally freezes per-level control values
    fed to a controlled driver; ``tilt(view, control)`` optionally returns a
    rotated-frame drift ``(n, 2)`` under which the equation is solved.
    """

    terminal: Callable
    driver: Driver
    barrier: Callable
    filtration: Filtration
    state: Optional[StateModel] = None
    control: Optional[Sequence] = None
    tilt: Optional[Callable] = None


@dataclass(frozen=True)
class ProblemData:
    views: tuple
    terminal: np.ndarray
    barriers: tuple
    controls: tuple


def evaluate_problem(problem: ReflectedProblem, tree: ScenarioTree) -> ProblemData:
    """Roll out the state and evaluate terminal, barrier and controls on every node."""
    states = None
    if problem.state is not None:
        states = rollout_state(problem.state, tree, problem.control, filtration=problem.filtration)
    views = tuple(LevelView(tree, i, problem.filtration, states) for i in tree.levels)
    controls = tuple(control_at(problem.control, view) for view in views[:-1])
    barriers = tuple(per_node(problem.barrier(view), view.num_nodes) for view in views)
    terminal = per_node(problem.terminal(views[-1]), views[-1].num_nodes)
    for level, values in enumerate(barriers):
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"barrier is not finite at level {level}", code="VALIDATION_DATA")
    if not np.all(np.isfinite(terminal)):
        raise ValidationError("terminal value is not finite", code="VALIDATION_DATA")
    return ProblemData(views, terminal, barriers, controls)


@dataclass(frozen=True)
class ValidationReport:
    margins: np.ndarray
    worst_atom: int
    worst_margin: float
    lipschitz: float
    checks: dict = field(default_factory=dict)

    @property
    def solvable(self) -> bool:
        return self.worst_margin >= -TERMINAL_TOL and all(self.checks.values())


def validate_problem(problem: ReflectedProblem, tree: ScenarioTree, raise_on_failure: bool = True) -> ValidationReport:
    """Check the terminal constraint per terminal G-atom and the driver's declared structure."""
    data = evaluate_problem(problem, tree)
    n = tree.num_steps
    margins = atom_means(tree, data.terminal - data.barriers[n], problem.filtration, n)
    worst = int(np.argmin(margins))
    checks = {"terminal_constraint": bool(margins[worst] >= -TERMINAL_TOL)}
    driver = problem.driver
    if driver.kind is DriverKind.AFFINE:
        spread, size = 0.0, 0.0
        for view in data.views[:-1]:
            members = tree.atom_members(problem.filtration, view.level)
            for coef in (driver.y_coefficient(view), driver.z_coefficient(view)):
                grouped = coef[members]
                spread = max(spread, float(np.max(grouped.max(axis=1) - grouped.min(axis=1))))
                size = max(size, float(np.max(np.abs(coef))))
        checks["affine_coefficients_g_measurable"] = spread <= MEASURABILITY_TOL
        checks["affine_coefficients_bounded"] = size <= driver.bound + 1e-12
    report = ValidationReport(margins, worst, float(margins[worst]), driver.lipschitz, checks)
    if raise_on_failure and not report.solvable:
        if not checks["terminal_constraint"]:
            raise ValidationError(
                f"terminal constraint violated on G-atom {worst}: E[terminal - barrier | G_N] = {margins[worst]:.6g}",
                code="VALIDATION_TERMINAL",
            )
        failed = ", ".join(k for k, ok in checks.items() if not ok)
        raise ValidationError(f"driver checks failed: {failed}", code="VALIDATION_DRIVER")
    return report


class Formulation(enum.Enum):
    WEAK_PARTIAL = "weak_partial"
    STRONG_FULL = "strong_full"
    ZERO_SUM = "zero_sum"


@dataclass(frozen=True)
class ControlProblem:
    """Controlled reflected problem.

    ``WEAK_PARTIAL``: the state is driftless and ``tilt(view, control)`` is a
    scalar drift on the first rotated component (functionals usually read
    ``view.x_filtered``). ``STRONG_FULL`` and ``ZERO_SUM``: the state drift
    ``b(view, control)`` enters either the Euler rollout (strong) or the
    measure through ``sigma^-1 b`` (weak). For games the control passed to
    every functional is the pair ``(u, v)``.
    """

    terminal: Callable
    driver: Driver
    barrier: Callable
    state: StateModel
    filtration: Filtration
    formulation: Formulation
    tilt: Optional[Callable] = None


def rotated_state_tilt(state: StateModel, view: LevelView, control) -> np.ndarray:
    """``U sigma^-1 b`` per node: the state drift seen as a drift of the rotated noise."""
    sigma = state.diffusion_at(view)
    drift = state.drift_at(view, control)
    theta = np.einsum("nij,nj->ni", np.linalg.pinv(sigma), drift)
    return theta @ view.tree.rotation.T


def weak_problem(problem: ControlProblem, control) -> ReflectedProblem:
    """Freeze ``control`` and move the controlled drift into the measure."""
    state = problem.state.driftless()
    if problem.formulation is Formulation.WEAK_PARTIAL:
        if problem.tilt is None:
            tilt = None
        else:
            def tilt(view, ctrl):
                first = per_node(problem.tilt(view, ctrl), view.num_nodes)
                return np.stack([first, np.zeros_like(first)], axis=1)
    else:
        def tilt(view, ctrl):
            return rotated_state_tilt(problem.state, view, ctrl)
    return ReflectedProblem(problem.terminal, problem.driver, problem.barrier, problem.filtration, state, control, tilt)


def strong_problem(problem: ControlProblem, control) -> ReflectedProblem:
    """Freeze ``control`` and keep the drift in the state rollout (no measure change)."""
    return ReflectedProblem(
        problem.terminal, problem.driver, problem.barrier, problem.filtration, problem.state, control, None
    )
