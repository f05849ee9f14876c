"""Seeded random problem families shared by the test-suite and the experiment scripts."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .lattice import Filtration, ScenarioTree, build_tree, rotation_from_angle
from .model import (
    AffinePiece,
    ControlGrid,
    ControlProblem,
    Driver,
    DriverKind,
    Formulation,
    ReflectedProblem,
    StateModel,
)


@dataclass(frozen=True, eq=False)
class Instance:
    problem: ReflectedProblem
    tree: ScenarioTree
    kind: DriverKind
    seed: int


def g_signal(view, filtration: Filtration) -> np.ndarray:
    """A nonconstant G-measurable feature: the observed rotated walk, or 0 when nothing is observed."""
    if filtration is Filtration.TRIVIAL:
        return np.zeros(view.num_nodes)
    if filtration is Filtration.PARTIAL:
        return view.rotated_w[:, 0]
    return view.w[:, 0] + 0.5 * view.w[:, 1]


def random_payoffs(rng: np.random.Generator):
    """Terminal and barrier functionals of the Brownian path (the barrier may be path dependent)."""
    t = rng.normal(size=4)
    s = rng.normal(size=4) * 0.5

    def terminal(view):
        w = view.w
        return t[0] + t[1] * np.sin(w[:, 0]) + t[2] * np.abs(w[:, 1]) + 0.5 * t[3] * w[:, 0] * w[:, 1]

    def barrier(view):
        w = view.w
        running_max = view.x_path[:, :, 0].max(axis=1)
        return s[0] + s[1] * w[:, 0] + s[2] * view.time + s[3] * np.cos(w[:, 1]) + 0.3 * s[0] * running_max

    return terminal, barrier


def random_driver(rng: np.random.Generator, kind: DriverKind, filtration: Filtration, mu: float = 1.0) -> Driver:
    """Driver of the requested kind with Lipschitz constant at most ``mu``."""
    k = rng.normal(size=4)
    if kind is DriverKind.CONSTANT_IN_YZ:
        return Driver.constant(lambda view: k[0] + 0.5 * k[1] * np.sin(view.w[:, 0] - view.w[:, 1]))
    if kind is DriverKind.AFFINE:
        a0, a1 = rng.uniform(-0.5, 0.5, size=2) * mu
        b0, b1 = rng.uniform(-0.5, 0.5, size=2) * mu
        if filtration is Filtration.TRIVIAL:
            b0 = b1 = 0.0  # a z-coefficient needs an observed noise component

        def a(view):
            return a0 + a1 * np.tanh(g_signal(view, filtration))

        def beta(view):
            return b0 + b1 * np.cos(g_signal(view, filtration))

        def c(view):
            return k[0] + k[1] * np.sin(view.w[:, 1])

        return Driver.affine(a, beta, c, bound=mu)
    if kind is DriverKind.MAX_AFFINE:
        pieces = []
        for _ in range(int(rng.integers(2, 4))):
            slope_y = rng.uniform(-mu, mu)
            direction = rng.normal(size=2)
            slope_z = tuple(direction / np.linalg.norm(direction) * rng.uniform(0, mu))
            shift = rng.normal()
            pieces.append(AffinePiece(slope_y, slope_z, lambda view, shift=shift: shift * (1 + 0.3 * np.tanh(view.w[:, 0]))))
        return Driver.max_affine(pieces)
    c1, c2 = rng.uniform(-1, 1, size=2)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)

    def rule(view, y, z, control):
        # |c1| + |c2| <= 2, halved so the Lipschitz constant stays below mu
        return 0.5 * mu * (c1 * np.sin(y) + c2 * np.tanh(z @ direction)) + k[0] * np.cos(view.w[:, 0])

    return Driver.general(rule, mu)


def capped_barrier(terminal, barrier):
    """Barrier clipped by the terminal payoff at maturity, so the terminal constraint holds on any tree."""

    def capped(view):
        values = barrier(view)
        if view.level == view.tree.num_steps:
            return np.minimum(values, terminal(view))
        return values

    return capped


def random_instance(
    seed: int,
    num_steps: int,
    filtration: Filtration,
    kind: DriverKind,
    mu: float = 1.0,
    rotation: bool = True,
) -> Instance:
    rng = np.random.default_rng(seed)
    tree = build_tree(num_steps, 1.0, rotation_from_angle(rng.uniform(0, np.pi)) if rotation else None)
    terminal, barrier = random_payoffs(rng)
    driver = random_driver(rng, kind, filtration, mu)
    problem = ReflectedProblem(terminal, driver, capped_barrier(terminal, barrier), filtration)
    return Instance(problem, tree, kind, seed)


def with_tree(instance: Instance, num_steps: int) -> Instance:
    """Same problem on a tree with another number of steps."""
    tree = build_tree(num_steps, instance.tree.horizon, instance.tree.rotation)
    return replace(instance, tree=tree)


# --- controlled families --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlInstance:
    problem: ControlProblem
    tree: ScenarioTree
    grid: ControlGrid
    seed: int
    grid_u: Optional[ControlGrid] = None


def random_linear_control(seed: int, num_steps: int = 2, tilted: bool = True) -> ControlInstance:
    """Affine driver with a control-dependent intercept and drift on the observed component."""
    rng = np.random.default_rng(seed)
    tree = build_tree(num_steps, 1.0, rotation_from_angle(rng.uniform(0, np.pi / 2)))
    w = rng.normal(size=6)
    a, beta = rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3)
    gain = rng.normal(size=2)
    speed = rng.uniform(0.2, 0.5)

    def intercept(view, c):
        return gain[0] * c + gain[1] * np.sin(view.x_filtered[:, 0]) * c**2

    def terminal(view):
        return w[0] * view.x[:, 0] + w[1] * np.abs(view.x[:, 1])

    def barrier(view):
        return w[2] + w[3] * view.x[:, 0] - 0.3 * view.time + w[4] * view.x[:, 1]

    problem = ControlProblem(
        terminal,
        Driver.affine(a, beta, intercept, controlled=True),
        capped_barrier(terminal, barrier),
        StateModel((0.0, 0.0), np.eye(2)),
        Filtration.PARTIAL,
        Formulation.WEAK_PARTIAL,
        (lambda view, c: speed * c * np.cos(view.x_filtered[:, 0])) if tilted else None,
    )
    return ControlInstance(problem, tree, ControlGrid(tuple(np.round(rng.uniform(-0.5, 1.0, size=2), 6))), seed)


def random_convex_control(seed: int, num_steps: int = 2, tilted: bool = True) -> ControlInstance:
    """Two affine pieces with controlled intercepts, scaled so both pieces are active on typical values.

    The terminal depends on the unobserved noise, so values differ inside a G-atom.
    """
    rng = np.random.default_rng(seed)
    rotation = rotation_from_angle(rng.uniform(0, 1))
    tree = build_tree(num_steps, 1.0, rotation)
    pieces = []
    for _ in range(2):
        slope_y, slope_z1 = rng.uniform(-0.9, 0.9), rng.uniform(-0.6, 0.6)
        k = rng.normal(size=2) * 0.5
        pieces.append(
            AffinePiece(slope_y, tuple(slope_z1 * rotation[0]), lambda view, c, k=k: k[0] * c + k[1] * view.x_filtered[:, 0])
        )
    w = rng.normal(size=4)

    def terminal(view):
        observed, hidden = view.rotated_w[:, 0], view.rotated_w[:, 1]
        return w[0] * observed + w[1] * np.abs(hidden) + w[2] * hidden

    def barrier(view):
        return np.full(view.num_nodes, 0.3 * w[3] - 0.5)

    problem = ControlProblem(
        terminal,
        Driver.max_affine(pieces, controlled=True),
        capped_barrier(terminal, barrier),
        StateModel((0.0, 0.0), np.eye(2)),
        Filtration.PARTIAL,
        Formulation.WEAK_PARTIAL,
        (lambda view, c: 0.3 * c) if tilted else None,
    )
    return ControlInstance(problem, tree, ControlGrid((-0.5, 1.0)), seed)


def random_strong_control(seed: int, num_steps: int = 2) -> ControlInstance:
    """Full-information problem with a controlled state drift and a nonlinear driver."""
    rng = np.random.default_rng(seed)
    tree = build_tree(num_steps, 1.0, rotation_from_angle(rng.uniform(0, 1.5)))
    w = rng.normal(size=3)
    sigma = np.array([[1.0, rng.uniform(-0.3, 0.3)], [rng.uniform(-0.3, 0.3), 1.0]])
    push = rng.uniform(0.3, 0.6, size=2)

    def drift(view, c):
        return np.stack([push[0] * c, -push[1] * c * np.tanh(view.x[:, 0])], axis=1)

    def rule(view, y, z, c):
        return 0.3 * np.sin(y) + 0.2 * np.tanh(z[..., 0]) + w[0] * c * view.x[:, 1] - 0.2 * c**2

    def terminal(view):
        return np.sin(w[1] * view.x[:, 0]) + 0.5 * np.cos(view.x[:, 1]) + 2.5

    def barrier(view):
        return 0.5 + 0.3 * np.sin(w[2] + view.x[:, 0])

    problem = ControlProblem(
        terminal,
        Driver.general(rule, 0.5, controlled=True),
        capped_barrier(terminal, barrier),
        StateModel((0.0, 0.0), sigma, drift=drift),
        Filtration.FULL,
        Formulation.STRONG_FULL,
    )
    return ControlInstance(problem, tree, ControlGrid((-0.5, 0.7)), seed)


def separable_game(seed: int, num_steps: int = 2) -> ControlInstance:
    """Zero-sum game whose driver and drift split into a u-part plus a v-part (so the Isaacs gap vanishes)."""
    rng = np.random.default_rng(seed)
    tree = build_tree(num_steps, 1.0, rotation_from_angle(rng.uniform(0, 1.5)))
    cost_u, gain_v, speed_u, speed_v = rng.uniform(0.2, 1.0, size=4)
    w = rng.normal(size=2)

    def drift(view, pair):
        u, v = pair
        return np.stack([0.4 * speed_u * u + 0.3 * speed_v * v, np.zeros_like(u * v)], axis=1)

    def rule(view, y, z, pair):
        u, v = pair
        return 0.1 * y + cost_u * u**2 - gain_v * v**2 + 0.5 * v * np.tanh(view.x[:, 1])

    def terminal(view):
        return w[0] * view.x[:, 0] ** 2 + 0.5 * view.x[:, 1]

    def barrier(view):
        return -1.0 + 0.3 * view.time * view.x[:, 0] + 0.2 * w[1]

    problem = ControlProblem(
        terminal,
        Driver.general(rule, 0.1, controlled=True),
        capped_barrier(terminal, barrier),
        StateModel((0.0, 0.0), np.eye(2), drift=drift),
        Filtration.FULL,
        Formulation.ZERO_SUM,
    )
    return ControlInstance(problem, tree, ControlGrid((0.0, 0.6)), seed, ControlGrid((-0.5, 0.5)))
