import numpy as np
import pytest
from scipy.optimize import linprog

from condrbsde.control import (
    fenchel_dual,
    mixed_value_oracle,
    pair_controls,
    solve_convex_brr,
    solve_linear_brr,
    solve_strong_brrf,
    solve_zero_sum,
    strong_value_for_control,
    weak_value_for_control,
)
from condrbsde.crbsde import solve_backward
from condrbsde.errors import ValidationError
from condrbsde.lattice import Filtration, build_tree
from condrbsde.model import (
    AffinePiece,
    ControlGrid,
    ControlProblem,
    Driver,
    Formulation,
    LevelView,
    ReflectedProblem,
    StateModel,
    weak_problem,
)
from condrbsde.oracle import adapted_controls, brute_force_controls, brute_force_dual_selectors, brute_force_game
from condrbsde.stopping import stopped_value
from condrbsde.suites import random_convex_control, random_linear_control, random_strong_control, separable_game


def const(value):
    return lambda view: np.full(view.num_nodes, float(value))


def constant_control(tree, value):
    return [np.full(4**i, float(value)) for i in range(tree.num_steps)]


def linear_problem(intercept, tilt=None, filtration=Filtration.PARTIAL, y_coef=0.2, z_coef=0.1):
    return ControlProblem(
        lambda v: np.sin(v.x[:, 0]) + np.abs(v.x[:, 1]),
        Driver.affine(y_coef, z_coef, intercept, controlled=True),
        lambda v: 0.4 + 0.3 * v.x[:, 0] - (v.level == v.tree.num_steps),
        StateModel((0.0, 0.0), np.eye(2)),
        filtration,
        Formulation.WEAK_PARTIAL,
        tilt,
    )


# --- linear control ---------------------------------------------------------------------------


def test_singleton_grid_is_the_weak_value_of_that_control():
    inst = random_linear_control(3)
    grid = ControlGrid((0.7,))
    value = solve_linear_brr(inst.problem, inst.tree, grid).value
    assert value == pytest.approx(weak_value_for_control(constant_control(inst.tree, 0.7), inst.problem, inst.tree), abs=1e-12)


def test_costly_controls_are_never_used():
    tree = build_tree(3)
    problem = linear_problem(lambda v, c: -c**2)
    result = solve_linear_brr(problem, tree, ControlGrid((-1.0, 0.0, 0.5)))
    assert all(np.all(c == 0) for c in result.feedback_control())
    assert result.value == pytest.approx(solve_linear_brr(problem, tree, ControlGrid((0.0,))).value, abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_linear_value_matches_both_oracles_and_its_feedback(seed):
    inst = random_linear_control(seed)
    result = solve_linear_brr(inst.problem, inst.tree, inst.grid)
    best, control, _ = brute_force_controls(inst.problem, inst.tree, inst.grid)
    assert result.value == pytest.approx(best, abs=1e-9)
    assert weak_value_for_control(control, inst.problem, inst.tree) == pytest.approx(best, abs=1e-12)
    assert mixed_value_oracle(inst.problem, inst.tree, inst.grid) == pytest.approx(result.value, abs=1e-9)
    assert weak_value_for_control(result.feedback_control(), inst.problem, inst.tree) == pytest.approx(result.value, abs=1e-9)


def test_scaling_the_reward_keeps_the_feedback():
    tree = build_tree(3)

    def reward(scale):
        return lambda v, c: scale * (np.cos(3 * c + v.x_filtered[:, 0]) + 0.1 * c)

    grid = ControlGrid((-1.0, -0.2, 0.4, 1.0))
    small = solve_linear_brr(linear_problem(reward(1.0)), tree, grid)
    large = solve_linear_brr(linear_problem(reward(7.5)), tree, grid)
    for a, b in zip(small.hamiltonian.argmax, large.hamiltonian.argmax):
        np.testing.assert_array_equal(a, b)


def test_mixed_value_grows_with_the_grid():
    inst = random_linear_control(8)
    points = list(inst.grid.points) + [0.25]
    values = [mixed_value_oracle(inst.problem, inst.tree, ControlGrid(tuple(points[:k]))) for k in (1, 2, 3)]
    assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12


def test_feedback_and_first_hitting_time_attain_the_value():
    inst = random_linear_control(1)
    result = solve_linear_brr(inst.problem, inst.tree, inst.grid)
    frozen = weak_problem(inst.problem, result.feedback_control())
    assert stopped_value(frozen, result.stopping, 0, inst.tree)[0] == pytest.approx(result.value, abs=1e-9)


def test_linear_control_rejections():
    tree = build_tree(2)
    with pytest.raises(ValidationError) as err:
        solve_linear_brr(linear_problem(lambda v, c: c, filtration=Filtration.TRIVIAL), tree, ControlGrid((0.0,)))
    assert err.value.code == "VALIDATION_FILTRATION"
    with pytest.raises(ValidationError) as err:
        solve_linear_brr(linear_problem(lambda v, c: c, z_coef=0.9, tilt=lambda v, c: c), tree, ControlGrid((0.0, 1.0)))
    assert err.value.code == "VALIDATION_MONOTONE"
    with pytest.raises(ValidationError):
        ControlGrid(())


def test_feedback_rows_list_every_atom():
    inst = random_linear_control(2)
    rows = list(solve_linear_brr(inst.problem, inst.tree, inst.grid).feedback_rows())
    assert len(rows) == 1 + 2
    assert {r[2] for r in rows} <= set(inst.grid.points)


# --- polyhedral duality -----------------------------------------------------------------------


def test_single_piece_keeps_the_best_intercept():
    view = LevelView(build_tree(1), 0)
    driver = Driver.max_affine([AffinePiece(0.5, (0.2, 0.0), lambda v, c: -((c - 0.3) ** 2))], controlled=True)
    family = fenchel_dual(driver, ControlGrid((-1.0, 0.0, 1.0)))
    alphas, betas, cbars = family.coefficients(view)
    assert len(family) == 1 and alphas[0] == 0.5 and betas[0, 0] == pytest.approx(0.2)
    assert cbars[0, 0] == pytest.approx(-0.09)


def test_two_piece_reconstruction():
    view = LevelView(build_tree(1), 1)
    pieces = [AffinePiece(1.0, (0.0, 0.0), 0.0), AffinePiece(-1.0, (0.0, 0.0), 1.0)]
    family = fenchel_dual(Driver.max_affine(pieces))
    assert len(family) == 2
    y = np.linspace(-2, 2, 4)
    np.testing.assert_allclose(family.reconstruct(view, y, np.zeros(4)), np.maximum(y, 1 - y))


def test_equal_slopes_are_merged_keeping_the_larger_intercept():
    view = LevelView(build_tree(1), 0)
    pieces = [AffinePiece(0.3, (0.1, 0.0), -1.0), AffinePiece(0.3, (0.1, 0.0), 2.0)]
    family = fenchel_dual(Driver.max_affine(pieces))
    assert len(family) == 1
    assert family.coefficients(view)[2][0, 0] == 2.0


def conjugate_at(slopes, intercepts, k):
    """``f*(alpha_k, beta_k) = sup_{y,z} alpha_k y + beta_k z - f(y, z)`` as a linear program in ``(y, z, t)``."""
    alpha, beta = slopes[k]
    a_ub = np.array([[a, b, -1.0] for a, b in slopes])
    result = linprog([-alpha, -beta, 1.0], A_ub=a_ub, b_ub=-np.asarray(intercepts), bounds=[(None, None)] * 3)
    assert result.status == 0
    return -result.fun


@pytest.mark.parametrize("seed", range(10))
def test_biconjugation_rebuilds_random_polyhedral_drivers(seed):
    rng = np.random.default_rng(seed)
    view = LevelView(build_tree(1), 0)
    count = int(rng.integers(2, 6))
    slopes = [tuple(rng.uniform(-1, 1, size=2)) for _ in range(count)]
    intercepts = list(rng.normal(size=count))
    pieces = [AffinePiece(a, (b, 0.0), c) for (a, b), c in zip(slopes, intercepts)]
    family = fenchel_dual(Driver.max_affine(pieces))
    conjugates = [conjugate_at(slopes, intercepts, k) for k in range(count)]
    points = rng.normal(size=(50, 2)) * 3
    for y, z in points:
        original = max(a * y + b * z + c for (a, b), c in zip(slopes, intercepts))
        biconjugate = max(a * y + b * z - s for (a, b), s in zip(slopes, conjugates))
        rebuilt = family.reconstruct(view, np.array([y]), np.array([z]))[0]
        assert biconjugate == pytest.approx(original, abs=1e-9)
        assert rebuilt == pytest.approx(original, abs=1e-12)


def test_pieces_must_act_on_the_observed_component():
    with pytest.raises(ValidationError):
        fenchel_dual(Driver.max_affine([AffinePiece(0.0, (0.0, 1.0), 0.0)]))


# --- convex control ---------------------------------------------------------------------------


def test_one_piece_convex_problem_is_the_linear_problem():
    inst = random_linear_control(4)
    tree, problem = inst.tree, inst.problem
    driver = Driver.max_affine(
        [AffinePiece(problem.driver.y_coef, tuple(problem.driver.z_coef * tree.rotation[0]), problem.driver.intercept)],
        controlled=True,
    )
    convex = ControlProblem(problem.terminal, driver, problem.barrier, problem.state, problem.filtration, problem.formulation, problem.tilt)
    assert solve_convex_brr(convex, tree, inst.grid).value == pytest.approx(solve_linear_brr(problem, tree, inst.grid).value, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_convex_value_dominates_single_controls_and_single_pieces(seed):
    inst = random_convex_control(seed)
    tree, problem = inst.tree, inst.problem
    value = solve_convex_brr(problem, tree, inst.grid).value
    for point in inst.grid.points:
        assert value >= weak_value_for_control(constant_control(tree, point), problem, tree) - 1e-10
    for piece in problem.driver.pieces:
        slope_z1 = float(np.dot(piece.slope_z, tree.rotation[0]))
        linear = ControlProblem(
            problem.terminal, Driver.affine(piece.slope_y, slope_z1, piece.intercept, controlled=True),
            problem.barrier, problem.state, problem.filtration, problem.formulation, problem.tilt,
        )
        assert value >= solve_linear_brr(linear, tree, inst.grid).value - 1e-10


@pytest.mark.parametrize("seed", [0, 21])
def test_convex_value_bounds_the_enumerations(seed):
    inst = random_convex_control(seed)
    value = solve_convex_brr(inst.problem, inst.tree, inst.grid).value
    best = brute_force_controls(inst.problem, inst.tree, inst.grid)[0]
    selectors = brute_force_dual_selectors(inst.problem, inst.tree, inst.grid)
    assert value >= best - 1e-10 >= selectors - 2e-10


# --- fixed controls ---------------------------------------------------------------------------


def test_zero_drift_is_the_base_measure_value():
    inst = random_linear_control(6, tilted=False)
    control = constant_control(inst.tree, inst.grid.points[0])
    frozen = solve_backward(
        ReflectedProblem(inst.problem.terminal, inst.problem.driver, inst.problem.barrier, Filtration.PARTIAL, inst.problem.state, control),
        inst.tree,
    )
    assert weak_value_for_control(control, inst.problem, inst.tree) == frozen.value


def test_one_step_hand_tilt():
    tree = build_tree(1)
    problem = ControlProblem(
        lambda v: v.rotated_w[:, 0] + 2 * v.rotated_w[:, 1], Driver.zero(), const(-5),
        StateModel((0.0, 0.0), np.eye(2)), Filtration.PARTIAL, Formulation.WEAK_PARTIAL, lambda v, c: c,
    )
    # weights (3/8, 3/8, 1/8, 1/8) on the rotated first sign
    assert weak_value_for_control([np.array([0.5])], problem, tree) == pytest.approx(0.5, abs=1e-15)


def test_value_ignores_how_a_control_is_labelled():
    inst = random_linear_control(5)
    tree = inst.tree
    coarse = [np.full(4**i, 0.3) for i in range(tree.num_steps)]
    fine = [np.repeat(0.3, 4**i).reshape(-1) for i in range(tree.num_steps)]
    assert weak_value_for_control(coarse, inst.problem, tree) == weak_value_for_control(fine, inst.problem, tree)


# --- full information -------------------------------------------------------------------------


def test_driftless_strong_problem_is_uncontrolled():
    inst = random_strong_control(2)
    p = inst.problem
    driver = Driver.general(lambda v, y, z, c: 0.3 * np.sin(y) + 0.2 * np.tanh(z[..., 0]) + 0.0 * c, 0.5, controlled=True)
    still = ControlProblem(p.terminal, driver, p.barrier, StateModel((0.0, 0.0), p.state.diffusion), Filtration.FULL, Formulation.STRONG_FULL)
    plain = ReflectedProblem(p.terminal, Driver.general(lambda v, y, z, c: 0.3 * np.sin(y) + 0.2 * np.tanh(z[..., 0]), 0.5), p.barrier, Filtration.FULL, still.state)
    assert solve_strong_brrf(still, inst.tree, inst.grid).value == pytest.approx(solve_backward(plain, inst.tree).value, abs=1e-12)


def test_single_control_strong_value_is_its_weak_value():
    inst = random_strong_control(3)
    grid = ControlGrid((0.4,))
    value = solve_strong_brrf(inst.problem, inst.tree, grid).value
    assert value == pytest.approx(weak_value_for_control(constant_control(inst.tree, 0.4), inst.problem, inst.tree), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_strong_value_matches_adapted_enumeration(seed):
    inst = random_strong_control(seed)
    result = solve_strong_brrf(inst.problem, inst.tree, inst.grid)
    best = brute_force_controls(inst.problem, inst.tree, inst.grid)[0]
    assert result.value == pytest.approx(best, abs=1e-9)
    assert weak_value_for_control(result.feedback_control(), inst.problem, inst.tree) == pytest.approx(result.value, abs=1e-9)
    for level, values in enumerate(result.hamiltonian.values):
        assert values.shape == (4**level,)


def test_strong_rollout_differs_from_the_weak_value_at_finite_steps():
    inst = random_strong_control(1)
    control = constant_control(inst.tree, 0.7)
    strong = strong_value_for_control(control, inst.problem, inst.tree)
    weak = weak_value_for_control(control, inst.problem, inst.tree)
    assert abs(strong - weak) > 1e-6


def test_strong_control_needs_full_information():
    inst = random_linear_control(0)
    with pytest.raises(ValidationError) as err:
        solve_strong_brrf(inst.problem, inst.tree, inst.grid)
    assert err.value.code == "VALIDATION_FORMULATION"


# --- games ------------------------------------------------------------------------------------


def test_separable_game_without_drift_adds_the_best_constants():
    tree = build_tree(3)

    def rule(view, y, z, pair):
        u, v = pair
        return 0.2 * y + (u - 0.1) ** 2 - (v - 0.6) ** 2

    game = ControlProblem(
        lambda v: np.abs(v.x[:, 0]), Driver.general(rule, 0.2, controlled=True), const(-3),
        StateModel((0.0, 0.0), np.eye(2)), Filtration.FULL, Formulation.ZERO_SUM,
    )
    grid_u, grid_v = ControlGrid((-0.5, 0.0, 0.5)), ControlGrid((0.0, 0.5, 1.0))
    result = solve_zero_sum(game, tree, grid_u, grid_v)
    best = min((u - 0.1) ** 2 for u in grid_u.points) - min((v - 0.6) ** 2 for v in grid_v.points)
    plain = ReflectedProblem(lambda v: np.abs(v.x[:, 0]), Driver.affine(0.2, 0.0, best), const(-3), Filtration.FULL)
    assert result.isaacs_gap == 0.0
    assert result.value == pytest.approx(solve_backward(plain, tree).value, abs=1e-12)


def test_game_with_one_minimiser_is_the_control_problem():
    inst = separable_game(1)
    only = ControlGrid((0.5,))
    result = solve_zero_sum(inst.problem, inst.tree, only, inst.grid)
    p = inst.problem

    def rule(view, y, z, v):
        return p.driver.rule(view, y, z, (np.full_like(v, 0.5), v))

    def drift(view, v):
        return p.state.drift_at(view, (np.full_like(v, 0.5), v))

    strong = ControlProblem(
        p.terminal, Driver.general(rule, p.driver.lipschitz, controlled=True), p.barrier,
        StateModel((0.0, 0.0), np.eye(2), drift=drift), Filtration.FULL, Formulation.STRONG_FULL,
    )
    assert result.value == pytest.approx(solve_strong_brrf(strong, inst.tree, inst.grid).value, abs=1e-12)


@pytest.mark.parametrize("seed", range(2))
def test_game_value_is_a_saddle(seed):
    inst = separable_game(seed)
    tree, problem = inst.tree, inst.problem
    result = solve_zero_sum(problem, tree, inst.grid_u, inst.grid)
    assert result.isaacs_gap <= 1e-12
    assert brute_force_game(problem, tree, inst.grid_u, inst.grid) == pytest.approx(result.value, abs=1e-8)
    u_star, v_star = result.saddle_controls()
    centre = weak_value_for_control(pair_controls(u_star, v_star), problem, tree)
    assert centre == pytest.approx(result.value, abs=1e-9)
    for v, _ in adapted_controls(tree, Filtration.FULL, inst.grid):
        assert weak_value_for_control(pair_controls(u_star, v), problem, tree) <= centre + 1e-8
    for u, _ in adapted_controls(tree, Filtration.FULL, inst.grid_u):
        assert weak_value_for_control(pair_controls(u, v_star), problem, tree) >= centre - 1e-8


def test_coupled_game_violates_isaacs():
    tree = build_tree(1)
    game = ControlProblem(
        const(0), Driver.general(lambda v, y, z, pair: pair[0] * pair[1], 0.0, controlled=True), const(-1),
        StateModel((0.0, 0.0), np.eye(2)), Filtration.FULL, Formulation.ZERO_SUM,
    )
    with pytest.raises(ValidationError) as err:
        solve_zero_sum(game, tree, ControlGrid((-1.0, 1.0)), ControlGrid((-1.0, 1.0)))
    assert err.value.code == "VALIDATION_ISAACS" and "level 0" in str(err.value)
