import itertools

import numpy as np
import pytest

from condrbsde.errors import ValidationError
from condrbsde.lattice import CHILD_SIGNS, Filtration, build_tree, rotation_from_angle
from condrbsde.model import (
    AffinePiece,
    ControlGrid,
    ControlProblem,
    Driver,
    Formulation,
    LevelView,
    PathDependence,
    ReflectedProblem,
    StateModel,
    eval_driver,
    rollout_state,
    rotated_state_tilt,
    validate_problem,
    weak_problem,
)


def const(value):
    return lambda view: np.full(view.num_nodes, float(value))


def test_constant_terminal_above_barrier_passes_with_unit_margin():
    tree = build_tree(2)
    report = validate_problem(ReflectedProblem(const(1), Driver.zero(), const(0), Filtration.PARTIAL), tree)
    assert report.solvable
    np.testing.assert_allclose(report.margins, 1.0)


def test_barrier_above_terminal_fails_with_margin_minus_one():
    tree = build_tree(2)
    problem = ReflectedProblem(const(0), Driver.zero(), const(1), Filtration.FULL)
    report = validate_problem(problem, tree, raise_on_failure=False)
    assert report.worst_margin == -1.0 and not report.solvable
    with pytest.raises(ValidationError) as err:
        validate_problem(problem, tree)
    assert err.value.code == "VALIDATION_TERMINAL"


def test_partial_terminal_constraint_is_checked_per_atom():
    tree = build_tree(1)
    problem = ReflectedProblem(lambda v: v.signs[:, -1, 0].astype(float), Driver.zero(), const(0), Filtration.PARTIAL)
    report = validate_problem(problem, tree, raise_on_failure=False)
    np.testing.assert_array_equal(report.margins, [1.0, -1.0])
    with pytest.raises(ValidationError, match="G-atom 1"):
        validate_problem(problem, tree)


def test_affine_coefficient_must_be_g_measurable():
    tree = build_tree(2)
    driver = Driver.affine(lambda v: v.w[:, 1], 0.0, 0.0, bound=2.0)
    problem = ReflectedProblem(const(1), driver, const(0), Filtration.PARTIAL)
    with pytest.raises(ValidationError) as err:
        validate_problem(problem, tree)
    assert err.value.code == "VALIDATION_DRIVER"


def test_driftless_identity_state_is_the_brownian_path():
    tree = build_tree(3, 1.0, rotation_from_angle(0.7))
    states = rollout_state(StateModel((0.0, 0.0), np.eye(2)), tree)
    for level in tree.levels:
        np.testing.assert_allclose(states.levels[level], tree.path(level)[:, -1, :], atol=1e-14)


def test_one_euler_step_with_unit_drift():
    tree = build_tree(1)
    state = StateModel((0.0,), np.array([[1.0, 0.0]]), drift=1.0)
    np.testing.assert_allclose(rollout_state(state, tree).levels[1][:, 0], [2, 2, 0, 0])


def test_path_dependent_drift_matches_branch_enumeration():
    tree = build_tree(2)
    sigma = np.array([[1.0, 0.5]])

    def running_max(view, control):
        return view.x_path[:, :, 0].max(axis=1)

    state = StateModel((0.2,), sigma, drift=running_max, path_dependence=PathDependence.PATH)
    got = rollout_state(state, tree).levels[2][:, 0]
    dt = tree.dt
    expected = []
    for first, second in itertools.product(range(4), repeat=2):
        path = [0.2]
        for slot in (first, second):
            dw = CHILD_SIGNS[slot] * np.sqrt(dt)
            path.append(path[-1] + max(path) * dt + sigma[0] @ dw)
        expected.append(path[-1])
    np.testing.assert_allclose(got, expected, atol=1e-14)


def test_singular_diffusion_is_reported_with_its_node():
    tree = build_tree(1)
    state = StateModel((0.0, 0.0), np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValidationError) as err:
        rollout_state(state, tree)
    assert err.value.code == "VALIDATION_DIFFUSION" and "node 0" in str(err.value)


def test_declared_drift_bound_is_enforced():
    tree = build_tree(1)
    with pytest.raises(ValidationError):
        rollout_state(StateModel((0.0,), np.array([[1.0, 0.0]]), drift=2.0, drift_bound=1.0), tree)


def test_driver_examples():
    view = LevelView(build_tree(1), 1)
    y, z = np.full(4, 2.0), np.zeros((4, 2))
    assert eval_driver(Driver.affine(1.0, 0.0, 0.0), view, y, z)[0] == 2.0
    pieces = [AffinePiece(1.0, (0.0, 0.0), 0.0), AffinePiece(-1.0, (0.0, 0.0), 1.0)]
    assert eval_driver(Driver.max_affine(pieces), view, np.full(4, 0.3), z)[0] == pytest.approx(0.7)
    clock = Driver.constant(lambda v: np.full(v.num_nodes, v.time))
    np.testing.assert_array_equal(eval_driver(clock, view, np.arange(4.0), np.ones((4, 2))), 1.0)


def test_affine_z_coefficient_acts_on_the_first_rotated_component():
    u = rotation_from_angle(0.4)
    view = LevelView(build_tree(1, 1.0, u), 0)
    z_rot = np.array([[2.0, 5.0]])
    got = eval_driver(Driver.affine(0.0, 0.5, 0.0), view, np.zeros(1), z_rot @ u)
    assert got[0] == pytest.approx(1.0)


def test_controlled_driver_needs_a_control():
    view = LevelView(build_tree(1), 0)
    driver = Driver.constant(lambda v, c: c, controlled=True)
    with pytest.raises(ValidationError) as err:
        eval_driver(driver, view, np.zeros(1), np.zeros((1, 2)))
    assert err.value.code == "VALIDATION_CONTROL"


def test_control_grid_rejects_empty_and_duplicates():
    with pytest.raises(ValidationError):
        ControlGrid(())
    with pytest.raises(ValidationError):
        ControlGrid((0.0, 1.0, 0.0))
    assert len(ControlGrid((0.0, 1.0))) == 2


def test_rotated_state_tilt_is_inverse_diffusion_times_drift():
    u = rotation_from_angle(1.1)
    tree = build_tree(1, 1.0, u)
    sigma = np.array([[2.0, 0.0], [0.5, 1.0]])
    state = StateModel((0.0, 0.0), sigma, drift=lambda v, c: np.stack([c, -c], axis=1))
    view = LevelView(tree, 0)
    theta = rotated_state_tilt(state, view, np.array([0.3]))
    expected = np.linalg.solve(sigma, [0.3, -0.3]) @ u.T
    np.testing.assert_allclose(theta[0], expected, atol=1e-14)


def test_weak_problem_moves_the_drift_into_the_measure():
    state = StateModel((0.0, 0.0), np.eye(2), drift=lambda v, c: np.stack([c, 0 * c], axis=1))
    problem = ControlProblem(const(1), Driver.zero(), const(0), state, Filtration.FULL, Formulation.STRONG_FULL)
    frozen = weak_problem(problem, [np.array([0.2])])
    assert frozen.state.drift is None
    view = LevelView(build_tree(1), 0)
    np.testing.assert_allclose(frozen.tilt(view, np.array([0.2])), [[0.2, 0.0]])
