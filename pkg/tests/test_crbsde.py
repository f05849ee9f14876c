from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condrbsde.crbsde import (
    Scheme,
    k_representation_check,
    residuals,
    solution_rows,
    solve_backward,
    solve_picard,
)
from condrbsde.errors import ValidationError
from condrbsde.lattice import AdaptedProcess, Filtration, atom_means, build_tree
from condrbsde.model import Driver, DriverKind, ReflectedProblem
from condrbsde.oracle import direct_fixed_point
from condrbsde.suites import random_instance

from reference import classical_reflected, mean_reflection_k

filtrations = st.sampled_from(list(Filtration))
kinds = st.sampled_from(list(DriverKind))


def const(value):
    return lambda view: np.full(view.num_nodes, float(value))


@pytest.mark.parametrize("filtration", list(Filtration))
def test_inactive_barrier_gives_constant_solution(filtration):
    tree = build_tree(3)
    sol = solve_backward(ReflectedProblem(const(1), Driver.zero(), const(-10), filtration), tree)
    for level in tree.levels:
        np.testing.assert_array_equal(sol.Y[level], 1.0)
        np.testing.assert_array_equal(sol.K[level], 0.0)
    for level in range(3):
        np.testing.assert_array_equal(sol.Z[level], 0.0)


def test_binding_barrier_without_push():
    tree = build_tree(2)
    sol = solve_backward(ReflectedProblem(const(1), Driver.zero(), const(1), Filtration.PARTIAL), tree)
    assert sol.value == 1.0
    assert max(np.max(k) for k in sol.K.values) == 0.0


def hand_problem(barrier_at_zero):
    def terminal(view):
        return view.signs[:, -1, 1] + 0.5

    def barrier(view):
        return np.full(view.num_nodes, barrier_at_zero if view.level == 0 else 0.5)

    return ReflectedProblem(terminal, Driver.zero(), barrier, Filtration.PARTIAL)


def test_hand_step_on_four_nodes():
    tree = build_tree(1)
    flat = solve_backward(hand_problem(0.5), tree)
    assert flat.value == 0.5 and flat.K[1][0] == 0.0
    pushed = solve_backward(hand_problem(0.7), tree)
    assert pushed.value == pytest.approx(0.7)
    np.testing.assert_allclose(pushed.K[1], 0.2)
    assert pushed.K[0][0] == 0.0


def test_implicit_step_rejects_mu_dt_of_one():
    tree = build_tree(1)
    with pytest.raises(ValidationError) as err:
        solve_backward(ReflectedProblem(const(1), Driver.affine(1.0, 0.0, 0.0), const(0), Filtration.FULL), tree)
    assert err.value.code == "VALIDATION_CONTRACTION"


def test_explicit_scheme_evaluates_at_the_mean():
    tree = build_tree(1)
    problem = ReflectedProblem(const(2), Driver.affine(0.5, 0.0, 0.0), const(-10), Filtration.FULL)
    assert solve_backward(problem, tree, Scheme.EXPLICIT).value == pytest.approx(3.0)
    assert solve_backward(problem, tree).value == pytest.approx(4.0)


def test_picard_is_done_after_one_sweep_for_a_constant_driver():
    inst = random_instance(3, 3, Filtration.PARTIAL, DriverKind.CONSTANT_IN_YZ)
    picard = solve_picard(inst.problem, inst.tree)
    assert picard.diagnostics.picard_iterations == 1
    assert picard.value == solve_backward(inst.problem, inst.tree).value


def test_picard_matches_implicit_scheme_for_affine_driver():
    tree = build_tree(3)
    def barrier(view):
        return np.full(view.num_nodes, -10.0) if view.level == 3 else 1.5 + 0.5 * view.w[:, 0]

    problem = ReflectedProblem(lambda v: np.sin(v.w[:, 0]) + 2, Driver.affine(0.5, 0.0, 0.1), barrier, Filtration.PARTIAL)
    picard = solve_picard(problem, tree, tol=1e-13)
    direct = solve_backward(problem, tree)
    for level in tree.levels:
        np.testing.assert_allclose(picard.Y[level], direct.Y[level], atol=1e-12)
    assert max(picard.diagnostics.contraction_ratios) < 0.75


def test_k_representation_is_zero_without_pushes():
    tree = build_tree(2)
    problem = ReflectedProblem(const(1), Driver.affine(0.3, 0.0, 0.0), const(-1), Filtration.FULL)
    sol = solve_backward(problem, tree)
    assert k_representation_check(sol, problem, tree) == 0
    assert k_representation_check(sol, problem, tree, "solution") == 0


def test_trivial_zero_driver_k_is_the_mean_reflection_running_max():
    tree = build_tree(4)

    def barrier(view):
        return 0.6 * np.sin(3 * view.time) + 0.2 * view.w[:, 0] - 0.1 * (view.level == 4)

    problem = ReflectedProblem(lambda v: v.w[:, 0] ** 2, Driver.zero(), barrier, Filtration.TRIVIAL)
    sol = solve_backward(problem, tree)
    views = [type("V", (), {"num_nodes": 4**i, "time": tree.time(i), "level": i, "w": tree.path(i)[:, -1, :]})
             for i in tree.levels]
    expected_barriers = [np.mean(barrier(v)) for v in views]
    k = mean_reflection_k(np.mean(tree.path(4)[:, -1, 0] ** 2), expected_barriers)
    for level in tree.levels:
        np.testing.assert_allclose(sol.K[level], k[level], atol=1e-13)
    assert k_representation_check(sol, problem, tree) <= 1e-13


def test_residuals_detect_a_corrupted_k():
    inst = random_instance(11, 3, Filtration.PARTIAL, DriverKind.AFFINE)
    tree = inst.tree
    sol = solve_backward(inst.problem, tree)
    assert sol.diagnostics.flatness_defect <= 1e-10
    gaps = [atom_means(tree, sol.gaps[i], Filtration.PARTIAL, i) for i in range(tree.num_steps)]
    level = int(np.argmax([g.max() for g in gaps]))
    atom = int(np.argmax(gaps[level]))
    assert gaps[level][atom] > 0
    members = tree.atom_members(Filtration.PARTIAL, level)[atom]
    k_values = list(sol.K.values)
    for later in range(level + 1, tree.num_steps + 1):
        bumped = k_values[later].copy()
        width = 4 ** (later - level)
        bumped[(width * members[:, None] + np.arange(width)).ravel()] += 0.1
        k_values[later] = bumped
    corrupted = replace(sol, K=AdaptedProcess(tuple(k_values), Filtration.PARTIAL))
    assert residuals(corrupted, inst.problem, tree).flatness_defect >= 0.1 * gaps[level][atom] - 1e-12


def test_zero_problem_has_zero_diagnostics():
    tree = build_tree(2)
    sol = solve_backward(ReflectedProblem(const(0), Driver.zero(), const(0), Filtration.PARTIAL), tree)
    d = sol.diagnostics
    assert (d.worst_gap, d.flatness_defect, d.identity_defect) == (0, 0, 0)


def test_solution_rows_have_the_export_columns():
    tree = build_tree(1)
    rows = list(solution_rows(solve_backward(hand_problem(0.7), tree)))
    assert len(rows) == 5 and len(rows[0]) == 8
    assert np.isnan(rows[-1][4])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), filtrations, kinds)
def test_solution_invariants(seed, n, filtration, kind):
    inst = random_instance(seed, n, filtration, kind, mu=0.5)
    sol = solve_backward(inst.problem, inst.tree)
    d = sol.diagnostics
    assert d.worst_gap >= -1e-10
    assert d.flatness_defect <= 1e-10
    assert d.identity_defect <= 1e-10
    assert sol.K.measurability_defect(inst.tree) <= 1e-12
    assert sol.K[0][0] == 0
    for level in range(n):
        assert np.all(np.repeat(sol.K[level], 4) <= sol.K[level + 1] + 1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), kinds)
def test_full_information_is_classical_reflection(seed, n, kind):
    inst = random_instance(seed, n, Filtration.FULL, kind, mu=0.5)
    assert solve_backward(inst.problem, inst.tree).value == pytest.approx(
        classical_reflected(inst.problem, inst.tree), abs=1e-12
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), filtrations, kinds)
def test_three_solvers_agree(seed, n, filtration, kind):
    inst = random_instance(seed, n, filtration, kind, mu=0.5)
    a = solve_backward(inst.problem, inst.tree)
    b = solve_picard(inst.problem, inst.tree)
    c = direct_fixed_point(inst.problem, inst.tree)
    for level in inst.tree.levels:
        np.testing.assert_allclose(a.Y[level], b.Y[level], atol=1e-9)
        np.testing.assert_allclose(a.Y[level], c.Y[level], atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), filtrations, kinds)
def test_k_representation(seed, n, filtration, kind):
    inst = random_instance(seed, n, filtration, kind, mu=0.5)
    sol = solve_backward(inst.problem, inst.tree)
    assert k_representation_check(sol, inst.problem, inst.tree) <= 1e-10
    bound = inst.problem.driver.lipschitz * inst.tree.dt * float(np.max(sol.K[n]))
    assert k_representation_check(sol, inst.problem, inst.tree, "solution") <= bound * (1 + 1e-9) + 1e-12
