"""Config-driven command line: ``condrbsde {solve,oracle,compare,sweep} --config FILE``.

The config is an INI-style document::

    [tree]
    num_steps = 2
    horizon = 1.0
    rotation_angle = 30          # degrees; or rotation = [c, s, -s, c]

    [problem]
    filtration = partial
    terminal = linear [0.5, 1.0, 0.0]
    barrier = constant [0.3]
    driver = affine [0.2, 0.1, 0.0]

Optional sections: ``[state]`` (initial, diffusion), ``[control]`` (kind,
grids, tilt/drift/intercept coefficients) and ``[run]`` (methods,
tolerances, seed, sweep levels). Functional names come from
:data:`FUNCTIONALS` and :data:`DRIVERS`.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import oracle
from .control import (
    solve_convex_brr,
    solve_linear_brr,
    solve_strong_brrf,
    solve_zero_sum,
    mixed_value_oracle,
    weak_value_for_control,
)
from .crbsde import k_representation_check, solution_rows, solve_backward, solve_picard
from .errors import NumericalError, SolverError, ValidationError
from .lattice import Filtration, build_tree, rotation_from_angle
from .model import (
    AffinePiece,
    ControlGrid,
    ControlProblem,
    Driver,
    Formulation,
    ReflectedProblem,
    StateModel,
)
from .stopping import optimal_stopping_time, snell_envelope, snell_rows, stopping_time_count

# --- config --------------------------------------------------------------------------------

FUNCTIONALS = {
    # name: (parameter count, builder(params) -> view functional)
    "constant": (1, lambda p: lambda v: np.full(v.num_nodes, p[0])),
    "linear": (3, lambda p: lambda v: p[0] + p[1] * _x(v, 0) + p[2] * _x(v, 1)),
    "abs": (3, lambda p: lambda v: p[0] + p[1] * np.abs(_x(v, 0)) + p[2] * np.abs(_x(v, 1))),
    "call": (2, lambda p: lambda v: p[1] * np.maximum(_x(v, 0) - p[0], 0.0)),
    "put": (2, lambda p: lambda v: p[1] * np.maximum(p[0] - _x(v, 0), 0.0)),
    "drifted": (3, lambda p: lambda v: p[0] + p[1] * v.time + p[2] * _x(v, 0)),
}
DRIVERS = ("zero", "constant", "affine", "max_affine", "sine")
METHODS = ("solve", "picard", "direct", "snell", "control")
CONTROL_KINDS = ("linear_brr", "convex_brr", "strong", "game")

KNOWN_KEYS = {
    "tree": {"num_steps", "horizon", "rotation_angle", "rotation"},
    "problem": {"filtration", "terminal", "barrier", "driver"},
    "state": {"initial", "diffusion"},
    "control": {"kind", "grid", "grid_u", "tilt", "drift", "drift_u", "intercept", "intercept_u", "tol_isaacs"},
    "run": {"methods", "tolerance", "picard_tol", "seed", "instances", "jitter", "sweep_steps", "output"},
}


def _x(view, k: int) -> np.ndarray:
    x = view.x
    return x[:, k] if x.shape[1] > k else np.zeros(view.num_nodes)


@dataclass(frozen=True)
class FunctionalSpec:
    name: str
    params: tuple


@dataclass(frozen=True)
class ControlSpec:
    kind: str
    grid: tuple
    grid_u: tuple = ()
    tilt: float = 0.0
    drift: tuple = (0.0, 0.0)
    drift_u: tuple = (0.0, 0.0)
    intercept: tuple = (0.0, 0.0)
    intercept_u: tuple = (0.0, 0.0)
    tol_isaacs: float = 1e-12


@dataclass(frozen=True)
class RunConfig:
    num_steps: int
    horizon: float
    rotation: np.ndarray
    filtration: Filtration
    terminal: FunctionalSpec
    barrier: FunctionalSpec
    driver: FunctionalSpec
    initial: Optional[tuple] = None
    diffusion: Optional[tuple] = None
    control: Optional[ControlSpec] = None
    methods: tuple = ("solve",)
    tolerance: float = 1e-9
    picard_tol: float = 1e-12
    seed: int = 0
    instances: int = 1
    jitter: float = 0.0
    sweep_steps: tuple = (2, 4, 8)
    output: str = "out"


def _fail(field_name: str, message: str) -> ValidationError:
    return ValidationError(f"{field_name}: {message}", code="CONFIG_FIELD")


def _number_list(text: str, field_name: str) -> tuple:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise _fail(field_name, f"expected a bracketed list, got {text!r}")
    body = text[1:-1].strip()
    try:
        return tuple(float(part) for part in body.split(",")) if body else ()
    except ValueError as exc:
        raise _fail(field_name, f"not a numeric list: {text!r}") from exc


def _number(text: str, field_name: str, kind=float):
    try:
        value = kind(text)
    except ValueError as exc:
        raise _fail(field_name, f"not a valid {kind.__name__}: {text!r}") from exc
    if isinstance(value, float) and not math.isfinite(value):
        raise _fail(field_name, "must be finite")
    return value


def _functional(text: str, field_name: str, catalog) -> FunctionalSpec:
    name, _, rest = text.strip().partition(" ")
    params = _number_list(rest, field_name) if rest.strip() else ()
    if name not in catalog:
        raise _fail(field_name, f"unknown functional {name!r}; choose from {', '.join(catalog)}")
    if isinstance(catalog, dict) and len(params) != catalog[name][0]:
        raise _fail(field_name, f"{name} takes {catalog[name][0]} parameters, got {len(params)}")
    return FunctionalSpec(name, params)


def _driver_spec(text: str) -> FunctionalSpec:
    spec = _functional(text, "problem.driver", DRIVERS)
    expected = {"zero": 0, "constant": 1, "affine": 3, "sine": 2}
    if spec.name in expected and len(spec.params) != expected[spec.name]:
        raise _fail("problem.driver", f"{spec.name} takes {expected[spec.name]} parameters, got {len(spec.params)}")
    if spec.name == "max_affine" and (not spec.params or len(spec.params) % 3):
        raise _fail("problem.driver", "max_affine takes triples (slope_y, slope_z1, intercept)")
    return spec


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config document; errors name the line or the field."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        where = f"line {line}: " if line is not None else ""
        raise ValidationError(f"{where}{exc.message.splitlines()[0]}", code="CONFIG_SYNTAX") from exc
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise _fail(section, "unknown section")
        for key in parser[section]:
            if key not in KNOWN_KEYS[section]:
                raise _fail(f"{section}.{key}", "unknown key")
    for section in ("tree", "problem"):
        if section not in parser:
            raise _fail(section, "missing section")
    tree = parser["tree"]
    if "num_steps" not in tree:
        raise _fail("tree.num_steps", "missing")
    num_steps = _number(tree["num_steps"], "tree.num_steps", int)
    if num_steps < 1:
        raise _fail("tree.num_steps", "num_steps must be ≥ 1")
    horizon = _number(tree.get("horizon", "1.0"), "tree.horizon")
    if horizon <= 0:
        raise _fail("tree.horizon", "horizon must be positive")
    if "rotation" in tree and "rotation_angle" in tree:
        raise _fail("tree.rotation", "give either rotation or rotation_angle")
    if "rotation" in tree:
        entries = _number_list(tree["rotation"], "tree.rotation")
        if len(entries) != 4:
            raise _fail("tree.rotation", "expected four entries (row-major 2x2)")
        rotation = np.array(entries).reshape(2, 2)
        if np.max(np.abs(rotation @ rotation.T - np.eye(2))) > 1e-12:
            raise _fail("tree.rotation", "matrix is not orthogonal")
    else:
        rotation = rotation_from_angle(math.radians(_number(tree.get("rotation_angle", "0"), "tree.rotation_angle")))

    problem = parser["problem"]
    for key in ("terminal", "barrier", "driver"):
        if key not in problem:
            raise _fail(f"problem.{key}", "missing")
    try:
        filtration = Filtration.parse(problem.get("filtration", "full"))
    except ValueError as exc:
        raise _fail("problem.filtration", str(exc)) from exc
    config = RunConfig(
        num_steps=num_steps,
        horizon=horizon,
        rotation=rotation,
        filtration=filtration,
        terminal=_functional(problem["terminal"], "problem.terminal", FUNCTIONALS),
        barrier=_functional(problem["barrier"], "problem.barrier", FUNCTIONALS),
        driver=_driver_spec(problem["driver"]),
    )

    if "state" in parser:
        state = parser["state"]
        initial = _number_list(state.get("initial", "[0, 0]"), "state.initial")
        diffusion = _number_list(state.get("diffusion", "[1, 0, 0, 1]"), "state.diffusion")
        if len(diffusion) != 2 * len(initial) or not initial:
            raise _fail("state.diffusion", "expected dim x 2 entries (row-major)")
        config = replace(config, initial=initial, diffusion=diffusion)

    if "control" in parser:
        config = replace(config, control=_control_spec(parser["control"], config))

    if "run" in parser:
        config = _run_spec(parser["run"], config)
    return config


def _control_spec(section, config: RunConfig) -> ControlSpec:
    kind = section.get("kind", "linear_brr").strip()
    if kind not in CONTROL_KINDS:
        raise _fail("control.kind", f"choose from {', '.join(CONTROL_KINDS)}")
    if "grid" not in section:
        raise _fail("control.grid", "missing")
    grid = _number_list(section["grid"], "control.grid")
    if not grid:
        raise _fail("control.grid", "control grid must not be empty")
    spec = ControlSpec(
        kind=kind,
        grid=grid,
        grid_u=_number_list(section.get("grid_u", "[0]"), "control.grid_u"),
        tilt=_number(section.get("tilt", "0"), "control.tilt"),
        drift=_number_list(section.get("drift", "[0, 0]"), "control.drift"),
        drift_u=_number_list(section.get("drift_u", "[0, 0]"), "control.drift_u"),
        intercept=_number_list(section.get("intercept", "[0, 0]"), "control.intercept"),
        intercept_u=_number_list(section.get("intercept_u", "[0, 0]"), "control.intercept_u"),
        tol_isaacs=_number(section.get("tol_isaacs", "1e-12"), "control.tol_isaacs"),
    )
    if spec.tol_isaacs <= 0:
        raise _fail("control.tol_isaacs", "must be positive")
    for name in ("intercept", "intercept_u"):
        if len(getattr(spec, name)) != 2:
            raise _fail(f"control.{name}", "expected [linear, quadratic] coefficients")
    if kind in ("strong", "game"):
        if config.initial is None:
            raise _fail("control.kind", f"{kind} control needs a [state] section")
        for name in ("drift", "drift_u"):
            if len(getattr(spec, name)) != len(config.initial):
                raise _fail(f"control.{name}", "needs one entry per state component")
        if config.filtration is not Filtration.FULL:
            raise _fail("problem.filtration", f"{kind} control needs the full filtration")
    if kind == "convex_brr" and config.driver.name != "max_affine":
        raise _fail("problem.driver", "convex_brr needs a max_affine driver")
    if kind == "linear_brr" and config.driver.name not in ("affine", "constant", "zero"):
        raise _fail("problem.driver", "linear_brr needs an affine driver")
    return spec


def _run_spec(section, config: RunConfig) -> RunConfig:
    methods = tuple(m.strip() for m in section.get("methods", "solve").split(",") if m.strip())
    for method in methods:
        if method not in METHODS:
            raise _fail("run.methods", f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if "control" in methods and config.control is None:
        raise _fail("run.methods", "the control method needs a [control] section")
    values = {
        "tolerance": _number(section.get("tolerance", "1e-9"), "run.tolerance"),
        "picard_tol": _number(section.get("picard_tol", "1e-12"), "run.picard_tol"),
    }
    for key, value in values.items():
        if value <= 0:
            raise _fail(f"run.{key}", "tolerances must be positive")
    instances = _number(section.get("instances", "1"), "run.instances", int)
    if instances < 1:
        raise _fail("run.instances", "must be >= 1")
    jitter = _number(section.get("jitter", "0"), "run.jitter")
    if jitter < 0:
        raise _fail("run.jitter", "must be >= 0")
    steps = tuple(int(s) for s in _number_list(section.get("sweep_steps", "[2, 4, 8]"), "run.sweep_steps"))
    if not steps or min(steps) < 1:
        raise _fail("run.sweep_steps", "levels must be >= 1")
    return replace(
        config, methods=methods, seed=_number(section.get("seed", "0"), "run.seed", int), instances=instances,
        jitter=jitter, sweep_steps=steps, output=section.get("output", "out").strip(), **values,
    )


# --- problem construction ------------------------------------------------------------------


def _driver(spec: FunctionalSpec, rotation: np.ndarray, control: Optional[ControlSpec]) -> Driver:
    p = spec.params
    controlled = control is not None and control.kind != "game" and any(control.intercept)
    game = control is not None and control.kind == "game"

    def extra(view, c):
        if game:
            u, v = c
            return (control.intercept[0] * v + control.intercept[1] * v**2
                    + control.intercept_u[0] * u + control.intercept_u[1] * u**2)
        return control.intercept[0] * c + control.intercept[1] * c**2

    with_control = controlled or game
    if spec.name == "zero" and not with_control:
        return Driver.zero()
    if spec.name in ("zero", "constant"):
        base = p[0] if p else 0.0
        if not with_control:
            return Driver.constant(base)
        return Driver.constant(lambda view, c: base + extra(view, c), controlled=True)
    if spec.name == "affine":
        if not with_control:
            return Driver.affine(p[0], p[1], p[2])
        return Driver.affine(p[0], p[1], lambda view, c: p[2] + extra(view, c), controlled=True)
    if spec.name == "max_affine":
        pieces = []
        for k in range(0, len(p), 3):
            slope_z = tuple(p[k + 1] * rotation[0])
            if with_control:
                pieces.append(AffinePiece(p[k], slope_z, lambda view, c, c0=p[k + 2]: c0 + extra(view, c)))
            else:
                pieces.append(AffinePiece(p[k], slope_z, p[k + 2]))
        return Driver.max_affine(pieces, controlled=with_control)
    mu, c0 = p
    direction = rotation[0]

    def rule(view, y, z, c):
        value = 0.5 * mu * (np.sin(y) + np.tanh(z @ direction)) + c0
        return value + extra(view, c) if with_control else value

    return Driver.general(rule, abs(mu), controlled=with_control)


def _state(config: RunConfig) -> Optional[StateModel]:
    if config.initial is None:
        return None
    d = len(config.initial)
    sigma = np.array(config.diffusion).reshape(d, 2)
    control = config.control
    if control is None or control.kind not in ("strong", "game"):
        return StateModel(config.initial, sigma)
    drift_v, drift_u = np.array(control.drift), np.array(control.drift_u)
    if control.kind == "game":
        def drift(view, c):
            return np.outer(c[1], drift_v) + np.outer(c[0], drift_u)
    else:
        def drift(view, c):
            return np.outer(c, drift_v)
    bound = max(abs(x) for x in control.grid + control.grid_u) * (np.abs(drift_v).sum() + np.abs(drift_u).sum())
    return StateModel(config.initial, sigma, drift=drift, drift_bound=bound + 1e-12)


def instance_configs(config: RunConfig) -> list:
    """The configured instance plus ``instances - 1`` jittered copies drawn from ``seed``."""
    rng = np.random.default_rng(config.seed)
    out = [config]
    for _ in range(config.instances - 1):
        shift = rng.uniform(0.0, config.jitter)
        terminal = FunctionalSpec(config.terminal.name, _shift(config.terminal, shift))
        barrier = FunctionalSpec(config.barrier.name, _shift(config.barrier, -shift))
        out.append(replace(config, terminal=terminal, barrier=barrier))
    return out


def _shift(spec: FunctionalSpec, amount: float) -> tuple:
    # the level parameter is first for every catalog entry except options (strike, scale)
    if spec.name in ("call", "put"):
        return (spec.params[0] - amount if spec.name == "call" else spec.params[0] + amount, spec.params[1])
    return (spec.params[0] + amount,) + spec.params[1:]


def build_problem(config: RunConfig):
    """``(tree, reflected problem, control problem or None)`` from a config."""
    tree = build_tree(config.num_steps, config.horizon, config.rotation)
    terminal = FUNCTIONALS[config.terminal.name][1](config.terminal.params)
    barrier = FUNCTIONALS[config.barrier.name][1](config.barrier.params)
    state = _state(config)
    base = ReflectedProblem(terminal, _driver(config.driver, config.rotation, None), barrier, config.filtration,
                            None if state is None else state.driftless())
    control = config.control
    if control is None:
        return tree, base, None
    formulation = {
        "linear_brr": Formulation.WEAK_PARTIAL,
        "convex_brr": Formulation.WEAK_PARTIAL,
        "strong": Formulation.STRONG_FULL,
        "game": Formulation.ZERO_SUM,
    }[control.kind]
    tilt = None
    if formulation is Formulation.WEAK_PARTIAL and control.tilt:
        tilt = lambda view, c, k=control.tilt: k * c  # noqa: E731
    controlled = ControlProblem(
        terminal, _driver(config.driver, config.rotation, control), barrier,
        state if state is not None else StateModel((0.0, 0.0), np.eye(2)),
        config.filtration, formulation, tilt,
    )
    return tree, base, controlled


# --- running -------------------------------------------------------------------------------


SUMMARY_HEADER = ("instance", "method", "N", "grid_size", "value", "oracle_value", "gap")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _grid_size(config: RunConfig) -> int:
    if config.control is None:
        return 0
    if config.control.kind == "game":
        return len(config.control.grid) * len(config.control.grid_u)
    return len(config.control.grid)


def _control_rows(config: RunConfig, tree, problem: ControlProblem):
    spec = config.control
    grid = ControlGrid(spec.grid)
    n = config.num_steps
    if spec.kind == "linear_brr":
        result = solve_linear_brr(problem, tree, grid)
        reference = oracle.brute_force_controls(problem, tree, grid)[0]
        rows = [("linear_brr", result.value, reference)]
        rows.append(("linear_brr_mixed", result.value, mixed_value_oracle(problem, tree, grid)))
        rows.append(("linear_brr_feedback", weak_value_for_control(result.feedback_control(), problem, tree), result.value))
        feedback = list(result.feedback_rows())
    elif spec.kind == "convex_brr":
        result = solve_convex_brr(problem, tree, grid)
        rows = [
            ("convex_brr", result.value, oracle.brute_force_controls(problem, tree, grid)[0]),
            ("convex_brr_dual", result.value, oracle.brute_force_dual_selectors(problem, tree, grid)),
        ]
        feedback = []
    elif spec.kind == "strong":
        result = solve_strong_brrf(problem, tree, grid)
        rows = [("strong_brrf", result.value, oracle.brute_force_controls(problem, tree, grid)[0])]
        feedback = [
            (i, node, result.grid.values[k]) for i, idx in enumerate(result.hamiltonian.argmax) for node, k in enumerate(idx)
        ]
    else:
        grid_u = ControlGrid(spec.grid_u)
        result = solve_zero_sum(problem, tree, grid_u, grid, spec.tol_isaacs)
        rows = [("zero_sum", result.value, oracle.brute_force_game(problem, tree, grid_u, grid))]
        u, v = result.saddle_controls()
        feedback = [(i, node, u[i][node], v[i][node]) for i in range(n) for node in range(4**i)]
    return rows, feedback


def _solve_instance(config: RunConfig, with_oracle: bool):
    """Every requested method on one instance; returns summary rows and auxiliary tables."""
    tree, problem, controlled = build_problem(config)
    n, grid_size = config.num_steps, _grid_size(config)
    solution = solve_backward(problem, tree)
    rows, tables = [], {"solution": list(solution_rows(solution))}
    reference = oracle.direct_fixed_point(problem, tree).value if with_oracle else math.nan
    rows.append(("solve", n, 0, solution.value, reference))
    d = solution.diagnostics
    tables["diagnostics"] = [
        ("worst_gap", d.worst_gap), ("flatness_defect", d.flatness_defect), ("identity_defect", d.identity_defect),
    ]
    tables["diagnostics"] += [
        ("k_representation", k_representation_check(solution, problem, tree)),
        ("k_representation_plug_in", k_representation_check(solution, problem, tree, "solution")),
    ]
    if "picard" in config.methods:
        picard = solve_picard(problem, tree, config.picard_tol)
        rows.append(("picard", n, 0, picard.value, solution.value))
        ratios = picard.diagnostics.contraction_ratios
        tables["diagnostics"] += [
            ("picard_iterations", picard.diagnostics.picard_iterations),
            ("picard_max_ratio", max(ratios) if ratios else math.nan),
        ]
    if "direct" in config.methods:
        rows.append(("direct", n, 0, oracle.direct_fixed_point(problem, tree).value, solution.value))
    if "snell" in config.methods:
        values, snell_solution = snell_envelope(problem, tree)
        tau = optimal_stopping_time(snell_solution, problem)
        tables["stopping"] = list(snell_rows(values, tau))
        brute = math.nan
        if with_oracle and stopping_time_count(tree, config.filtration) <= oracle.ENUMERATION_GUARD:
            brute = float(oracle.brute_force_stopping(problem, tree)[0][0])
        rows.append(("snell", n, 0, float(values[0][0]), brute))
    if "control" in config.methods:
        control_rows, feedback = _control_rows(config, tree, controlled)
        tables["feedback"] = feedback
        rows += [(name, n, grid_size, value, ref) for name, value, ref in control_rows]
    return [(m, steps, g, v, ref, abs(v - ref) if not math.isnan(ref) else math.nan) for m, steps, g, v, ref in rows], tables


def _sweep_row(config: RunConfig, steps: int):
    tree, problem, _ = build_problem(replace(config, num_steps=steps))
    solution = solve_backward(problem, tree)
    k_rep = k_representation_check(solution, problem, tree)
    plug_in = k_representation_check(solution, problem, tree, "solution")
    d = solution.diagnostics
    return steps, solution.value, k_rep, plug_in, d.identity_defect, d.flatness_defect, d.worst_gap


def run(config: RunConfig, command: str = "compare", out: Optional[Path] = None, threads: int = 1) -> int:
    """Execute ``command`` and write its CSV reports under ``out``; returns the exit status."""
    out = Path(out if out is not None else config.output)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    instances = instance_configs(config)
    failed = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        if command == "sweep":
            rows = list(pool.map(lambda s: _sweep_row(config, s), config.sweep_steps))
            write_csv(out / "sweep.csv", (
                "N", "value", "k_representation", "k_representation_plug_in", "identity_defect",
                "flatness_defect", "worst_gap"), rows)
        else:
            with_oracle = command in ("oracle", "compare")
            results = list(pool.map(lambda c: _solve_instance(c, with_oracle), instances))
            summary = [(k,) + row for k, (rows, _) in enumerate(results) for row in rows]
            if command == "oracle":
                summary = [row for row in summary if not math.isnan(row[5])]
            write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
            tables = results[0][1]
            if command in ("solve", "compare"):
                write_csv(out / "solution.csv",
                          ("time_index", "node_id", "g_atom_id", "Y", "Z1", "Z2", "K", "constraint_gap"),
                          tables["solution"])
                write_csv(out / "diagnostics.csv", ("quantity", "value"), tables["diagnostics"])
                if "stopping" in tables:
                    write_csv(out / "stopping.csv", ("time_index", "g_atom_id", "snell_value", "stop"),
                              tables["stopping"])
                if tables.get("feedback"):
                    width = len(tables["feedback"][0])
                    header = ("time_index", "atom_or_node", "control") if width == 3 else (
                        "time_index", "node_id", "control_u", "control_v")
                    write_csv(out / "feedback.csv", header, tables["feedback"])
            if command in ("oracle", "compare"):
                failed = [row for row in summary if not math.isnan(row[6]) and row[6] > config.tolerance]
                for row in failed:
                    print(f"error ORACLE_GAP: gap {row[6]:.3g} above tolerance for {row[1]} (instance {row[0]})",
                          file=sys.stderr)
    (out / "timing.txt").write_text(f"wall_seconds {time.perf_counter() - started:.3f}\n")
    return NumericalError.exit_status if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="condrbsde", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=("solve", "oracle", "compare", "sweep"))
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int)
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config.read_text())
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        return run(config, args.command, args.out, args.threads)
    except SolverError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
