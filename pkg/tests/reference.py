"""Independent reference schemes used by the tests (no solver code is reused)."""
import numpy as np

from condrbsde.lattice import CHILD_SIGNS
from condrbsde.model import LevelView, eval_driver


def classical_reflected(problem, tree):
    """Pointwise ``Y_i = max(S_i, y)`` with ``y = E[Y_{i+1}] + f(y, z) dt`` solved by Newton-free bisection.

    Written node by node with plain loops so it shares nothing with the
    vectorised solvers; ``z`` is obtained by regression on the increments.
    """
    n_steps, dt = tree.num_steps, tree.dt
    views = [LevelView(tree, i, problem.filtration) for i in tree.levels]
    y_next = np.asarray(problem.terminal(views[-1]), dtype=float)
    dw_rot = CHILD_SIGNS * np.sqrt(dt)
    for i in reversed(range(n_steps)):
        barrier = np.asarray(problem.barrier(views[i]), dtype=float)
        y_now = np.empty(4**i)
        for node in range(4**i):
            kids = y_next[4 * node: 4 * node + 4]
            mean = kids.mean()
            z = ((kids[:, None] * dw_rot).mean(axis=0) / dt) @ tree.rotation
            y_now[node] = max(barrier[node], _solve_scalar(problem, views[i], node, mean, z, dt))
        y_next = y_now
    return float(y_next[0])


def _solve_scalar(problem, view, node, mean, z, dt):
    def residual(y):
        ys = np.full(view.num_nodes, y)
        zs = np.broadcast_to(z, (view.num_nodes, 2))
        return y - mean - eval_driver(problem.driver, view, ys, zs)[node] * dt

    width = 1.0
    lo, hi = mean - width, mean + width
    while residual(lo) > 0:
        lo -= width
        width *= 2
    while residual(hi) < 0:
        hi += width
        width *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def mean_reflection_k(expected_terminal, expected_barriers):
    """``K_N - K_s = max_{u >= s} (E[xi] - E[S_u])^-`` for a zero driver under trivial information."""
    distance = expected_terminal - np.asarray(expected_barriers)
    running = np.minimum.accumulate(distance[::-1])[::-1]
    tail = np.maximum(0.0, -running)
    return tail[0] - tail
