"""Executable convergence theory for the relaxed primal-dual solver.

The solver with dual relaxation ``a21`` and primal relaxation ``c21`` reads::

    q_n     = prox_{G^*}^sigma(y_n + sigma L (p_{n-1} + c21/a21 (p_{n-1} - x_{n-1})))
    y_{n+1} = y_n + a21 (q_n - y_n)
    p_n     = prox_F^tau(x_n - tau L^* y_{n+1})
    x_{n+1} = x_n + c21 (p_n - x_n)

and converges for ``a21, c21 in (0, 2)`` and ``sigma tau |L|^2 < K(a21, c21)``.
This module evaluates the step-size bound, the two quadratic forms ``Q1``
(a Lyapunov function) and ``Q2`` (its guaranteed decrease), and turns the
resulting inequalities into checks on actual runs of the engine.

Iterates are indexed from ``n = 0`` with ``x_0 = p_{-1} = x_{-1} = 0`` and
``y_0 = 0``, which is exactly the engine's zero state, so every inequality
below is checked from the first step on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .scheme import (Problem, SchemeMatrices, SolverState, fixed_point_residual,
                     kkt_residual, preset_new_solver, preset_pdhg, run, step)

__all__ = [
    "ConvergenceFailure",
    "ConvergentParams",
    "QuadFormEval",
    "k_expr",
    "bound_K",
    "estimation_inequalities",
    "eval_Q",
    "relaxed_iterates",
    "lyapunov_trace",
    "fejer_check",
    "lagrangian",
    "ergodic_gap_check",
    "strong_convergence_check",
    "reference_solution",
    "write_trace_csv",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("iter", "Q1", "Q2_displacement", "objective", "fixed_point_residual")


class ConvergenceFailure(RuntimeError):
    """A reference solve did not reach its residual gate."""


def _check_relax(a21, c21):
    if not (0 < a21 < 2 and 0 < c21 < 2):
        raise ValueError(f"relaxation parameters must lie in (0, 2), got a21={a21}, c21={c21}")


def k_expr(a, c):
    """``a^2 (2 - a)(2 - c) / (a + c - a c)^2`` without range checks.

    Written with plain arithmetic so it also accepts complex arguments
    (used for complex-step derivatives).
    """
    # a + c - ac rewritten as a(2 - c) + (c - a): no cancellation near a = c = 2,
    # and both ratios are exactly 1 when a == c
    s = a * (2 - c) + (c - a)
    return (a * (2 - a) / s) * (a * (2 - c) / s)


def bound_K(a21: float, c21: float) -> float:
    """Right-hand side ``K`` of the step-size condition ``sigma tau |L|^2 < K``."""
    _check_relax(a21, c21)
    return float(k_expr(a21, c21))


def estimation_inequalities(a21: float, c21: float):
    """Return ``(a21 + c21 > a21 c21, a21 c21 (2-a21)(2-c21) / (a21 + c21 - a21 c21)^2)``."""
    _check_relax(a21, c21)
    s = a21 * (2 - c21) + (c21 - a21)
    return bool(s > 0), (a21 * (2 - c21) / s) * (c21 * (2 - a21) / s)


@dataclass(frozen=True)
class ConvergentParams:
    a21: float
    c21: float
    sigma: float
    tau: float

    def __post_init__(self):
        _check_relax(self.a21, self.c21)
        if not (self.sigma > 0 and self.tau > 0):
            raise ValueError("step sizes must be positive")

    @property
    def K(self) -> float:
        return bound_K(self.a21, self.c21)

    def is_valid(self, L_norm: float) -> bool:
        return self.sigma * self.tau * L_norm ** 2 < self.K

    def validate(self, L_norm: float) -> "ConvergentParams":
        if not self.is_valid(L_norm):
            raise ValueError(f"sigma tau |L|^2 = {self.sigma * self.tau * L_norm ** 2:.6g} "
                             f"is not below K = {self.K:.6g}")
        return self

    def matrices(self) -> SchemeMatrices:
        return preset_new_solver(self.sigma, self.tau, self.a21, self.c21)

    def constants(self, L_norm: float):
        """Coercivity constants ``(C1, D1, C2, D2)`` of ``Q1`` and ``Q2``."""
        a, c, s, t = self.a21, self.c21, self.sigma, self.tau
        st = s * t * L_norm ** 2
        num1 = a - c * st
        num2 = a * a * (2 - a) * (2 - c) - (a + c - a * c) ** 2 * st
        return (num1 / (2 * t * a * c), num1 / (2 * s * a * a),
                num2 / (2 * t * a * a * (2 - a)), num2 / (2 * s * a * a * (2 - c)))


@dataclass(frozen=True)
class QuadFormEval:
    Q1: float
    Q2: float
    C1: float
    D1: float
    C2: float
    D2: float
    dx_sq: float
    dy_sq: float

    def bounds_hold(self, tol: float = 1e-12) -> bool:
        """``Q_i >= C_i |dx|^2`` and ``Q_i >= D_i |dy|^2`` for ``i = 1, 2``."""
        scale = tol * (1.0 + abs(self.Q1) + abs(self.Q2))
        return (self.Q1 >= self.C1 * self.dx_sq - scale and self.Q1 >= self.D1 * self.dy_sq - scale
                and self.Q2 >= self.C2 * self.dx_sq - scale and self.Q2 >= self.D2 * self.dy_sq - scale)


def _as_blocks(ops, dy):
    if not isinstance(ops, (list, tuple)):
        return [ops], [dy]
    return list(ops), list(dy)


def _sq(blocks):
    return sum(float(np.vdot(b, b)) for b in blocks)


def _forms(params: ConvergentParams, ops, dx, dys):
    a, c, s, t = params.a21, params.c21, params.sigma, params.tau
    dx = np.asarray(dx, dtype=float)
    nx, ny = float(np.vdot(dx, dx)), _sq(dys)
    cross = sum(float(np.vdot(dy, op.forward(dx))) for op, dy in zip(ops, dys))
    q1 = nx / (2 * t * c) + ny / (2 * s * a) - cross / a
    q2 = (2 - c) / (2 * t) * nx + (2 - a) / (2 * s) * ny - (a + c - a * c) / a * cross
    return q1, q2, nx, ny


def eval_Q(params: ConvergentParams, L, dx, dy, L_norm: float | None = None) -> QuadFormEval:
    """Evaluate ``Q1(dx, dy)``, ``Q2(dx, dy)`` and the coercivity constants.

    ``L`` is one operator or a list of operators (a product-space dual with
    ``dy`` a matching list).  ``L_norm`` defaults to the stacked norm bound.
    """
    ops, dys = _as_blocks(L, dy)
    if L_norm is None:
        L_norm = math.sqrt(sum(op.norm_bound ** 2 for op in ops))
    params.validate(L_norm)
    q1, q2, nx, ny = _forms(params, ops, dx, dys)
    return QuadFormEval(q1, q2, *params.constants(L_norm), nx, ny)


def relaxed_iterates(problem: Problem, params: ConvergentParams, n_steps: int,
                     state: SolverState | None = None):
    """Run the relaxed solver through the engine and yield its sequences.

    Yields ``(n, x_n, y_{n+1}, p_n, q_n, state)`` for ``n = 0 .. n_steps-1``;
    ``y`` and ``q`` are lists over dual blocks and ``state`` is the engine
    state after step ``n``.
    """
    mats = params.matrices()
    if state is None:
        state = SolverState.zeros(problem, mats)
    for n in range(int(n_steps)):
        tape = []
        x_n = state.primal[1]
        state = step(problem, mats, state, tape)
        rec = tape[0]
        yield (n, x_n, [d[1] for d in state.dual], rec.primal_mid[0],
               [m[0] for m in rec.dual_mid], state)


def _diff(a, b):
    return [u - v for u, v in zip(a, b)]


def lyapunov_trace(problem: Problem, params: ConvergentParams, n_steps: int, reference,
                   state: SolverState | None = None) -> list[dict]:
    """Per-step Lyapunov quantities of a run.

    Row ``n`` (``n = 0 .. n_steps-1``) holds ``Q1(x_n - x*, y_{n+1} - y*)``,
    ``Q2(p_n - x_n, q_{n+1} - y_{n+1})``, the objective at ``x_n`` (summed over a batch) and the
    engine's fixed-point residual before step ``n``.  One extra engine step
    is run to obtain ``q_{n+1}`` for the last row.
    """
    x_ref, y_ref = reference
    x_ref = np.asarray(x_ref, dtype=float)
    y_ref = [np.asarray(y, dtype=float) for y in y_ref]
    mats = params.matrices()
    if state is None:
        state = SolverState.zeros(problem, mats)
    prev_state = state
    prev = None
    rows = []
    for item in relaxed_iterates(problem, params, n_steps + 1, state):
        n, x_n, y_next, p_n, q_n, new_state = item
        if prev is not None:
            m, x_m, y_m1, p_m, _, st_m = prev
            q1, _, _, _ = _forms(params, problem.ops, x_m - x_ref, _diff(y_m1, y_ref))
            _, q2, _, _ = _forms(params, problem.ops, p_m - x_m, _diff(q_n, y_m1))
            rows.append({
                "iter": m, "Q1": q1, "Q2_displacement": q2,
                "objective": float(np.sum(problem.objective(x_m))),
                "fixed_point_residual": fixed_point_residual(problem, mats, st_m),
            })
        prev = (n, x_n, y_next, p_n, q_n, prev_state)
        prev_state = new_state
    return rows


def fejer_check(problem: Problem, params: ConvergentParams, n_steps: int, reference,
                state: SolverState | None = None, residual_gate: float = 1e-6,
                rel_tol: float = 1e-8, L_norm: float | None = None):
    """Check ``Q1_{n+1} - Q1_n <= -Q2_n + tol`` along a run.

    ``tol = rel_tol * (1 + Q1_0)``.  The reference must pass the same
    residual gate as :func:`reference_solution` (steps ``0.95 / |L|``).
    Returns ``(ok, rows)`` where each row also records the per-step
    ``slack`` (right minus left side).
    """
    x_ref, y_ref = reference
    s = 0.95 / (L_norm or problem.stacked().norm_bound)
    res = float(np.max(kkt_residual(problem, x_ref, y_ref, s, s)))
    if not res <= residual_gate:
        raise ValueError(f"reference residual {res:.3g} exceeds gate {residual_gate:g}")
    rows = lyapunov_trace(problem, params, n_steps + 1, reference, state)
    tol = rel_tol * (1.0 + abs(rows[0]["Q1"]))
    ok = True
    for cur, nxt in zip(rows[:-1], rows[1:]):
        cur["slack"] = -cur["Q2_displacement"] - (nxt["Q1"] - cur["Q1"])
        ok &= cur["slack"] >= -tol
    rows = rows[:-1]
    return bool(ok), rows


def lagrangian(problem: Problem, x, ys) -> float:
    """``<L x, y> + F(x) - G^*(y)``; ``-inf`` when ``y`` is outside ``dom G^*``."""
    return float(problem.lagrangian(x, ys))


def ergodic_gap_check(problem: Problem, params: ConvergentParams, N: int, probe_x, probe_y,
                      state: SolverState | None = None) -> dict:
    """Lagrangian gap bounds after ``N`` iterations at a probe point.

    Returns the ergodic gap ``L(mean p, y) - L(x, mean q)``, the best-iterate
    gap ``min_n L(p_n, y) - L(x, q_{n+1})`` and the common bound
    ``Q1(x_0 - x, y_1 - y) / N``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    probe_x = np.asarray(probe_x, dtype=float)
    probe_y = [np.asarray(y, dtype=float) for y in probe_y]
    p_sum = None
    q_sum = None
    best = math.inf
    q1_0 = None
    p_prev = None
    for n, x_n, y_next, p_n, q_n, _ in relaxed_iterates(problem, params, N + 1, state):
        if n == 0:
            q1_0, _, _, _ = _forms(params, problem.ops, x_n - probe_x, _diff(y_next, probe_y))
        else:
            # q_n pairs with p_{n-1}
            gap = lagrangian(problem, p_prev, probe_y) - lagrangian(problem, probe_x, q_n)
            best = min(best, gap)
            q_sum = list(q_n) if q_sum is None else [a + b for a, b in zip(q_sum, q_n)]
        if n < N:
            p_sum = p_n.copy() if p_sum is None else p_sum + p_n
        p_prev = p_n
    p_avg = p_sum / N
    q_avg = [q / N for q in q_sum]
    ergodic = lagrangian(problem, p_avg, probe_y) - lagrangian(problem, probe_x, q_avg)
    return {"ergodic": ergodic, "best": best, "rhs": q1_0 / N, "Q1_start": q1_0}


def strong_convergence_check(problem: Problem, params: ConvergentParams, n_steps: int,
                             reference, mu: float) -> dict:
    """Partial sums of ``|p_n - x*|^2`` against ``Q1(x_0 - x*, y_1 - y*) / mu``.

    Meant for a strongly convex ``F`` with modulus ``mu``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    x_ref, y_ref = reference
    x_ref = np.asarray(x_ref, dtype=float)
    total = 0.0
    sums = []
    dist = []
    bound = None
    for n, x_n, y_next, p_n, _, _ in relaxed_iterates(problem, params, n_steps):
        if n == 0:
            q1, _, _, _ = _forms(params, problem.ops, x_n - x_ref, _diff(y_next, y_ref))
            bound = q1 / mu
        d = float(np.vdot(p_n - x_ref, p_n - x_ref))
        total += d
        sums.append(total)
        dist.append(math.sqrt(d))
    return {"partial_sums": sums, "distances": dist, "bound": bound}


def reference_solution(problem: Problem, iters: int = 10_000, tol: float = 1e-6,
                       max_doublings: int = 3, L_norm: float | None = None,
                       step_ratio: float = 1.0):
    """Long PDHG run (``theta = 1``, ``sigma = tau = 0.95 / |L|``) gated on the residual.

    The iteration budget doubles (up to ``2**max_doublings`` times the
    initial count) until the residual at the output is at most ``tol``.
    Returns ``(x, ys, residual)``; batched problems are gated on the worst
    batch entry.

    ``step_ratio`` rebalances the steps to ``tau / sigma = step_ratio`` at a
    fixed product ``sigma * tau``.  The residual is always measured with
    ``sigma = tau = 0.95 / |L|``, so the gate means the same thing for any
    ratio.
    """
    if L_norm is None:
        L_norm = problem.stacked().norm_bound
    if not step_ratio > 0:
        raise ValueError("step_ratio must be positive")
    step_len = 0.95 / L_norm
    root = math.sqrt(step_ratio)
    mats = preset_pdhg(step_len / root, step_len * root, 1.0)
    state = SolverState.zeros(problem, mats)
    done = 0
    budget = int(iters)
    res = math.inf
    for _ in range(max_doublings + 1):
        state = run(problem, mats, budget - done, state)
        done = budget
        r = kkt_residual(problem, state.x, state.y, step_len, step_len,
                         axis=None if not problem.batch_shape else -1)
        res = float(np.max(r))
        if res <= tol:
            return state.x, state.y, res
        budget *= 2
    raise ConvergenceFailure(
        f"reference residual {res:.3e} above {tol:g} after {done} iterations")


def write_trace_csv(path, rows) -> None:
    """Write trace rows with the fixed column set; non-finite values print as ``nan``/``inf``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [_fmt(r[c]) for c in TRACE_COLUMNS[1:]])


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)
