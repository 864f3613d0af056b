"""Matrix-parametrized primal-dual iteration engine.

One engine step updates, for every dual block ``i``, the dual memory::

    z = (L_i x^1, y_i^2, ..., y_i^M)
    w = (B_i kron Id) z
    w^1 <- prox_{G_i^*}^{sigma_i}(w^1)
    y_i <- (A_i kron Id) w

and then the primal memory::

    z = (sum_i L_i^* y_i^1, x^2, ..., x^N)
    u = (D kron Id) z
    u^1 <- prox_F^tau(u^1)
    x <- (C kron Id) u

so each step applies every ``L_i`` and every ``L_i^*`` exactly once.  The
presets below pick matrices that reproduce PDHG, primal-dual
Douglas-Rachford, the relaxed solver with parameters ``(a21, c21)`` and a
forward-backward-forward splitting (two engine steps per iteration).

Arrays are stacked along a leading memory axis: the primal state has shape
``(N, *batch, *domain)`` and dual block ``i`` has shape
``(M, *batch, *range_i)``.  The *lead* variables, used for outputs and
residuals, are the last memory slots ``x^N`` and ``y_i^M``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .linops import StackedOp
from .prox import ProxFn
from .tensor import DimensionError

__all__ = [
    "Problem",
    "SchemeMatrices",
    "SolverState",
    "StepRecord",
    "step",
    "run",
    "preset_pdhg",
    "preset_dr",
    "preset_new_solver",
    "preset_fbf",
    "fixed_point_residual",
    "kkt_residual",
    "fixed_point_conditions",
    "fixed_point_state",
]


@dataclass
class Problem:
    """``min_x F(x) + sum_i G_i(L_i x)``.

    ``blocks`` is a list of ``(G_i, L_i)`` pairs.  The functions may carry
    batched data (for example a stack of right-hand sides ``b``), in which
    case states carry the same leading batch axes.
    """

    F: ProxFn
    blocks: list
    batch_shape: tuple = ()

    def __post_init__(self):
        self.blocks = [(g, op) for g, op in self.blocks]
        self.batch_shape = tuple(int(n) for n in self.batch_shape)
        if not self.blocks:
            raise DimensionError("a problem needs at least one (G, L) block")
        dom = self.blocks[0][1].domain_shape
        for _, op in self.blocks:
            if op.domain_shape != dom:
                raise DimensionError("all L_i must share the primal domain")

    @property
    def domain_shape(self):
        return self.blocks[0][1].domain_shape

    @property
    def ops(self) -> list:
        return [op for _, op in self.blocks]

    def stacked(self) -> StackedOp:
        return StackedOp(self.ops)

    def _axes(self, shape):
        return tuple(range(-len(shape), 0))

    def objective(self, x):
        """``F(x) + sum_i G_i(L_i x)`` per batch entry (scalar if unbatched)."""
        x = np.asarray(x, dtype=float)
        ax = self._axes(self.domain_shape)
        val = self.F.value(x, axis=ax)
        for g, op in self.blocks:
            val = val + g.value(op.forward(x), axis=self._axes(op.range_shape))
        return val

    def objective_grad(self, x):
        """A subgradient of :meth:`objective` summed over the batch."""
        x = np.asarray(x, dtype=float)
        out = self.F.grad(x)
        for g, op in self.blocks:
            out = out + op.adjoint(g.grad(op.forward(x)))
        return out

    def lagrangian(self, x, ys):
        """``sum_i <L_i x, y_i> + F(x) - sum_i G_i^*(y_i)`` (extended real)."""
        x = np.asarray(x, dtype=float)
        val = self.F.value(x)
        for (g, op), y in zip(self.blocks, ys):
            val += float(np.vdot(op.forward(x), y)) - g.conj_value(y)
        return val


@dataclass
class SchemeMatrices:
    """Per-step parameter matrices of the engine, cycled with period ``T``.

    Shapes: ``A``, ``B``: ``(T, nb, M, M)``; ``C``, ``D``: ``(T, N, N)``;
    ``sigma``: ``(T, nb)``; ``tau``: ``(T,)``.  ``nb == 1`` shares the dual
    matrices and step size across all dual blocks.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float)
        self.B = np.array(self.B, dtype=float)
        self.C = np.array(self.C, dtype=float)
        self.D = np.array(self.D, dtype=float)
        self.sigma = np.array(self.sigma, dtype=float)
        self.tau = np.array(self.tau, dtype=float)
        if self.A.ndim != 4 or self.A.shape != self.B.shape or self.A.shape[2] != self.A.shape[3]:
            raise DimensionError(f"A/B must have shape (T, nb, M, M), got {self.A.shape}, {self.B.shape}")
        T, nb, M, _ = self.A.shape
        if self.C.ndim != 3 or self.C.shape != self.D.shape or self.C.shape[0] != T \
                or self.C.shape[1] != self.C.shape[2]:
            raise DimensionError(f"C/D must have shape (T, N, N), got {self.C.shape}, {self.D.shape}")
        if self.sigma.shape != (T, nb) or self.tau.shape != (T,):
            raise DimensionError(f"step sizes have shapes {self.sigma.shape}, {self.tau.shape}; "
                                 f"expected {(T, nb)}, {(T,)}")
        for name in ("A", "B", "C", "D", "sigma", "tau"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        if np.any(self.sigma <= 0) or np.any(self.tau <= 0):
            raise ValueError("step sizes must be strictly positive")

    @classmethod
    def constant(cls, A, B, C, D, sigma, tau, meta=None) -> "SchemeMatrices":
        """Build period-1 matrices; ``A``/``B`` may be ``(M, M)`` or ``(nb, M, M)``."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if A.ndim == 2:
            A, B = A[None], B[None]
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        return cls(A[None], B[None], np.asarray(C, dtype=float)[None],
                   np.asarray(D, dtype=float)[None], sigma[None], [float(tau)], dict(meta or {}))

    @property
    def period(self) -> int:
        return self.A.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.A.shape[1]

    @property
    def M(self) -> int:
        return self.A.shape[2]

    @property
    def N(self) -> int:
        return self.C.shape[1]

    def block(self, n: int, i: int):
        """``(A, B, sigma)`` used for dual block ``i`` at step ``n``."""
        t = n % self.period
        j = 0 if self.n_blocks == 1 else i
        return self.A[t, j], self.B[t, j], float(self.sigma[t, j])

    def primal(self, n: int):
        t = n % self.period
        return self.C[t], self.D[t], float(self.tau[t])

    def check_blocks(self, n_blocks: int):
        if self.n_blocks not in (1, n_blocks):
            raise DimensionError(f"matrices cover {self.n_blocks} dual blocks, problem has {n_blocks}")

    # flat views used by the learning code
    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in
                               (self.A, self.B, self.C, self.D, self.sigma, self.tau)])

    def shapes(self):
        return [a.shape for a in (self.A, self.B, self.C, self.D, self.sigma, self.tau)]

    @classmethod
    def unflatten(cls, flat, shapes, meta=None) -> "SchemeMatrices":
        parts, k = [], 0
        for s in shapes:
            n = int(np.prod(s))
            parts.append(np.asarray(flat[k:k + n]).reshape(s))
            k += n
        if k != len(flat):
            raise DimensionError(f"flat vector has {len(flat)} entries, shapes need {k}")
        return cls(*parts, meta=dict(meta or {}))

    def to_dict(self) -> dict:
        return {
            "N": self.N, "M": self.M, "period": self.period, "n_blocks": self.n_blocks,
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(), "D": self.D.tolist(),
            "sigma": self.sigma.tolist(), "tau": self.tau.tolist(), "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeMatrices":
        out = cls(d["A"], d["B"], d["C"], d["D"], d["sigma"], d["tau"], dict(d.get("meta", {})))
        if (out.N, out.M, out.period) != (d.get("N", out.N), d.get("M", out.M), d.get("period", out.period)):
            raise DimensionError("declared sizes disagree with matrix shapes")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SchemeMatrices":
        return cls.from_dict(json.loads(text))


@dataclass
class SolverState:
    primal: np.ndarray
    dual: list
    iter: int = 0

    @classmethod
    def zeros(cls, problem: Problem, params: SchemeMatrices, batch_shape=None) -> "SolverState":
        batch_shape = problem.batch_shape if batch_shape is None else tuple(batch_shape)
        primal = np.zeros((params.N,) + batch_shape + problem.domain_shape)
        dual = [np.zeros((params.M,) + batch_shape + op.range_shape) for op in problem.ops]
        return cls(primal, dual, 0)

    @property
    def x(self) -> np.ndarray:
        return self.primal[-1]

    @property
    def y(self) -> list:
        return [d[-1] for d in self.dual]


@dataclass
class StepRecord:
    """Intermediates of one step, kept for reverse-mode differentiation.

    ``dual_in[i]`` is the stacked vector fed to ``B_i``; ``dual_pre[i]`` the
    first slot before the conjugate prox and ``dual_mid[i]`` the vector fed
    to ``A_i``.  The primal fields mirror these for ``D``, ``prox_F`` and ``C``.
    """

    n: int
    dual_in: list
    dual_pre: list
    dual_mid: list
    primal_in: np.ndarray
    primal_pre: np.ndarray
    primal_mid: np.ndarray


def _kron(mat, stack):
    return np.tensordot(mat, stack, axes=(1, 0))


def step(problem: Problem, params: SchemeMatrices, state: SolverState, tape=None) -> SolverState:
    """One engine step; returns a new state.  Appends a :class:`StepRecord` to ``tape``."""
    params.check_blocks(len(problem.blocks))
    n = state.iter
    x = state.primal
    if x.shape[0] != params.N or len(state.dual) != len(problem.blocks):
        raise DimensionError("state does not match the scheme sizes")
    new_dual, d_in, d_pre, d_mid = [], [], [], []
    for i, (g, op) in enumerate(problem.blocks):
        A, B, s = params.block(n, i)
        z = state.dual[i].copy()
        if z.shape[0] != params.M:
            raise DimensionError(f"dual block {i} has {z.shape[0]} memories, expected {params.M}")
        z[0] = op.forward(x[0])
        w = _kron(B, z)
        pre = w[0].copy()
        w[0] = g.prox_conjugate(s, pre)
        new_dual.append(_kron(A, w))
        d_in.append(z)
        d_pre.append(pre)
        d_mid.append(w)
    C, D, tau = params.primal(n)
    z = x.copy()
    acc = None
    for (_, op), y in zip(problem.blocks, new_dual):
        t = op.adjoint(y[0])
        acc = t if acc is None else acc + t
    z[0] = acc
    u = _kron(D, z)
    pre = u[0].copy()
    u[0] = problem.F.prox(tau, pre)
    new_primal = _kron(C, u)
    if tape is not None:
        tape.append(StepRecord(n, d_in, d_pre, d_mid, z, pre, u))
    return SolverState(new_primal, new_dual, n + 1)


def run(problem: Problem, params: SchemeMatrices, n_steps: int, state: SolverState | None = None,
        batch_shape=None, tape=None, callback=None) -> SolverState:
    """Run ``n_steps`` engine steps from ``state`` (zero state by default)."""
    if state is None:
        state = SolverState.zeros(problem, params, batch_shape)
    for _ in range(int(n_steps)):
        state = step(problem, params, state, tape)
        if callback is not None:
            callback(state)
    return state


# -- presets -----------------------------------------------------------------

def _check_steps(sigma, tau):
    if not (sigma > 0 and tau > 0):
        raise ValueError(f"step sizes must be positive, got sigma={sigma}, tau={tau}")


def preset_pdhg(sigma: float, tau: float, theta: float = 1.0) -> SchemeMatrices:
    _check_steps(sigma, tau)
    return SchemeMatrices.constant(
        [[1.0, 0.0], [1.0, 0.0]],
        [[sigma, 1.0], [0.0, 1.0]],
        [[1.0 + theta, -theta], [1.0, 0.0]],
        [[-tau, 1.0], [0.0, 1.0]],
        sigma, tau, meta={"preset": "pdhg", "theta": theta},
    )


def preset_dr(sigma: float, tau: float, lam: float = 1.0, convergent: bool = False) -> SchemeMatrices:
    """Primal-dual Douglas-Rachford with relaxation ``lam``.

    Because the engine updates the dual first, a run from the zero state
    equals the usual primal-first recursion started from the dual point
    obtained by one relaxed dual update at ``x = 0``.
    """
    _check_steps(sigma, tau)
    if convergent and not 0 < lam < 2:
        raise ValueError(f"relaxation {lam} outside (0, 2)")
    return SchemeMatrices.constant(
        [[lam, 1.0 - lam], [lam, 1.0 - lam]],
        [[sigma, 1.0], [0.0, 1.0]],
        [[2.0, -1.0], [lam, 1.0 - lam]],
        [[-tau, 1.0], [0.0, 1.0]],
        sigma, tau, meta={"preset": "dr", "lambda": lam},
    )


def preset_new_solver(sigma: float, tau: float, a21: float, c21: float) -> SchemeMatrices:
    """Relaxed primal-dual solver with dual relaxation ``a21`` and primal relaxation ``c21``."""
    _check_steps(sigma, tau)
    if a21 == 0:
        raise ValueError("a21 must be nonzero")
    r = c21 / a21
    return SchemeMatrices.constant(
        [[a21, 1.0 - a21], [a21, 1.0 - a21]],
        [[sigma, 1.0], [0.0, 1.0]],
        [[1.0 + r, -r], [c21, 1.0 - c21]],
        [[-tau, 1.0], [0.0, 1.0]],
        sigma, tau, meta={"preset": "new_solver", "a21": a21, "c21": c21},
    )


def preset_fbf(gammas) -> SchemeMatrices:
    """Forward-backward-forward splitting as two engine steps per iteration.

    ``gammas`` is the step-length schedule; entry ``k`` drives engine steps
    ``2k`` and ``2k + 1``, and the whole schedule repeats.  Unused matrix
    entries are zero.  The lead slots ``x^3``/``y^3`` hold the iterate after
    every odd step.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("empty step-length schedule")
    if any(not g > 0 for g in gammas):
        raise ValueError("step lengths must be positive")
    A, B, C, D, sig, tau = [], [], [], [], [], []
    for g in gammas:
        A.append([[[0, 0, 1], [0, 0, 0], [1, 0, 0]]])
        B.append([[[g, 0, 1], [1, 0, 0], [0, 0, 1]]])
        C.append([[1, 0, -1], [0, 0, 0], [1, 1, 0]])
        D.append([[-g, 0, 1], [g, 0, 0], [0, 0, 1]])
        A.append([[[0, 1, 0], [0, 0, 0], [0, 0, 1]]])
        B.append([[[0, 0, 0], [0, 0, 1], [g, 0, 1]]])
        C.append([[0, 0, 1], [0, 0, 0], [0, 0, 1]])
        D.append([[0, 0, 0], [0, 0, 0], [-g, 0, 1]])
        sig += [[g], [g]]
        tau += [g, g]
    return SchemeMatrices(A, B, C, D, sig, tau, meta={"preset": "fbf", "gammas": gammas})


# -- fixed points ------------------------------------------------------------

def kkt_residual(problem: Problem, x, ys, sigma: float, tau: float, axis=None):
    """``|y - prox_{G^*}(y + sigma L x)| + |x - prox_F(x - tau L^* y)|``.

    Norms are taken over the product space; with ``axis=None`` over the
    whole (possibly batched) arrays, otherwise per batch entry.
    """
    x = np.asarray(x, dtype=float)
    dual_sq = 0.0
    adj = None
    for (g, op), y in zip(problem.blocks, ys):
        r = y - g.prox_conjugate(sigma, y + sigma * op.forward(x))
        ax = None if axis is None else tuple(range(-len(op.range_shape), 0))
        dual_sq = dual_sq + np.sum(r * r, axis=ax)
        t = op.adjoint(y)
        adj = t if adj is None else adj + t
    r = x - problem.F.prox(tau, x - tau * adj)
    ax = None if axis is None else tuple(range(-len(problem.domain_shape), 0))
    primal_sq = np.sum(r * r, axis=ax)
    return np.sqrt(dual_sq) + np.sqrt(primal_sq)


def fixed_point_residual(problem: Problem, params: SchemeMatrices, state: SolverState) -> float:
    """Optimality residual at the state's lead variables, using the current step sizes."""
    params.check_blocks(len(problem.blocks))
    _, _, s = params.block(state.iter, 0)
    _, _, tau = params.primal(state.iter)
    return float(kkt_residual(problem, state.x, state.y, s, tau))


def fixed_point_conditions(params: SchemeMatrices, tol: float = 1e-13) -> list[str]:
    """Violations of the fixed-point conditions of a 2x2 scheme (empty if none).

    The conditions are ``a21 + a22 = 1``, ``b12 = 1``, ``b11 (c11 + c12) = sigma``,
    ``c21 + c22 = 1``, ``d12 = 1`` and ``d11 (a11 + a12) = -tau``, checked for
    every step in the period and every dual block.  ``tol`` absorbs the
    rounding in sums such as ``(1 + theta) - theta``.
    """
    if params.N != 2 or params.M != 2:
        raise DimensionError("fixed-point conditions are stated for N = M = 2")
    bad = []
    for t in range(params.period):
        C, D, tau = params.C[t], params.D[t], params.tau[t]
        for j in range(params.n_blocks):
            A, B, s = params.A[t, j], params.B[t, j], params.sigma[t, j]
            checks = {
                "a21 + a22 = 1": (A[1, 0] + A[1, 1], 1.0),
                "b12 = 1": (B[0, 1], 1.0),
                "b11 (c11 + c12) = sigma": (B[0, 0] * (C[0, 0] + C[0, 1]), s),
                "c21 + c22 = 1": (C[1, 0] + C[1, 1], 1.0),
                "d12 = 1": (D[0, 1], 1.0),
                "d11 (a11 + a12) = -tau": (D[0, 0] * (A[0, 0] + A[0, 1]), -tau),
            }
            for name, (got, want) in checks.items():
                if abs(got - want) > tol * max(1.0, abs(want)):
                    bad.append(f"step {t}, block {j}: {name} (got {got!r}, want {want!r})")
    return bad


def fixed_point_state(problem: Problem, params: SchemeMatrices, x_bar, ys_bar) -> SolverState:
    """A state whose memories sit at the fixed point built from a saddle point.

    For a 2x2 scheme the first memories are the values of ``p`` and ``q`` at
    the fixed point, ``p = (1 - c22)/c21 x`` and ``q = (1 - a22)/a21 y``; the
    second memories hold ``x`` and ``y`` themselves.  The first primal slot
    enters the next step only through ``L x^1``, so it is set to the
    extrapolated point ``c11 p + c12 x``.
    """
    if params.N != 2 or params.M != 2:
        raise DimensionError("fixed-point injection is defined for N = M = 2")
    n = 0
    C, _, _ = params.primal(n)
    x_bar = np.asarray(x_bar, dtype=float)
    p = (1.0 - C[1, 1]) / C[1, 0] * x_bar if C[1, 0] != 0 else x_bar
    v = C[0, 0] * p + C[0, 1] * x_bar
    dual = []
    for i, y in enumerate(ys_bar):
        A, _, _ = params.block(n, i)
        y = np.asarray(y, dtype=float)
        q = (1.0 - A[1, 1]) / A[1, 0] * y if A[1, 0] != 0 else y
        w = A[0, 0] * q + A[0, 1] * y
        dual.append(np.stack([w, y]))
    return SolverState(np.stack([v, x_bar]), dual, n)
