"""Learning scheme parameters by unrolled meta-optimization.

The training objective is the mean objective value reached after ``depth``
engine steps from the zero state, averaged over a batch of problems.  Its
gradient with respect to the scheme matrices is obtained by a hand-written
reverse pass over the recorded steps (prox Jacobians, operator adjoints and
the derivatives of the prox maps in their scale), and then pulled back to
the raw parameters of a :class:`ParamVector` through the Jacobian of its
decoding map, computed by complex-step differentiation.

Mappings
--------
``pdhg_reference``
    No parameters: PDHG with ``theta = 1`` and ``sigma = tau = 0.95 / |L|``.
``pdhg_constrained``
    ``(s1, s2, s3)`` with ``theta = sig(s1)``, ``tau = sig(s2) e^{s3} / |L|``,
    ``sigma = sig(s2) e^{-s3} / |L|``; always convergent.
``new_solver_constrained``
    ``(s1, .., s4)`` with ``a21 = 2 sig(s1)``, ``c21 = 2 sig(s2)`` and step
    sizes ``sqrt(K) sig(s3) e^{-+s4} / |L|``, so ``sigma tau |L|^2 = K sig(s3)^2 < K``.
``pdhg_free``
    ``(theta, sigma, tau)`` used as they are.
``matrices_free``
    Every entry of ``A_i, B_i, C, D, sigma_i, tau`` for given ``N``, ``M``
    and number of dual blocks, in :meth:`SchemeMatrices.flatten` order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .convergence import ConvergentParams, k_expr
from .scheme import Problem, SchemeMatrices, SolverState, step
from .tensor import RngStream

__all__ = [
    "MAPPINGS",
    "TrainConfig",
    "ParamVector",
    "TrainingDivergence",
    "decode",
    "decode_jacobian",
    "convergent_params",
    "initial_params",
    "unrolled_objective",
    "loss",
    "matrices_grad",
    "loss_grad",
    "sample_depth",
    "depth_from_z",
    "cosine_lr",
    "clip_gradient",
    "Adam",
    "train",
    "closed_form_gd_step",
    "gd_loss_grad",
    "train_gd_step",
    "save_weights",
    "load_weights",
]

MAPPINGS = ("pdhg_reference", "pdhg_constrained", "new_solver_constrained",
            "pdhg_free", "matrices_free")

_CS_STEP = 1e-30


class TrainingDivergence(FloatingPointError):
    """Training cannot start (or continue) from non-finite values."""


@dataclass
class TrainConfig:
    t_max: int = 2000
    eta0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0
    depth_mean_shift: float = 8.0
    depth_log_std: float = 1.25
    depth_cap: int = 100
    eval_depth: int = 10
    batch_size: int = 4
    val_every: int = 0  # 0: about twenty validations per run
    seed: int = 0

    def __post_init__(self):
        if self.t_max < 0 or self.batch_size < 1 or self.eval_depth < 1:
            raise ValueError("t_max >= 0, batch_size >= 1 and eval_depth >= 1 required")


@dataclass
class ParamVector:
    mapping: str
    raw: np.ndarray
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"unknown mapping {self.mapping!r}")
        self.raw = np.array(self.raw, dtype=float).ravel()
        want = _n_raw(self.mapping, self.args)
        if self.raw.size != want:
            raise ValueError(f"mapping {self.mapping} takes {want} raw values, got {self.raw.size}")

    def with_raw(self, raw) -> "ParamVector":
        return ParamVector(self.mapping, raw, dict(self.args))

    @property
    def constrained(self) -> bool:
        return self.mapping in ("pdhg_reference", "pdhg_constrained", "new_solver_constrained")

    def to_dict(self) -> dict:
        return {"mapping": self.mapping, "raw": self.raw.tolist(), "args": self.args}

    @classmethod
    def from_dict(cls, d) -> "ParamVector":
        return cls(d["mapping"], d["raw"], dict(d.get("args", {})))


def _free_shapes(args):
    N, M, nb = int(args["N"]), int(args["M"]), int(args.get("n_blocks", 1))
    return [(1, nb, M, M), (1, nb, M, M), (1, N, N), (1, N, N), (1, nb), (1,)]


_SHAPES_2x2 = [(1, 1, 2, 2), (1, 1, 2, 2), (1, 2, 2), (1, 2, 2), (1, 1), (1,)]


def _shapes(mapping, args):
    return _free_shapes(args) if mapping == "matrices_free" else _SHAPES_2x2


def _n_raw(mapping, args):
    if mapping == "matrices_free":
        return sum(int(np.prod(s)) for s in _free_shapes(args))
    return {"pdhg_reference": 0, "pdhg_constrained": 3, "new_solver_constrained": 4,
            "pdhg_free": 3}[mapping]


def _sig(s):
    return 1.0 / (1.0 + np.exp(-s))


def _pdhg_entries(theta, sigma, tau):
    one, zero = theta * 0 + 1, theta * 0
    return [one, zero, one, zero,
            sigma, one, zero, one,
            1 + theta, -theta, one, zero,
            -tau, one, zero, one,
            sigma, tau]


def _entries(mapping, raw, L_norm):
    """Flat matrix entries (``SchemeMatrices.flatten`` order) as a function of ``raw``."""
    if mapping == "matrices_free":
        return raw
    if mapping == "pdhg_reference":
        s = 0.95 / L_norm
        e = _pdhg_entries(1.0, s, s)
    elif mapping == "pdhg_constrained":
        s1, s2, s3 = raw
        g = _sig(s2) / L_norm
        e = _pdhg_entries(_sig(s1), g * np.exp(-s3), g * np.exp(s3))
    elif mapping == "pdhg_free":
        e = _pdhg_entries(*raw)
    else:
        s1, s2, s3, s4 = raw
        a, c = 2 * _sig(s1), 2 * _sig(s2)
        g = np.sqrt(k_expr(a, c)) * _sig(s3) / L_norm
        sigma, tau = g * np.exp(-s4), g * np.exp(s4)
        r = c / a
        one, zero = a * 0 + 1, a * 0
        e = [a, 1 - a, a, 1 - a,
             sigma, one, zero, one,
             1 + r, -r, c, 1 - c,
             -tau, one, zero, one,
             sigma, tau]
    return np.array(e)


def decode(pv: ParamVector, L_norm: float) -> SchemeMatrices:
    """Scheme matrices for ``pv``; raises ``ValueError`` for invalid free values."""
    if not L_norm > 0:
        raise ValueError("L_norm must be positive")
    flat = np.asarray(_entries(pv.mapping, pv.raw, L_norm), dtype=float)
    meta = {"mapping": pv.mapping}
    return SchemeMatrices.unflatten(flat, _shapes(pv.mapping, pv.args), meta)


def convergent_params(pv: ParamVector, L_norm: float) -> ConvergentParams | None:
    """The relaxed-solver parameters behind ``pv``, or ``None`` for other mappings."""
    if pv.mapping != "new_solver_constrained":
        return None
    mats = decode(pv, L_norm)
    a, c = 2 * _sig(pv.raw[0]), 2 * _sig(pv.raw[1])
    return ConvergentParams(float(a), float(c), float(mats.sigma[0, 0]), float(mats.tau[0]))


def decode_jacobian(pv: ParamVector, L_norm: float) -> np.ndarray:
    """``d entries / d raw`` with shape ``(n_entries, n_raw)``."""
    if pv.mapping == "matrices_free":
        return np.eye(pv.raw.size)
    n_entries = sum(int(np.prod(s)) for s in _SHAPES_2x2)
    jac = np.zeros((n_entries, pv.raw.size))
    for j in range(pv.raw.size):
        z = pv.raw.astype(complex)
        z[j] += 1j * _CS_STEP
        jac[:, j] = np.imag(_entries(pv.mapping, z, L_norm)) / _CS_STEP
    return jac


def _logit(p):
    return math.log(p / (1.0 - p))


def initial_params(mapping: str, L_norm: float = 1.0, args: dict | None = None,
                   rng: RngStream | None = None, noise: float = 1e-2) -> ParamVector:
    """Starting point for training: (close to) PDHG with unit extrapolation.

    The constrained mappings start at ``theta = 0.95`` (resp. ``a21 = c21 = 1``)
    with ``sigma tau |L|^2 = 0.95^2``; ``pdhg_free`` and ``matrices_free`` start
    at the reference PDHG scheme, the free matrices with small seeded random
    entries added everywhere else so that spare memory slots receive
    nonzero gradients.
    """
    args = dict(args or {})
    if mapping == "pdhg_reference":
        return ParamVector(mapping, [], args)
    if mapping == "pdhg_constrained":
        return ParamVector(mapping, [_logit(0.95), _logit(0.95), 0.0], args)
    if mapping == "new_solver_constrained":
        return ParamVector(mapping, [0.0, 0.0, _logit(0.95), 0.0], args)
    s = 0.95 / L_norm
    if mapping == "pdhg_free":
        return ParamVector(mapping, [1.0, s, s], args)
    N, M, nb = int(args["N"]), int(args["M"]), int(args.get("n_blocks", 1))
    if N < 2 or M < 2:
        raise ValueError("free schemes need N, M >= 2")
    rng = rng or RngStream(0, 7)
    A = np.zeros((1, nb, M, M))
    B = np.zeros((1, nb, M, M))
    C = np.zeros((1, N, N))
    D = np.zeros((1, N, N))
    if noise > 0:
        A[...] = rng.normal(0.0, noise, A.shape)
        B[...] = rng.normal(0.0, noise, B.shape)
        C[...] = rng.normal(0.0, noise, C.shape)
        D[...] = rng.normal(0.0, noise, D.shape)
    # PDHG in slots 0 (fed by L x^1 and the prox) and last (the output slot)
    pa, pc = np.ix_([0, M - 1], [0, M - 1]), np.ix_([0, N - 1], [0, N - 1])
    for j in range(nb):
        A[0, j][pa] = [[1, 0], [1, 0]]
        B[0, j][pa] = [[s, 1], [0, 1]]
    C[0][pc] = [[2, -1], [1, 0]]
    D[0][pc] = [[-s, 1], [0, 1]]
    sig = np.full((1, nb), s)
    tau = np.array([s])
    raw = np.concatenate([A.ravel(), B.ravel(), C.ravel(), D.ravel(), sig.ravel(), tau])
    return ParamVector(mapping, raw, args)


# -- loss and its gradient ----------------------------------------------------

def _batch_size(problem: Problem) -> int:
    return int(np.prod(problem.batch_shape)) if problem.batch_shape else 1


def unrolled_objective(problem: Problem, mats: SchemeMatrices, depth: int, tape=None):
    """Per-instance objective after ``depth`` steps, and the final state."""
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    state = SolverState.zeros(problem, mats)
    with np.errstate(all="ignore"):
        for _ in range(depth):
            state = step(problem, mats, state, tape)
        vals = problem.objective(state.x)
    return np.asarray(vals, dtype=float), state


def loss(problem: Problem, mats: SchemeMatrices, depth: int) -> float:
    """Mean objective over the batch after ``depth`` steps; ``inf`` if not finite."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    vals, _ = unrolled_objective(problem, mats, depth)
    val = float(np.mean(vals))
    return val if math.isfinite(val) else math.inf


def _outer(g, u):
    n = g.shape[0]
    return g.reshape(n, -1) @ u.reshape(u.shape[0], -1).T


def _kron(mat, stack):
    return np.tensordot(mat, stack, axes=(1, 0))


def matrices_grad(problem: Problem, mats: SchemeMatrices, depth: int):
    """Loss and its gradient with respect to ``mats.flatten()``.

    Raises ``FloatingPointError`` naming the first step whose iterate is not finite.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    mats.check_blocks(len(problem.blocks))
    tape = []
    state = SolverState.zeros(problem, mats)
    with np.errstate(all="ignore"):
        for k in range(depth):
            state = step(problem, mats, state, tape)
            if not (np.all(np.isfinite(state.primal))
                    and all(np.all(np.isfinite(d)) for d in state.dual)):
                raise FloatingPointError(f"non-finite iterate at step {k + 1}")
        vals = np.asarray(problem.objective(state.x), dtype=float)
    value = float(np.mean(vals))
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite objective after step {depth}")

    gA, gB = np.zeros_like(mats.A), np.zeros_like(mats.B)
    gC, gD = np.zeros_like(mats.C), np.zeros_like(mats.D)
    gsig, gtau = np.zeros_like(mats.sigma), np.zeros_like(mats.tau)
    gx = np.zeros_like(state.primal)
    gx[-1] = problem.objective_grad(state.x) / _batch_size(problem)
    gy = [np.zeros_like(d) for d in state.dual]
    shared = mats.n_blocks == 1
    for rec in reversed(tape):
        t = rec.n % mats.period
        C, D, tau = mats.primal(rec.n)
        gC[t] += _outer(gx, rec.primal_mid)
        gu = _kron(C.T, gx)
        gtau[t] += problem.F.prox_dscale(tau, rec.primal_pre, gu[0])
        gu[0] = problem.F.prox_vjp(tau, rec.primal_pre, gu[0])
        gD[t] += _outer(gu, rec.primal_in)
        gz = _kron(D.T, gu)
        gx_old = np.zeros_like(gx)
        gx_old[1:] = gz[1:]
        for i, (g, op) in enumerate(problem.blocks):
            gy[i][0] += op.forward(gz[0])
        for i, (g, op) in enumerate(problem.blocks):
            A, B, s = mats.block(rec.n, i)
            j = 0 if shared else i
            gA[t, j] += _outer(gy[i], rec.dual_mid[i])
            gw = _kron(A.T, gy[i])
            gsig[t, j] += g.conj_dscale(s, rec.dual_pre[i], gw[0])
            gw[0] = g.conj_vjp(s, rec.dual_pre[i], gw[0])
            gB[t, j] += _outer(gw, rec.dual_in[i])
            gzi = _kron(B.T, gw)
            gx_old[0] += op.adjoint(gzi[0])
            new = np.zeros_like(gy[i])
            new[1:] = gzi[1:]
            gy[i] = new
        gx = gx_old
    flat = np.concatenate([a.ravel() for a in (gA, gB, gC, gD, gsig, gtau)])
    return value, flat


def loss_grad(problem: Problem, pv: ParamVector, depth: int, L_norm: float):
    """Loss and gradient with respect to the raw parameters of ``pv``."""
    mats = decode(pv, L_norm)
    value, g = matrices_grad(problem, mats, depth)
    return value, decode_jacobian(pv, L_norm).T @ g


# -- training ---------------------------------------------------------------

def depth_from_z(z: float, shift: float = 8.0, cap: int = 100) -> int:
    return int(min(math.floor(shift + z + 0.5), cap))


def sample_depth(rng: RngStream, cfg: TrainConfig | None = None) -> int:
    """Heavy-tailed unroll depth ``min(round(8 + Z), 100)`` with ``E[Z] = 2``.

    ``Z`` is log-normal with log-scale standard deviation 1.25.
    """
    cfg = cfg or TrainConfig()
    s = cfg.depth_log_std
    z = math.exp(rng.normal(math.log(2.0) - 0.5 * s * s, s))
    return max(1, depth_from_z(z, cfg.depth_mean_shift, cfg.depth_cap))


def cosine_lr(t: int, t_max: int, eta0: float) -> float:
    return 0.5 * eta0 * (1.0 + math.cos(math.pi * t / t_max)) if t_max > 0 else eta0


def clip_gradient(g, clip_norm: float):
    n = float(np.linalg.norm(g))
    if n > clip_norm:
        return g * (clip_norm / n)
    return g


class Adam:
    def __init__(self, n: int, beta1=0.9, beta2=0.99, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, g, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps)


def _safe_loss(problem, pv, depth, L_norm):
    try:
        mats = decode(pv, L_norm)
    except ValueError:
        return math.inf
    return loss(problem, mats, depth)


def train(make_batch, n_train: int, val_problem: Problem, pv0: ParamVector, cfg: TrainConfig,
          L_norm: float, log=None):
    """Adam with cosine step lengths, clipping and stochastic unroll depth.

    ``make_batch(indices)`` returns a batched :class:`Problem` for the given
    training instances.  Validation uses ``val_problem`` at ``cfg.eval_depth``;
    the best validated parameters (including ``pv0``) are returned with the
    per-step trace.
    """
    if n_train < 1:
        raise ValueError("no training instances")
    base = RngStream(cfg.seed)
    depth_rng, batch_rng = base.substream(1), base.substream(2)
    best_val = _safe_loss(val_problem, pv0, cfg.eval_depth, L_norm)
    if not math.isfinite(best_val):
        raise TrainingDivergence("initial parameters give a non-finite validation loss")
    best = pv0
    pv = pv0
    opt = Adam(pv.raw.size, cfg.beta1, cfg.beta2, cfg.eps)
    every = cfg.val_every or max(1, cfg.t_max // 20)
    trace = []
    bs = min(cfg.batch_size, n_train)
    for t in range(cfg.t_max):
        depth = sample_depth(depth_rng, cfg)
        idx = np.sort(batch_rng.permutation(n_train)[:bs])
        lr = cosine_lr(t, cfg.t_max, cfg.eta0)
        row = {"step": t, "depth": depth, "lr": lr, "loss": math.inf, "grad_norm": math.nan,
               "val_loss": math.nan}
        if pv.raw.size:
            try:
                value, g = loss_grad(make_batch(list(idx)), pv, depth, L_norm)
                ok = math.isfinite(value) and np.all(np.isfinite(g))
            except (FloatingPointError, ValueError):
                ok = False
            if ok:
                row["loss"], row["grad_norm"] = value, float(np.linalg.norm(g))
                pv = pv.with_raw(pv.raw + opt.update(clip_gradient(g, cfg.clip_norm), lr))
        if (t + 1) % every == 0 or t + 1 == cfg.t_max:
            v = _safe_loss(val_problem, pv, cfg.eval_depth, L_norm)
            row["val_loss"] = v
            if v < best_val:
                best_val, best = v, pv
        trace.append(row)
        if log is not None:
            log(row)
    return best, trace


# -- the one-step gradient-descent example -------------------------------------

def _check_spd(H):
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or not np.allclose(H, H.T, rtol=0, atol=1e-12):
        raise ValueError("H must be a symmetric matrix")
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise ValueError("H must be positive definite") from None
    return H


def closed_form_gd_step(H, x0, b_samples) -> float:
    """Optimal step of one gradient step on ``x^T H x / 2 - b^T x`` over samples of ``b``.

    Minimizing the mean objective after the step gives
    ``E|H x0 - b|^2 / E[(H x0 - b)^T H (H x0 - b)]``.
    """
    H = _check_spd(H)
    r = H @ np.asarray(x0, dtype=float) - np.asarray(b_samples, dtype=float)  # (S, n)
    return float(np.sum(r * r) / np.sum(r * (r @ H)))


def gd_loss_grad(sigma: float, H, x0, b_samples):
    """Mean of ``F_b(x0 - sigma (H x0 - b))`` over the samples and its ``sigma``-derivative."""
    H = np.asarray(H, dtype=float)
    bs = np.asarray(b_samples, dtype=float)
    r = H @ np.asarray(x0, dtype=float) - bs
    x1 = x0 - sigma * r
    vals = 0.5 * np.sum(x1 * (x1 @ H), axis=1) - np.sum(bs * x1, axis=1)
    grad_x1 = x1 @ H - bs
    return float(np.mean(vals)), float(np.mean(np.sum(grad_x1 * -r, axis=1)))


def train_gd_step(H, x0, b_samples, sigma0: float = 0.1, cfg: TrainConfig | None = None) -> float:
    """Learn the step of a one-layer gradient network with the training loop's optimizer."""
    _check_spd(H)
    cfg = cfg or TrainConfig(t_max=3000, eta0=5e-2)
    s = np.array([float(sigma0)])
    opt = Adam(1, cfg.beta1, cfg.beta2, cfg.eps)
    for t in range(cfg.t_max):
        _, g = gd_loss_grad(s[0], H, x0, b_samples)
        s = s + opt.update(clip_gradient(np.array([g]), cfg.clip_norm),
                           cosine_lr(t, cfg.t_max, cfg.eta0))
    return float(s[0])


# -- persistence --------------------------------------------------------------

def save_weights(path, pv: ParamVector, L_norm: float, metadata: dict | None = None) -> None:
    """One JSON document with the raw vector, its decoded matrices and metadata."""
    doc = {
        "params": pv.to_dict(),
        "L_norm": L_norm,
        "matrices": decode(pv, L_norm).to_dict(),
        "training": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_weights(path) -> tuple[ParamVector, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if "params" not in doc:
        raise ValueError(f"{path}: not a weights file")
    return ParamVector.from_dict(doc["params"]), doc

