"""Problem families, reference optima and the evaluation grid.

Every instance is a TV-regularized least-squares problem::

    H_b(x) = |A x - b|^2 + lam |grad x|_1

with ``A`` a blur or a parallel-beam Radon transform, both ``A`` and the
gradient rescaled to unit norm.  In engine form this is ``F = 0``,
``G_1 = |. - b|^2`` on ``A`` and ``G_2 = lam |.|_1`` on the gradient.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convergence import reference_solution
from .learn import ParamVector, TrainConfig, decode, initial_params, train, unrolled_objective
from .linops import (ConvolutionOp, GradientOp, LinOp, RadonOp, StackedOp, estimate_norm,
                     gaussian_kernel, normalize)
from .prox import L1, SqL2Dist, Zero
from .scheme import Problem, SchemeMatrices, kkt_residual
from .tensor import RngStream, SpaceElement

__all__ = [
    "FAMILY_KINDS",
    "DEFAULT_LAMBDA",
    "REFERENCE_STEP_RATIO",
    "METHODS",
    "RESULT_COLUMNS",
    "FamilyConfig",
    "Family",
    "ProblemInstance",
    "ReferenceOptimum",
    "make_phantom",
    "simulate_data",
    "batch_problem",
    "reference_solve",
    "evaluate_method",
    "run_table",
    "write_results_csv",
    "train_methods",
    "tv_fraction",
    "split_validation",
]

FAMILY_KINDS = ("deblur", "deblur_aniso", "tomography")

# Regularization weights per family, chosen so that the TV term makes up
# 10-50% of the optimal objective on average (checked by the test-suite).
DEFAULT_LAMBDA = {"deblur": 0.01, "deblur_aniso": 0.015, "tomography": 0.003}

# tau / sigma for the reference PDHG runs.  TV duals are bounded by lambda
# while images are O(1), so a large ratio converges several times faster.
REFERENCE_STEP_RATIO = 30.0

PHANTOM_MAX = 3.25

RESULT_COLUMNS = ("method", "depth", "mean_gap", "std_gap", "n_instances", "seed")

# Table rows in order: name -> (mapping, mapping args)
METHODS = {
    "pdhg_default": ("pdhg_reference", {}),
    "pdhg_constrained": ("pdhg_constrained", {}),
    "new_solver": ("new_solver_constrained", {}),
    "pdhg_free": ("pdhg_free", {}),
    "free_nm2": ("matrices_free", {"N": 2, "M": 2, "n_blocks": 2}),
    "free_nm3": ("matrices_free", {"N": 3, "M": 3, "n_blocks": 2}),
}


def make_phantom(side: int, n_ellipses: int, rng: RngStream) -> SpaceElement:
    """Sum of random rotated ellipses, clipped to ``[0, 3.25]``."""
    if side < 16:
        raise ValueError("phantom side must be at least 16")
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((side, side))
    for _ in range(int(n_ellipses)):
        cx, cy = rng.uniform(-0.6, 0.6, 2)
        ax, ay = rng.uniform(0.1, 0.6, 2)
        phi = rng.uniform(0.0, math.pi)
        val = rng.uniform(0.3, 1.5)
        u = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
        v = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] += val
    return SpaceElement(np.clip(img, 0.0, PHANTOM_MAX), "image")


def simulate_data(truth, forward: LinOp, noise_frac: float, rng: RngStream) -> SpaceElement:
    """``forward(truth)`` plus white noise of std ``noise_frac * RMS(forward(truth))``."""
    if noise_frac < 0:
        raise ValueError("noise_frac must be nonnegative")
    clean = forward.forward(np.asarray(truth, dtype=float))
    std = noise_frac * math.sqrt(float(np.mean(clean * clean)))
    noisy = clean + rng.normal(0.0, std, clean.shape) if std > 0 else clean
    return SpaceElement(noisy, "data")


@dataclass
class ProblemInstance:
    forward: LinOp
    grad: LinOp
    b: np.ndarray
    lam: float
    truth: np.ndarray

    def problem(self) -> Problem:
        return batch_problem([self])

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        r = self.forward.forward(x) - self.b
        return float(np.sum(r * r) + self.lam * np.sum(np.abs(self.grad.forward(x))))

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.b, dtype="<f8").tobytes())
        h.update(repr((self.lam, type(self.forward).__name__, self.forward.domain_shape,
                       self.forward.range_shape)).encode())
        return h.hexdigest()[:24]


def batch_problem(instances) -> Problem:
    """One batched problem for instances sharing their operators and weight."""
    instances = list(instances)
    if not instances:
        raise ValueError("empty instance set")
    first = instances[0]
    for inst in instances[1:]:
        if inst.forward is not first.forward or inst.grad is not first.grad or inst.lam != first.lam:
            raise ValueError("batched instances must share operators and lambda")
    b = np.stack([np.asarray(inst.b, dtype=float) for inst in instances])
    return Problem(Zero(), [(SqL2Dist(b), first.forward), (L1(first.lam), first.grad)],
                   batch_shape=(len(instances),))


@dataclass
class FamilyConfig:
    kind: str = "deblur"
    side: int = 32
    noise_frac: float = 0.05
    lam: float | None = None
    n_ellipses: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.kind]
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


class Family:
    """Operators and instance generator of one problem family.

    The forward operator and the gradient are each normalized to unit norm
    by the power method; ``L_norm`` is the estimated norm bound of the
    stacked operator, used by all step-size constraints.
    """

    def __init__(self, cfg: FamilyConfig):
        self.cfg = cfg
        shape = (cfg.side, cfg.side)
        if cfg.kind == "deblur":
            raw = ConvolutionOp(shape, gaussian_kernel(3.0))
        elif cfg.kind == "deblur_aniso":
            raw = ConvolutionOp(shape, gaussian_kernel((4.0, 6.0)))
        else:
            raw = RadonOp(cfg.side)
        rng = RngStream(12345, 0)
        estimate_norm(raw, 100, rng)
        self.forward = normalize(raw)
        g = GradientOp(shape)
        estimate_norm(g, 100, RngStream(12345, 1))
        self.grad = normalize(g)
        stacked = StackedOp([self.forward, self.grad])
        estimate_norm(stacked, 100, RngStream(12345, 2))
        self.L_norm = stacked.norm_bound

    def instance(self, index: int, stream: int = 0) -> ProblemInstance:
        rng = RngStream(self.cfg.seed, 1000 + stream).substream(index)
        truth = make_phantom(self.cfg.side, self.cfg.n_ellipses, rng)
        b = simulate_data(truth, self.forward, self.cfg.noise_frac, rng)
        return ProblemInstance(self.forward, self.grad, b.data, float(self.cfg.lam), truth.data)

    def instances(self, n: int, stream: int = 0) -> list:
        return [self.instance(i, stream) for i in range(n)]


@dataclass
class ReferenceOptimum:
    x_star: np.ndarray
    value: float
    residual: float
    y_star: list = field(default_factory=list)


def reference_solve(instances, iters: int = 10_000, tol: float = 1e-6, cache_dir=None,
                    L_norm: float | None = None,
                    step_ratio: float = REFERENCE_STEP_RATIO) -> list:
    """Reference optima of a list of instances sharing operators (batched PDHG run)."""
    instances = list(instances)
    cache = Path(cache_dir) if cache_dir else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        hits = [_load_ref(cache, inst, iters, tol) for inst in instances]
        if all(h is not None for h in hits):
            return hits
    problem = batch_problem(instances)
    x, ys, _ = reference_solution(problem, iters, tol, L_norm=L_norm, step_ratio=step_ratio)
    out = []
    for k, inst in enumerate(instances):
        yk = [y[k] for y in ys]
        single = inst.problem()
        s = 0.95 / (L_norm or problem.stacked().norm_bound)
        res = float(kkt_residual(single, x[k][None], [y[None] for y in yk], s, s))
        ref = ReferenceOptimum(x[k].copy(), inst.objective(x[k]), res, yk)
        out.append(ref)
        if cache is not None:
            _save_ref(cache, inst, iters, tol, ref)
    return out


def _ref_path(cache, inst, iters, tol):
    return cache / f"ref_{inst.key()}_{iters}_{tol:g}.npz"


def _load_ref(cache, inst, iters, tol):
    p = _ref_path(cache, inst, iters, tol)
    if not p.exists():
        return None
    with np.load(p) as z:
        ys = [z[f"y{i}"] for i in range(int(z["n_dual"]))]
        return ReferenceOptimum(z["x"], float(z["value"]), float(z["residual"]), ys)


def _save_ref(cache, inst, iters, tol, ref):
    extra = {f"y{i}": y for i, y in enumerate(ref.y_star)}
    np.savez(_ref_path(cache, inst, iters, tol), x=ref.x_star, value=ref.value,
             residual=ref.residual, n_dual=len(ref.y_star), **extra)


def tv_fraction(inst: ProblemInstance, ref: ReferenceOptimum) -> float:
    """Share of the TV term in the optimal objective value."""
    tv = inst.lam * float(np.sum(np.abs(inst.grad.forward(ref.x_star))))
    return tv / ref.value


def evaluate_method(instances, params: SchemeMatrices, depth: int, refs) -> np.ndarray:
    """Objective gap ``H_b(x_depth) - H_b(x*)`` per instance (``inf`` if not finite)."""
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    instances = list(instances)
    vals, _ = unrolled_objective(batch_problem(instances), params, depth)
    gaps = np.asarray(vals, dtype=float) - np.array([r.value for r in refs])
    return np.where(np.isfinite(gaps), gaps, np.inf)


def run_table(methods: dict, instances, refs, depth: int = 10, seed: int = 0,
              L_norm: float | None = None) -> list:
    """One result row per method, in insertion order.

    ``methods`` maps names to :class:`SchemeMatrices` or :class:`ParamVector`
    (the latter decoded with ``L_norm``).
    """
    instances = list(instances)
    if not instances:
        raise ValueError("empty instance set")
    rows = []
    for name, params in methods.items():
        if isinstance(params, ParamVector):
            try:
                params = decode(params, L_norm)
            except ValueError:
                params = None
        if params is None:
            gaps = np.full(len(instances), np.inf)
        else:
            gaps = evaluate_method(instances, params, depth, refs)
        with np.errstate(invalid="ignore"):
            mean = float(np.mean(gaps))
            std = float(np.std(gaps)) if np.all(np.isfinite(gaps)) else math.nan
        rows.append({"method": name, "depth": int(depth), "mean_gap": mean, "std_gap": std,
                     "n_instances": len(instances), "seed": int(seed)})
    return rows


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9e}"


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["depth"], _fmt(r["mean_gap"]), _fmt(r["std_gap"]),
                        r["n_instances"], r["seed"]])


def split_validation(n: int):
    """Indices ``(train, validation)``: every tenth instance (at least one) is held out."""
    n_val = max(1, n // 10)
    if n - n_val < 1:
        raise ValueError("need at least two instances to hold one out")
    return list(range(n - n_val)), list(range(n - n_val, n))


def train_methods(family: Family, train_instances, names, cfg: TrainConfig, log=None) -> dict:
    """Train the named methods on ``train_instances``; returns name -> (ParamVector, trace)."""
    tr, va = split_validation(len(train_instances))
    train_set = [train_instances[i] for i in tr]
    val_problem = batch_problem([train_instances[i] for i in va])
    out = {}
    for name in names:
        mapping, args = METHODS[name]
        pv0 = initial_params(mapping, family.L_norm, args, RngStream(cfg.seed, 77))
        if not pv0.raw.size:
            out[name] = (pv0, [])
            continue
        best, trace = train(lambda idx: batch_problem([train_set[i] for i in idx]),
                            len(train_set), val_problem, pv0, cfg, family.L_norm,
                            log=(lambda row, n=name: log(n, row)) if log else None)
        out[name] = (best, trace)
    return out

