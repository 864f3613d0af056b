"""Proximal calculus for the atoms of TV-regularized objectives.

A :class:`ProxFn` knows its value, its proximal map ``prox(sigma, x)`` (the
minimizer of ``f(z) + |z - x|^2 / (2 sigma)``), the proximal map of its
convex conjugate through Moreau's decomposition, and the derivatives of the
proximal map needed to backpropagate through unrolled iterations:

* ``prox_vjp(sigma, x, u)``   -- transpose Jacobian in ``x`` applied to ``u``;
* ``prox_dscale(sigma, x, u)`` -- ``<u, d prox / d sigma>``.

At soft-threshold kinks (``|x_i| == weight * sigma``) the derivative is taken
to be zero.  All maps broadcast over leading batch axes.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, ProductElement

__all__ = [
    "ProxFn",
    "Zero",
    "SqL2Dist",
    "L1",
    "SeparableSum",
    "StronglyConvexShift",
    "from_dict",
]

_DOMAIN_TOL = 1e-12


def _check_scale(s):
    if not s > 0:
        raise ValueError(f"prox scale must be positive, got {s}")


def _sum(a, axis):
    return np.sum(a, axis=axis) if axis is not None else float(np.sum(a))


class ProxFn:
    """Base class; subclasses implement the ``_prox``-family hooks."""

    kind = "abstract"

    def value(self, x, axis=None):
        raise NotImplementedError

    def conj_value(self, y, axis=None):
        raise NotImplementedError(f"conjugate value not available for {self.kind}")

    def grad(self, x):
        """A subgradient (zero at kinks)."""
        raise NotImplementedError

    def _prox(self, sigma, x):
        raise NotImplementedError

    def _vjp(self, sigma, x, u):
        raise NotImplementedError

    def _dscale(self, sigma, x, u):
        raise NotImplementedError

    def prox(self, sigma, x):
        _check_scale(sigma)
        return self._prox(sigma, np.asarray(x, dtype=float))

    def prox_vjp(self, sigma, x, upstream):
        _check_scale(sigma)
        return self._vjp(sigma, np.asarray(x, dtype=float), np.asarray(upstream, dtype=float))

    def prox_dscale(self, sigma, x, upstream) -> float:
        _check_scale(sigma)
        return float(self._dscale(sigma, np.asarray(x, dtype=float), np.asarray(upstream, dtype=float)))

    # Moreau decomposition: prox_{f*}^tau(x) = x - tau * prox_f^{1/tau}(x / tau).
    def prox_conjugate(self, tau, x):
        _check_scale(tau)
        x = np.asarray(x, dtype=float)
        return x - tau * self._prox(1.0 / tau, x / tau)

    def conj_vjp(self, tau, x, upstream):
        _check_scale(tau)
        x = np.asarray(x, dtype=float)
        u = np.asarray(upstream, dtype=float)
        return u - self._vjp(1.0 / tau, x / tau, u)

    def conj_dscale(self, tau, x, upstream) -> float:
        _check_scale(tau)
        x = np.asarray(x, dtype=float)
        u = np.asarray(upstream, dtype=float)
        s, z = 1.0 / tau, x / tau
        p = self._prox(s, z)
        val = -np.vdot(u, p) + self._dscale(s, z, u) / tau + np.vdot(self._vjp(s, z, u), z)
        return float(val)

    def to_dict(self) -> dict:
        raise NotImplementedError


class Zero(ProxFn):
    """The zero function; its conjugate is the indicator of ``{0}``."""

    kind = "zero"

    def value(self, x, axis=None):
        return _sum(np.zeros_like(np.asarray(x, dtype=float)), axis)

    def conj_value(self, y, axis=None):
        y = np.asarray(y, dtype=float)
        bad = np.abs(y) > _DOMAIN_TOL
        if axis is None:
            return np.inf if bad.any() else 0.0
        return np.where(bad.any(axis=axis), np.inf, 0.0)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def _prox(self, sigma, x):
        return x.copy()

    def _vjp(self, sigma, x, u):
        return u.copy()

    def _dscale(self, sigma, x, u):
        return 0.0

    def prox_conjugate(self, tau, x):
        # projection onto {0}; exact zeros instead of the rounding left by x - tau * (x / tau)
        _check_scale(tau)
        return np.zeros_like(np.asarray(x, dtype=float))

    def to_dict(self):
        return {"kind": self.kind}


class SqL2Dist(ProxFn):
    """``weight * |x - b|^2`` (no factor one half)."""

    kind = "sq_l2_dist"

    def __init__(self, b, weight=1.0):
        if not weight > 0:
            raise ValueError("weight must be positive")
        self.b = np.asarray(b, dtype=float)
        self.weight = float(weight)

    def value(self, x, axis=None):
        return self.weight * _sum((np.asarray(x, dtype=float) - self.b) ** 2, axis)

    def conj_value(self, y, axis=None):
        y = np.asarray(y, dtype=float)
        return _sum(y * y / (4.0 * self.weight) + y * self.b, axis)

    def grad(self, x):
        return 2.0 * self.weight * (np.asarray(x, dtype=float) - self.b)

    def _prox(self, sigma, x):
        c = 2.0 * sigma * self.weight
        return (x + c * self.b) / (1.0 + c)

    def _vjp(self, sigma, x, u):
        return u / (1.0 + 2.0 * sigma * self.weight)

    def _dscale(self, sigma, x, u):
        w = self.weight
        d = 2.0 * w * (self.b - x) / (1.0 + 2.0 * sigma * w) ** 2
        return np.vdot(np.broadcast_to(u, np.broadcast_shapes(u.shape, d.shape)),
                       np.broadcast_to(d, np.broadcast_shapes(u.shape, d.shape)))

    def to_dict(self):
        b = self.b.tolist() if self.b.ndim else float(self.b)
        return {"kind": self.kind, "b": b, "weight": self.weight}


class L1(ProxFn):
    """``weight * |x|_1``; the prox is soft-thresholding at ``weight * sigma``."""

    kind = "l1"

    def __init__(self, weight=1.0):
        if not weight > 0:
            raise ValueError("weight must be positive")
        self.weight = float(weight)

    def value(self, x, axis=None):
        return self.weight * _sum(np.abs(np.asarray(x, dtype=float)), axis)

    def conj_value(self, y, axis=None):
        y = np.asarray(y, dtype=float)
        bad = np.abs(y) > self.weight * (1.0 + _DOMAIN_TOL)
        if axis is None:
            return np.inf if bad.any() else 0.0
        return np.where(bad.any(axis=axis), np.inf, 0.0)

    def grad(self, x):
        return self.weight * np.sign(np.asarray(x, dtype=float))

    def _prox(self, sigma, x):
        t = self.weight * sigma
        return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)

    def _vjp(self, sigma, x, u):
        return np.where(np.abs(x) > self.weight * sigma, u, 0.0)

    def _dscale(self, sigma, x, u):
        mask = np.abs(x) > self.weight * sigma
        return -self.weight * np.sum(np.where(mask, np.sign(x) * u, 0.0))

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight}


class StronglyConvexShift(ProxFn):
    """``base(x) + mu/2 |x - center|^2``."""

    kind = "strongly_convex_shift"

    def __init__(self, base: ProxFn, mu: float, center=0.0):
        if not mu > 0:
            raise ValueError("mu must be positive")
        self.base = base
        self.mu = float(mu)
        self.center = np.asarray(center, dtype=float)

    def value(self, x, axis=None):
        x = np.asarray(x, dtype=float)
        return self.base.value(x, axis) + 0.5 * self.mu * _sum((x - self.center) ** 2, axis)

    def conj_value(self, y, axis=None):
        if not isinstance(self.base, Zero):
            raise NotImplementedError("conjugate only available for a zero base")
        y = np.asarray(y, dtype=float)
        return _sum(y * y / (2.0 * self.mu) + y * self.center, axis)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return self.base.grad(x) + self.mu * (x - self.center)

    def _inner(self, sigma, x):
        r = 1.0 + sigma * self.mu
        return sigma / r, (x + sigma * self.mu * self.center) / r, r

    def _prox(self, sigma, x):
        s, z, _ = self._inner(sigma, x)
        return self.base._prox(s, z)

    def _vjp(self, sigma, x, u):
        s, z, r = self._inner(sigma, x)
        return self.base._vjp(s, z, u) / r

    def _dscale(self, sigma, x, u):
        s, z, r = self._inner(sigma, x)
        dz = self.mu * (self.center - x) / r ** 2
        dz = np.broadcast_to(dz, z.shape)
        return self.base._dscale(s, z, u) / r ** 2 + np.vdot(self.base._vjp(s, z, u), dz)

    def to_dict(self):
        c = self.center.tolist() if self.center.ndim else float(self.center)
        return {"kind": self.kind, "base": self.base.to_dict(), "mu": self.mu, "center": c}


class SeparableSum(ProxFn):
    """``sum_i f_i(y_i)`` on a product space; every map acts part by part."""

    kind = "separable_sum"

    def __init__(self, parts):
        self.parts = list(parts)

    def _split(self, x):
        parts = list(x)
        if len(parts) != len(self.parts):
            raise DimensionError(f"expected {len(self.parts)} components, got {len(parts)}")
        return parts

    def value(self, x, axis=None):
        return sum(f.value(xi, axis) for f, xi in zip(self.parts, self._split(x)))

    def conj_value(self, y, axis=None):
        return sum(f.conj_value(yi, axis) for f, yi in zip(self.parts, self._split(y)))

    def grad(self, x):
        return ProductElement([f.grad(xi) for f, xi in zip(self.parts, self._split(x))])

    def prox(self, sigma, x):
        _check_scale(sigma)
        return ProductElement([f.prox(sigma, xi) for f, xi in zip(self.parts, self._split(x))])

    def prox_conjugate(self, tau, x):
        _check_scale(tau)
        return ProductElement([f.prox_conjugate(tau, xi)
                               for f, xi in zip(self.parts, self._split(x))])

    def prox_vjp(self, sigma, x, upstream):
        _check_scale(sigma)
        return ProductElement([f.prox_vjp(sigma, xi, ui) for f, xi, ui
                               in zip(self.parts, self._split(x), self._split(upstream))])

    def prox_dscale(self, sigma, x, upstream):
        _check_scale(sigma)
        return float(sum(f.prox_dscale(sigma, xi, ui) for f, xi, ui
                         in zip(self.parts, self._split(x), self._split(upstream))))

    def conj_vjp(self, tau, x, upstream):
        return ProductElement([f.conj_vjp(tau, xi, ui) for f, xi, ui
                               in zip(self.parts, self._split(x), self._split(upstream))])

    def conj_dscale(self, tau, x, upstream):
        return float(sum(f.conj_dscale(tau, xi, ui) for f, xi, ui
                         in zip(self.parts, self._split(x), self._split(upstream))))

    def to_dict(self):
        return {"kind": self.kind, "parts": [f.to_dict() for f in self.parts]}


def from_dict(d: dict) -> ProxFn:
    """Rebuild a :class:`ProxFn` from its JSON descriptor."""
    kind = d.get("kind")
    if kind == "zero":
        return Zero()
    if kind == "sq_l2_dist":
        return SqL2Dist(np.asarray(d["b"], dtype=float), d.get("weight", 1.0))
    if kind == "l1":
        return L1(d["weight"])
    if kind == "separable_sum":
        return SeparableSum([from_dict(p) for p in d["parts"]])
    if kind == "strongly_convex_shift":
        return StronglyConvexShift(from_dict(d["base"]), d["mu"], np.asarray(d.get("center", 0.0)))
    raise ValueError(f"unknown prox function kind {kind!r}")
