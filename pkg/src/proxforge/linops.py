"""Linear operators with adjoints and operator-norm bounds.

Every operator acts on the *trailing* axes of its input, so a stack of
images ``(batch, H, W)`` is mapped in one call.  Each operator carries a
``norm_bound`` that upper-bounds its spectral norm: a certified analytic
value at construction, replaced by a power-method estimate (with a small
safety factor) once :func:`estimate_norm` has been run.
"""

from __future__ import annotations

import json
import math

import numpy as np
import scipy.fft
import scipy.sparse as sp

from .tensor import DimensionError, ProductElement, RngStream

__all__ = [
    "LinOp",
    "IdentityOp",
    "ScalingOp",
    "MatrixOp",
    "GradientOp",
    "ConvolutionOp",
    "RadonOp",
    "ScaledOp",
    "StackedOp",
    "gaussian_kernel",
    "radon_build",
    "estimate_norm",
    "normalize",
    "NORM_SAFETY",
    "MAX_RADON_SIDE",
]

NORM_SAFETY = 1e-3
MAX_RADON_SIDE = 128


class LinOp:
    """Base class for linear maps between finite-dimensional spaces."""

    def __init__(self, domain_shape, range_shape, norm_bound=math.inf):
        self.domain_shape = tuple(int(n) for n in domain_shape)
        self.range_shape = tuple(int(n) for n in range_shape)
        self.norm_bound = float(norm_bound)
        self.norm_estimated = False

    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    @staticmethod
    def _check(arr, shape, what):
        arr = np.asarray(arr, dtype=float)
        k = len(shape)
        if arr.ndim < k or arr.shape[arr.ndim - k:] != shape:
            raise DimensionError(f"{what}: expected trailing shape {shape}, got {arr.shape}")
        return arr

    def forward(self, x):
        return self._forward(self._check(x, self.domain_shape, "forward"))

    def adjoint(self, y):
        return self._adjoint(self._check(y, self.range_shape, "adjoint"))

    __call__ = forward

    def __repr__(self):
        return f"{type(self).__name__}({self.domain_shape} -> {self.range_shape})"


class IdentityOp(LinOp):
    def __init__(self, shape):
        super().__init__(shape, shape, 1.0)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class ScalingOp(LinOp):
    """``x -> factor * x``."""

    def __init__(self, shape, factor):
        super().__init__(shape, shape, abs(float(factor)))
        self.factor = float(factor)

    def _forward(self, x):
        return self.factor * x

    def _adjoint(self, y):
        return self.factor * y


class MatrixOp(LinOp):
    """Operator given by an explicit (dense or sparse) matrix.

    The Frobenius norm serves as the initial certified norm bound.
    """

    def __init__(self, matrix, domain_shape, range_shape):
        if sp.issparse(matrix):
            matrix = sp.csr_matrix(matrix, dtype=float)
            fro = sp.linalg.norm(matrix)
            self._matrix_t = matrix.T.tocsr()
        else:
            matrix = np.asarray(matrix, dtype=float)
            fro = np.linalg.norm(matrix)
            self._matrix_t = matrix.T
        n_in = int(np.prod(domain_shape))
        n_out = int(np.prod(range_shape))
        if matrix.shape != (n_out, n_in):
            raise DimensionError(f"matrix shape {matrix.shape} != ({n_out}, {n_in})")
        super().__init__(domain_shape, range_shape, fro)
        self.matrix = matrix

    def _apply(self, mat, arr, in_shape, out_shape):
        lead = arr.shape[: arr.ndim - len(in_shape)]
        flat = arr.reshape((-1, int(np.prod(in_shape)))).T
        out = mat @ flat
        return np.asarray(out).T.reshape(lead + out_shape)

    def _forward(self, x):
        return self._apply(self.matrix, x, self.domain_shape, self.range_shape)

    def _adjoint(self, y):
        return self._apply(self._matrix_t, y, self.range_shape, self.domain_shape)


class GradientOp(LinOp):
    """Forward differences along every image axis.

    The range has a leading component axis: an image of shape ``s`` maps to
    a field of shape ``(len(s),) + s``.  The last difference along each
    axis is zero (replicate boundary), so the adjoint is exactly minus the
    matching backward-difference divergence.
    """

    def __init__(self, shape):
        shape = tuple(int(n) for n in shape)
        if len(shape) not in (1, 2):
            raise DimensionError("GradientOp supports 1-D and 2-D images")
        super().__init__(shape, (len(shape),) + shape, 2.0 * math.sqrt(len(shape)))

    def _forward(self, x):
        nd = len(self.domain_shape)
        lead = x.shape[: x.ndim - nd]
        out = np.zeros(lead + self.range_shape)
        for d in range(nd):
            ax = x.ndim - nd + d
            hi = [slice(None)] * x.ndim
            lo = [slice(None)] * x.ndim
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            dst = [slice(None)] * out.ndim
            dst[len(lead)] = d
            dst[len(lead) + 1 + d] = slice(None, -1)
            out[tuple(dst)] = x[tuple(hi)] - x[tuple(lo)]
        return out

    def _adjoint(self, g):
        nd = len(self.domain_shape)
        lead = g.shape[: g.ndim - nd - 1]
        out = np.zeros(lead + self.domain_shape)
        for d in range(nd):
            comp = g[(Ellipsis, d) + (slice(None),) * nd]
            ax = len(lead) + d
            n = self.domain_shape[d]
            src = [slice(None)] * comp.ndim
            src[ax] = slice(None, n - 1)
            inner_part = comp[tuple(src)]
            hi = [slice(None)] * out.ndim
            lo = [slice(None)] * out.ndim
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            out[tuple(hi)] += inner_part
            out[tuple(lo)] -= inner_part
        return out


class ConvolutionOp(LinOp):
    """Linear convolution with zero padding, output cropped to the input size.

    The kernel is centred at index ``(k - 1) // 2`` along each axis.  Both
    directions are evaluated with FFTs on a grid large enough that no
    circular wrap-around occurs, so the adjoint is the exact transpose
    (correlation with the same kernel) up to rounding.
    """

    def __init__(self, shape, kernel):
        shape = tuple(int(n) for n in shape)
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != len(shape):
            raise DimensionError(f"kernel has {kernel.ndim} axes, image has {len(shape)}")
        if any(k > n for k, n in zip(kernel.shape, shape)):
            raise DimensionError(f"kernel {kernel.shape} larger than image {shape}")
        if not np.all(np.isfinite(kernel)):
            raise ValueError("kernel entries must be finite")
        super().__init__(shape, shape, float(np.sum(np.abs(kernel))))
        self.kernel = kernel
        self._fshape = tuple(scipy.fft.next_fast_len(n + k - 1, real=True)
                             for n, k in zip(shape, kernel.shape))
        self._offset = tuple((k - 1) // 2 for k in kernel.shape)
        self._axes = tuple(range(-len(shape), 0))
        self._kf = scipy.fft.rfftn(kernel, s=self._fshape)

    def _forward(self, x):
        xf = scipy.fft.rfftn(x, s=self._fshape, axes=self._axes)
        full = scipy.fft.irfftn(xf * self._kf, s=self._fshape, axes=self._axes)
        crop = tuple(slice(o, o + n) for o, n in zip(self._offset, self.domain_shape))
        return np.ascontiguousarray(full[(Ellipsis,) + crop])

    def _adjoint(self, y):
        lead = y.shape[: y.ndim - len(self.range_shape)]
        pad = np.zeros(lead + self._fshape)
        place = tuple(slice(o, o + n) for o, n in zip(self._offset, self.range_shape))
        pad[(Ellipsis,) + place] = y
        yf = scipy.fft.rfftn(pad, axes=self._axes)
        full = scipy.fft.irfftn(yf * np.conj(self._kf), s=self._fshape, axes=self._axes)
        crop = tuple(slice(0, n) for n in self.domain_shape)
        return np.ascontiguousarray(full[(Ellipsis,) + crop])


def gaussian_kernel(std, truncate=2.0):
    """Normalized 2-D Gaussian kernel with odd side lengths.

    ``std`` is a scalar or a ``(std_rows, std_cols)`` pair; each axis is cut
    at ``truncate`` standard deviations.
    """
    stds = np.broadcast_to(np.asarray(std, dtype=float), (2,))
    if np.any(stds <= 0):
        raise ValueError("kernel standard deviation must be positive")
    axes = []
    for s in stds:
        r = max(1, int(math.ceil(truncate * s)))
        t = np.arange(-r, r + 1, dtype=float)
        axes.append(np.exp(-0.5 * (t / s) ** 2))
    k = np.outer(axes[0], axes[1])
    return k / k.sum()


class RadonOp(MatrixOp):
    """Parallel-beam Radon transform assembled as a sparse matrix.

    Pixel centres are projected onto each detector line and their value is
    split linearly between the two nearest detector bins, so every angle
    carries the full image mass.  Sinogram shape is ``(n_angles, n_detectors)``.
    """

    def __init__(self, img_side, n_angles=None, n_detectors=None):
        img_side = int(img_side)
        if img_side > MAX_RADON_SIDE:
            raise ValueError(f"img_side {img_side} exceeds desk-scale cap {MAX_RADON_SIDE}")
        if img_side < 1:
            raise DimensionError("img_side must be positive")
        if n_angles is None:
            n_angles = img_side
        if n_detectors is None:
            n_detectors = max(math.ceil(1.5 * img_side), math.ceil(math.sqrt(2) * (img_side - 1)) + 3)
        self.img_side = img_side
        self.n_angles = int(n_angles)
        self.n_detectors = int(n_detectors)

        c = np.arange(img_side) - (img_side - 1) / 2.0
        yy, xx = np.meshgrid(c, c, indexing="ij")
        xs, ys = xx.ravel(), yy.ravel()
        pix = np.arange(img_side * img_side)
        half = (self.n_detectors - 1) / 2.0
        rows, cols, vals = [], [], []
        for a in range(self.n_angles):
            theta = math.pi * a / self.n_angles
            u = xs * math.cos(theta) + ys * math.sin(theta) + half
            k0 = np.floor(u).astype(int)
            w1 = u - k0
            for k, w in ((k0, 1.0 - w1), (k0 + 1, w1)):
                keep = (k >= 0) & (k < self.n_detectors) & (w != 0)
                rows.append(a * self.n_detectors + k[keep])
                cols.append(pix[keep])
                vals.append(w[keep])
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_angles * self.n_detectors, img_side * img_side),
        )
        super().__init__(mat, (img_side, img_side), (self.n_angles, self.n_detectors))

    def geometry(self) -> dict:
        return {"img_side": self.img_side, "n_angles": self.n_angles,
                "n_detectors": self.n_detectors}

    def geometry_json(self) -> str:
        return json.dumps(self.geometry(), sort_keys=True)

    @classmethod
    def from_geometry(cls, geom) -> "RadonOp":
        if isinstance(geom, str):
            geom = json.loads(geom)
        return cls(geom["img_side"], geom["n_angles"], geom["n_detectors"])


def radon_build(img_side, n_angles=None, n_detectors=None) -> RadonOp:
    return RadonOp(img_side, n_angles, n_detectors)


class ScaledOp(LinOp):
    """``factor * op``."""

    def __init__(self, op: LinOp, factor: float):
        super().__init__(op.domain_shape, op.range_shape, abs(factor) * op.norm_bound)
        self.op = op
        self.factor = float(factor)

    def _forward(self, x):
        return self.factor * self.op._forward(x)

    def _adjoint(self, y):
        return self.factor * self.op._adjoint(y)


class StackedOp(LinOp):
    """``x -> (L_1 x, ..., L_m x)`` on a product range space.

    ``forward`` returns a :class:`ProductElement` of arrays; ``adjoint``
    accepts any sequence of range arrays and returns ``sum_i L_i^* y_i``.
    The initial bound ``sqrt(sum_i |L_i|^2)`` is certified whenever the
    component bounds are.
    """

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise DimensionError("StackedOp needs at least one operator")
        dom = parts[0].domain_shape
        for p in parts[1:]:
            if p.domain_shape != dom:
                raise DimensionError("stacked operators must share a domain")
        bound = math.sqrt(sum(p.norm_bound ** 2 for p in parts))
        super().__init__(dom, (), bound)
        self.parts = parts

    def forward(self, x):
        x = self._check(x, self.domain_shape, "forward")
        return ProductElement([p._forward(x) for p in self.parts])

    __call__ = forward

    def adjoint(self, ys):
        if len(ys) != len(self.parts):
            raise DimensionError(f"expected {len(self.parts)} components, got {len(ys)}")
        out = None
        for p, y in zip(self.parts, ys):
            term = p.adjoint(y)
            out = term if out is None else out + term
        return out


def _sqnorm(v):
    if isinstance(v, ProductElement):
        return sum(float(np.vdot(p, p)) for p in v)
    return float(np.vdot(v, v))


def estimate_norm(op: LinOp, iters: int = 100, rng: RngStream | None = None) -> float:
    """Power-method estimate of ``|op|``; also refreshes ``op.norm_bound``.

    Runs ``iters`` steps of power iteration on ``op^* op`` from a seeded
    Gaussian start vector and returns ``|op x_k|`` for the normalized
    iterate ``x_k``; this sequence is nondecreasing in ``k``.  The stored
    bound is the estimate inflated by ``1 + NORM_SAFETY``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if rng is None:
        rng = RngStream(0)
    x = rng.normal(size=op.domain_shape)
    x /= np.sqrt(_sqnorm(x))
    est = 0.0
    for _ in range(iters):
        y = op.forward(x)
        est = math.sqrt(_sqnorm(y))
        z = op.adjoint(y)
        nz = math.sqrt(_sqnorm(z))
        if nz == 0.0:
            est = 0.0
            break
        x = z / nz
    else:
        est = math.sqrt(_sqnorm(op.forward(x)))
    op.norm_bound = est * (1.0 + NORM_SAFETY)
    op.norm_estimated = True
    return est


def normalize(op: LinOp) -> LinOp:
    """Rescale ``op`` by ``1 / op.norm_bound`` so that the result has bound 1."""
    if not (op.norm_bound > 0 and math.isfinite(op.norm_bound)):
        raise ValueError(f"cannot normalize operator with norm bound {op.norm_bound}")
    if isinstance(op, StackedOp):
        scaled = StackedOp([ScaledOp(p, 1.0 / op.norm_bound) for p in op.parts])
    else:
        scaled = ScaledOp(op, 1.0 / op.norm_bound)
    scaled.norm_bound = 1.0
    scaled.norm_estimated = op.norm_estimated
    return scaled
