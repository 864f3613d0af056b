import json

import numpy as np
import pytest

from proxforge.linops import (
    ConvolutionOp,
    GradientOp,
    IdentityOp,
    MatrixOp,
    RadonOp,
    ScalingOp,
    StackedOp,
    estimate_norm,
    gaussian_kernel,
    normalize,
    radon_build,
)
from proxforge.tensor import DimensionError, ProductElement, RngStream


def adjoint_gap(op, rng, lead=()):
    x = rng.normal(size=lead + op.domain_shape)
    y = rng.normal(size=lead + op.range_shape)
    lhs = float(np.vdot(op.forward(x), y))
    rhs = float(np.vdot(x, op.adjoint(y)))
    return abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y))


def test_gradient_1d_values():
    g = GradientOp((3,))
    np.testing.assert_array_equal(g.forward(np.array([1.0, 2.0, 4.0])), [[1.0, 2.0, 0.0]])
    np.testing.assert_array_equal(g.adjoint(np.array([[1.0, 0.0, 0.0]])), [-1.0, 1.0, 0.0])


def test_gradient_adjoint_matches_explicit_matrix():
    n = 5
    g = GradientOp((n,))
    D = np.zeros((n, n))
    for i in range(n - 1):
        D[i, i], D[i, i + 1] = -1.0, 1.0
    y = RngStream(0).normal(size=(1, n))
    np.testing.assert_allclose(g.adjoint(y), D.T @ y[0], atol=1e-15)


def test_gradient_constant_and_zero():
    g = GradientOp((6, 7))
    assert not np.any(g.forward(np.full((6, 7), 3.0)))
    assert not np.any(g.adjoint(np.zeros((2, 6, 7))))


def test_gradient_delta_adjoint():
    g = GradientOp((8, 8))
    delta = np.zeros((8, 8))
    delta[3, 4] = 1.0
    field = RngStream(1).normal(size=(2, 8, 8))
    assert abs(np.vdot(g.forward(delta), field) - np.vdot(delta, g.adjoint(field))) < 1e-12


def test_convolution_identity_and_delta():
    rng = RngStream(2)
    x = rng.normal(size=(9, 9))
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    np.testing.assert_allclose(ConvolutionOp((9, 9), k).forward(x), x, atol=1e-13)
    kern = rng.uniform(size=(3, 5))
    delta = np.zeros((9, 9))
    delta[4, 4] = 1.0
    out = ConvolutionOp((9, 9), kern).forward(delta)
    np.testing.assert_allclose(out[3:6, 2:7], kern, atol=1e-13)
    out[3:6, 2:7] = 0
    assert np.max(np.abs(out)) < 1e-13


def test_convolution_matches_direct_sum():
    rng = RngStream(3)
    x, kern = rng.normal(size=(7, 6)), rng.normal(size=(3, 4))
    ref = np.zeros((7, 6))
    oi, oj = 1, 1
    for i in range(7):
        for j in range(6):
            for a in range(3):
                for b in range(4):
                    ii, jj = i - a + oi, j - b + oj
                    if 0 <= ii < 7 and 0 <= jj < 6:
                        ref[i, j] += kern[a, b] * x[ii, jj]
    np.testing.assert_allclose(ConvolutionOp((7, 6), kern).forward(x), ref, atol=1e-12)


def test_convolution_kernel_too_large():
    with pytest.raises(DimensionError):
        ConvolutionOp((4, 4), np.ones((5, 3)))


def test_gaussian_kernel_normalized():
    k = gaussian_kernel((4.0, 6.0))
    assert k.shape == (17, 25)
    assert abs(k.sum() - 1.0) < 1e-14


def disk(n, r):
    c = np.arange(n) - (n - 1) / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return (xx ** 2 + yy ** 2 <= r * r).astype(float)


def test_radon_disk_projection_symmetric():
    R = radon_build(24)
    sino = R.forward(disk(24, 8.0))
    assert np.max(np.abs(sino - sino[:, ::-1])) <= 1e-10


def test_radon_zero_and_mass():
    R = radon_build(20)
    assert not np.any(R.forward(np.zeros((20, 20))))
    x = np.zeros((20, 20))
    x[6, 13] = 1.0
    sums = R.forward(x).sum(axis=1)
    np.testing.assert_allclose(sums, sums[0], atol=1e-8)


def test_radon_bruteforce_ray_sums():
    # direct per-pixel projection and linear split onto detector bins
    n, na, nd = 6, 4, 11
    R = RadonOp(n, na, nd)
    x = RngStream(4).uniform(size=(n, n))
    ref = np.zeros((na, nd))
    c = np.arange(n) - (n - 1) / 2
    for a in range(na):
        th = np.pi * a / na
        for i in range(n):
            for j in range(n):
                u = c[j] * np.cos(th) + c[i] * np.sin(th) + (nd - 1) / 2
                k = int(np.floor(u))
                w = u - k
                ref[a, k] += (1 - w) * x[i, j]
                if w:
                    ref[a, k + 1] += w * x[i, j]
    np.testing.assert_allclose(R.forward(x), ref, atol=1e-12)


def test_radon_cap_and_geometry():
    with pytest.raises(ValueError):
        radon_build(129)
    R = radon_build(16)
    assert R.n_angles == 16 and R.n_detectors >= 24
    R2 = RadonOp.from_geometry(R.geometry_json())
    assert json.loads(R2.geometry_json()) == R.geometry()
    assert (R2.matrix != R.matrix).nnz == 0


@pytest.mark.parametrize("make", [
    lambda: GradientOp((9, 7)),
    lambda: GradientOp((13,)),
    lambda: ConvolutionOp((16, 16), gaussian_kernel(3.0)),
    lambda: ConvolutionOp((12, 14), gaussian_kernel((2.0, 3.0))),
    lambda: radon_build(12),
    lambda: MatrixOp(RngStream(9).normal(size=(6, 12)), (3, 4), (6,)),
    lambda: ScalingOp((4,), -2.5),
    lambda: IdentityOp((3, 3)),
])
def test_adjoint_identity_random_pairs(make):
    op = make()
    rng = RngStream(10)
    worst = max(adjoint_gap(op, rng) for _ in range(100))
    assert worst <= 1e-10
    assert adjoint_gap(op, rng, lead=(3,)) <= 1e-10


def test_stacked_adjoint_is_sum_of_parts():
    rng = RngStream(12)
    parts = [ConvolutionOp((10, 10), gaussian_kernel(1.5)), GradientOp((10, 10))]
    S = StackedOp(parts)
    x = rng.normal(size=(10, 10))
    fx = S.forward(x)
    assert isinstance(fx, ProductElement) and len(fx) == 2
    ys = [rng.normal(size=p.range_shape) for p in parts]
    ref = parts[0].adjoint(ys[0]) + parts[1].adjoint(ys[1])
    np.testing.assert_allclose(S.adjoint(ys), ref, atol=1e-12)
    lhs = sum(np.vdot(a, b) for a, b in zip(fx, ys))
    assert abs(lhs - np.vdot(x, S.adjoint(ys))) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(
        np.concatenate([y.ravel() for y in ys]))


def test_stacked_needs_common_domain():
    with pytest.raises(DimensionError):
        StackedOp([GradientOp((4,)), IdentityOp((5,))])


def test_estimate_norm_simple_ops():
    assert abs(estimate_norm(IdentityOp((10,)), 50) - 1.0) < 1e-6
    assert abs(estimate_norm(ScalingOp((10,), 3.0), 50) - 3.0) < 1e-6
    zero = ScalingOp((4,), 0.0)
    assert estimate_norm(zero, 10) == 0.0
    with pytest.raises(ValueError):
        estimate_norm(zero, 0)


def test_estimate_norm_gradient_vs_svd():
    g = GradientOp((64,))
    est = estimate_norm(g, 100, RngStream(0))
    dense = np.stack([g.forward(e)[0] for e in np.eye(64)], axis=1)
    top = np.linalg.svd(dense, compute_uv=False)[0]
    assert 1.9 <= est <= 2.0
    assert est <= top + 1e-12
    assert abs(g.norm_bound - est * 1.001) < 1e-12


def test_estimate_norm_monotone_in_iters():
    op = ConvolutionOp((12, 12), gaussian_kernel(2.0))
    ests = [estimate_norm(op, k, RngStream(5)) for k in (1, 2, 5, 10, 30)]
    assert all(b >= a - 1e-14 for a, b in zip(ests, ests[1:]))


def test_norm_bound_holds_after_estimation():
    op = radon_build(12)
    estimate_norm(op, 100, RngStream(0))
    rng = RngStream(1)
    for _ in range(20):
        x = rng.normal(size=op.domain_shape)
        assert np.linalg.norm(op.forward(x)) <= op.norm_bound * np.linalg.norm(x) + 1e-6


def test_normalize_cases():
    s = ScalingOp((5,), 3.0)
    estimate_norm(s, 50)
    n = normalize(s)
    assert n.norm_bound == 1.0
    x = np.arange(5.0)
    np.testing.assert_allclose(n.forward(x), x / 1.001, rtol=1e-9)
    again = normalize(n)
    np.testing.assert_allclose(again.forward(x), n.forward(x))
    with pytest.raises(ValueError):
        normalize(ScalingOp((3,), 0.0))


def test_normalized_radon_norm():
    R = radon_build(16)
    estimate_norm(R, 100, RngStream(0))
    est = estimate_norm(normalize(R), 100, RngStream(1))
    assert 0.99 <= est <= 1.0


def test_shape_checks():
    g = GradientOp((4, 4))
    with pytest.raises(DimensionError):
        g.forward(np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        g.adjoint(np.zeros((4, 4)))
