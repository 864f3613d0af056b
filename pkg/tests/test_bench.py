import csv
import math

import numpy as np
import pytest

from proxforge.bench import (
    DEFAULT_LAMBDA,
    FAMILY_KINDS,
    METHODS,
    PHANTOM_MAX,
    RESULT_COLUMNS,
    REFERENCE_STEP_RATIO,
    Family,
    FamilyConfig,
    batch_problem,
    evaluate_method,
    make_phantom,
    reference_solve,
    run_table,
    simulate_data,
    split_validation,
    tv_fraction,
    write_results_csv,
)
from proxforge.learn import initial_params
from proxforge.scheme import preset_pdhg
from proxforge.tensor import RngStream


@pytest.fixture(scope="module")
def tomo():
    fam = Family(FamilyConfig(kind="tomography", side=16))
    inst = fam.instances(4)
    return fam, inst, reference_solve(inst)


@pytest.fixture(scope="module", params=FAMILY_KINDS)
def calibrated(request):
    fam = Family(FamilyConfig(kind=request.param, side=32))
    inst = fam.instances(3)
    return fam, inst, reference_solve(inst)


def pdhg(fam, gamma=0.95, ratio=1.0):
    s = gamma / fam.L_norm
    return preset_pdhg(s / math.sqrt(ratio), s * math.sqrt(ratio), 1.0)


# -- data generation -------------------------------------------------------------

def test_phantom_range_and_determinism():
    a = make_phantom(32, 8, RngStream(1))
    b = make_phantom(32, 8, RngStream(1))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() <= PHANTOM_MAX
    assert a.data.max() > 0
    assert not np.array_equal(a.data, make_phantom(32, 8, RngStream(2)).data)


def test_phantom_edge_cases():
    assert not np.any(make_phantom(16, 0, RngStream(0)).data)
    with pytest.raises(ValueError):
        make_phantom(8, 3, RngStream(0))


def test_noise_level():
    fam = Family(FamilyConfig(kind="deblur", side=64))
    truth = make_phantom(64, 5, RngStream(3))
    clean = fam.forward.forward(truth.data)
    b = simulate_data(truth, fam.forward, 0.05, RngStream(4)).data
    ratio = np.linalg.norm(b - clean) / np.linalg.norm(clean)
    assert abs(ratio - 0.05) <= 0.2 * 0.05
    np.testing.assert_array_equal(simulate_data(truth, fam.forward, 0.0, RngStream(4)).data, clean)
    again = simulate_data(truth, fam.forward, 0.05, RngStream(4)).data
    np.testing.assert_array_equal(b, again)
    with pytest.raises(ValueError):
        simulate_data(truth, fam.forward, -0.1, RngStream(4))


@pytest.mark.parametrize("kind", FAMILY_KINDS)
def test_family_operators_normalized(kind):
    fam = Family(FamilyConfig(kind=kind, side=32))
    assert fam.forward.norm_bound == 1.0 and fam.grad.norm_bound == 1.0
    assert 1.0 < fam.L_norm <= math.sqrt(2) * (1 + 1e-6)
    inst = fam.instance(0)
    assert math.isfinite(inst.objective(np.zeros((32, 32))))


def test_family_streams():
    fam = Family(FamilyConfig(kind="tomography", side=16))
    a, b = fam.instance(0), fam.instance(0)
    np.testing.assert_array_equal(a.b, b.b)
    assert not np.array_equal(a.b, fam.instance(0, stream=1).b)
    assert not np.array_equal(a.b, fam.instance(1).b)
    with pytest.raises(ValueError):
        FamilyConfig(kind="mri")
    assert FamilyConfig(kind="deblur").lam == DEFAULT_LAMBDA["deblur"]


def test_objective_convex_on_random_pairs(tomo):
    fam, inst, _ = tomo
    rng = RngStream(5)
    for _ in range(50):
        x, z = rng.normal(0, 2, size=(2, 16, 16))
        h = inst[0].objective
        assert h(0.5 * x + 0.5 * z) <= 0.5 * h(x) + 0.5 * h(z) + 1e-10


def test_batched_objective_matches_instances(tomo):
    _, inst, refs = tomo
    prob = batch_problem(inst)
    xs = np.stack([r.x_star for r in refs])
    np.testing.assert_allclose(prob.objective(xs), [i.objective(r.x_star) for i, r in zip(inst, refs)],
                               rtol=1e-13)


# -- reference optima --------------------------------------------------------------

def test_reference_optimum_properties(tomo):
    _, inst, refs = tomo
    for i, r in zip(inst, refs):
        assert r.residual <= 1e-6
        assert r.value <= i.objective(np.zeros_like(r.x_star))
        assert r.value <= i.objective(i.truth)


def test_reference_plateau(tomo):
    _, inst, refs = tomo
    longer = reference_solve(inst, iters=20_000)
    for a, b in zip(refs, longer):
        assert abs(a.value - b.value) <= 1e-7 * abs(b.value)


def test_reference_cache(tmp_path, tomo):
    _, inst, _ = tomo
    first = reference_solve(inst[:2], iters=2000, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("ref_*.npz"))) == 2
    second = reference_solve(inst[:2], iters=2000, cache_dir=tmp_path)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.x_star, b.x_star)
        assert a.value == b.value


def test_tv_share_of_optimum(calibrated):
    _, inst, refs = calibrated
    fracs = [tv_fraction(i, r) for i, r in zip(inst, refs)]
    assert 0.1 <= np.mean(fracs) <= 0.5
    assert all(r.residual <= 1e-6 for r in refs)


# -- evaluation ------------------------------------------------------------------------

def test_gap_at_depth_zero(tomo):
    _, inst, refs = tomo
    gaps = evaluate_method(inst, pdhg(tomo[0]), 0, refs)
    want = [i.objective(np.zeros((16, 16))) - r.value for i, r in zip(inst, refs)]
    np.testing.assert_allclose(gaps, want, rtol=1e-12)
    assert np.all(gaps > 0)


def test_gap_self_consistency(tomo):
    fam, inst, refs = tomo
    gaps = evaluate_method(inst, pdhg(fam, ratio=REFERENCE_STEP_RATIO), 10_000, refs)
    assert np.all(np.abs(gaps) <= 1e-6)


def test_gap_never_meaningfully_negative(tomo):
    fam, inst, refs = tomo
    for depth in (1, 10, 100, 1000):
        assert np.all(evaluate_method(inst, pdhg(fam), depth, refs) >= -1e-8)


def test_gap_nonincreasing_in_converged_regime(tomo):
    fam, inst, refs = tomo
    start = evaluate_method(inst, pdhg(fam), 0, refs)
    depths = [10, 20, 40, 80, 160, 320, 640]
    gaps = np.array([evaluate_method(inst, pdhg(fam), d, refs) for d in depths])
    for k in range(len(inst)):
        below = np.nonzero(gaps[:, k] < 0.01 * start[k])[0]
        assert below.size, "converged regime not reached"
        tail = gaps[below[0]:, k]
        assert np.all(np.diff(tail) <= 1e-8)


def test_divergent_parameters_give_infinite_gap(tomo):
    fam, inst, refs = tomo
    bad = preset_pdhg(20.0, 20.0, 1.0)
    assert np.all(np.isinf(evaluate_method(inst, bad, 300, refs)))
    with pytest.raises(ValueError):
        evaluate_method(inst, bad, -1, refs)


def test_run_table_rows_and_csv(tmp_path, tomo):
    fam, inst, refs = tomo
    methods = {name: initial_params(mapping, fam.L_norm, args) for name, (mapping, args) in METHODS.items()}
    rows = run_table(methods, inst, refs, depth=10, seed=3, L_norm=fam.L_norm)
    assert [r["method"] for r in rows] == list(METHODS)
    assert all(r["n_instances"] == 4 and r["depth"] == 10 and r["seed"] == 3 for r in rows)
    assert all(math.isfinite(r["mean_gap"]) and r["mean_gap"] > 0 for r in rows)
    # the default row is the reference PDHG preset
    want = evaluate_method(inst, pdhg(fam), 10, refs)
    assert math.isclose(rows[0]["mean_gap"], float(np.mean(want)), rel_tol=1e-12)
    path = tmp_path / "results.csv"
    write_results_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert tuple(got[0]) == RESULT_COLUMNS
    for line, row in zip(got[1:], rows):
        assert line[0] == row["method"] and int(line[1]) == 10
        assert float(line[2]) == pytest.approx(row["mean_gap"], rel=1e-9)
        assert int(line[4]) == 4 and int(line[5]) == 3
    with pytest.raises(ValueError):
        run_table(methods, [], [], L_norm=fam.L_norm)


def test_split_validation():
    assert split_validation(20) == (list(range(18)), [18, 19])
    assert split_validation(2) == ([0], [1])
    with pytest.raises(ValueError):
        split_validation(1)
