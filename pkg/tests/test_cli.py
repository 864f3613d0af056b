import csv
import json
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from proxforge.bench import Family, FamilyConfig
from proxforge.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from proxforge.learn import initial_params, save_weights
from proxforge.tensor import load_element

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).parent.parent
PRESET = ROOT / "weights" / "pdhg_default.json"


def write_config(tmp_path, name="run.json", base="tiny_eval.json", **over):
    doc = json.loads((DATA / base).read_text())
    doc.update(over)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def strict_rows(path, n_cols=None):
    """Parse a CSV, checking a header, a fixed column count and lowercase nan/inf."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, strict=True))
    header, body = rows[0], rows[1:]
    assert header and all(h and not h[0].isdigit() for h in header)
    for r in body:
        assert len(r) == (n_cols or len(header))
        for v in r:
            if v.lower() in ("nan", "inf", "-inf"):
                assert v in ("nan", "inf", "-inf")
    return header, body


def tomo_weights(tmp_path, mapping, name):
    fam = Family(FamilyConfig(kind="tomography", side=16))
    p = tmp_path / f"{name}.json"
    save_weights(p, initial_params(mapping, fam.L_norm), fam.L_norm, {"method": name})
    return p


# -- train ---------------------------------------------------------------------

def test_train_tiny_config_and_rerun(tmp_path):
    cfg = write_config(tmp_path, base="tiny_train.json")
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert time.perf_counter() - t0 < 60
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    for f in ("weights_pdhg_constrained.json", "trace_pdhg_constrained.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header, body = strict_rows(tmp_path / "a" / "trace_pdhg_constrained.csv")
    assert header == ["step", "depth", "lr", "loss", "grad_norm", "val_loss"]
    assert len(body) == 50 and [int(r[0]) for r in body] == list(range(50))
    doc = json.loads((tmp_path / "a" / "weights_pdhg_constrained.json").read_text())
    assert doc["params"]["mapping"] == "pdhg_constrained"
    assert doc["training"]["config"]["t_max"] == 50


def test_train_seed_flag_changes_run(tmp_path):
    cfg = write_config(tmp_path, base="tiny_train.json", train={"t_max": 5})
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "9"])
    a = (tmp_path / "a" / "trace_pdhg_constrained.csv").read_text()
    b = (tmp_path / "b" / "trace_pdhg_constrained.csv").read_text()
    assert a != b


def test_config_errors(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    bad = write_config(tmp_path, colour="red")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    bad = write_config(tmp_path, train={"momentum": 0.5})
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    bad = write_config(tmp_path, family="mri")
    assert main(["make-data", "--config", str(bad)]) == EXIT_USAGE
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["eval", "--config", str(tmp_path / "broken.json")]) == EXIT_USAGE
    assert main(["frobnicate", "--config", str(bad)]) == EXIT_USAGE
    assert main(["eval"]) == EXIT_USAGE


# -- eval ----------------------------------------------------------------------

def test_eval_reproduces_golden_csv(tmp_path):
    out = tmp_path / "results.csv"
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--weights", str(PRESET), "--out", str(out)]) == EXIT_OK
    got = out.read_text().splitlines()
    want = (DATA / "golden_results.csv").read_text().splitlines()
    assert got[0] == want[0] and len(got) == len(want)
    for g, w in zip(got[1:], want[1:]):
        g, w = g.split(","), w.split(",")
        assert g[0] == w[0] and g[1] == w[1] and g[4:] == w[4:]
        np.testing.assert_allclose([float(v) for v in g[2:4]], [float(v) for v in w[2:4]], rtol=1e-8)


def test_eval_depth_flag_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    w2 = tomo_weights(tmp_path, "new_solver_constrained", "new_solver")
    args = ["eval", "--config", str(cfg), "--weights", str(PRESET), "--weights", str(w2), "--depth", "20"]
    assert main(args + ["--out", str(tmp_path / "r1.csv")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "r2.csv")]) == EXIT_OK
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    header, body = strict_rows(tmp_path / "r1.csv")
    assert [r[0] for r in body] == ["pdhg_default", "new_solver"]
    assert all(r[1] == "20" for r in body)


def test_eval_empty_instance_set(tmp_path):
    cfg = write_config(tmp_path, n_eval=0)
    assert main(["eval", "--config", str(cfg), "--weights", str(PRESET)]) == EXIT_USAGE


def test_eval_mapping_mismatch(tmp_path):
    doc = json.loads(PRESET.read_text())
    doc["params"]["mapping"] = "pdhg_free"
    doc["params"]["raw"] = [1.0, 0.5, 0.5]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--weights", str(bad)]) == EXIT_USAGE
    doc["params"]["mapping"] = "new_solver_constrained"
    bad.write_text(json.dumps(doc))
    assert main(["eval", "--config", str(cfg), "--weights", str(bad)]) == EXIT_USAGE
    assert main(["eval", "--config", str(cfg), "--weights", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_numerical_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, ref_iters=1, ref_tol=1e-30)
    assert main(["eval", "--config", str(cfg), "--weights", str(PRESET)]) == EXIT_NUMERIC


# -- diagnose --------------------------------------------------------------------

def test_diagnose_one_row(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "d.csv"
    assert main(["diagnose", "--config", str(cfg), "--weights", str(PRESET), "--depth", "1",
                 "--out", str(out)]) == EXIT_OK
    header, body = strict_rows(out)
    assert header == ["iter", "Q1", "Q2_displacement", "objective", "fixed_point_residual"]
    assert len(body) == 1 and body[0][1] == "nan"


def test_diagnose_constrained_weights(tmp_path):
    cfg = write_config(tmp_path)
    w = tomo_weights(tmp_path, "new_solver_constrained", "new_solver")
    assert main(["diagnose", "--config", str(cfg), "--weights", str(w)]) == EXIT_OK
    out = tmp_path / "out" / "diagnose_new_solver.csv"
    _, body = strict_rows(out)
    assert len(body) == 300
    obj = np.array([float(r[3]) for r in body])
    q1 = np.array([float(r[1]) for r in body])
    assert np.all(np.isfinite(obj)) and np.all(np.isfinite(q1))
    assert np.all(np.diff(q1) <= 1e-9 * q1[0])


def test_diagnose_needs_one_weights_file(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["diagnose", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["diagnose", "--config", str(cfg), "--weights", str(PRESET), "--depth", "0"]) == EXIT_USAGE


# -- make-data and the entry point ---------------------------------------------------

def test_make_data(tmp_path):
    cfg = write_config(tmp_path, n_train=2, n_eval=1)
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_OK
    meta = json.loads((tmp_path / "d" / "family.json").read_text())
    assert meta["family"]["kind"] == "tomography" and meta["n_eval"] == 1
    truth = load_element(tmp_path / "d" / "train_0001_truth.f8")
    fam = Family(FamilyConfig(kind="tomography", side=16))
    np.testing.assert_array_equal(truth.data, fam.instance(1).truth)
    assert (tmp_path / "d" / "eval_0000_b.f8").exists()


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, n_train=2, n_eval=1)
    env_run = subprocess.run([sys.executable, "-m", "proxforge", "make-data", "--config", str(cfg)],
                             capture_output=True, text=True,
                             env={"PROXFORGE_THREADS": "1", "PATH": "/usr/bin:/bin"})
    assert env_run.returncode == 0, env_run.stderr
    assert (tmp_path / "out" / "data" / "family.json").exists()
    bad = subprocess.run([sys.executable, "-m", "proxforge", "eval"], capture_output=True)
    assert bad.returncode == 2
