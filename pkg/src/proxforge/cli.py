"""Command-line front end.

Every command reads one JSON config (unknown keys are rejected) and writes
JSON weights or CSV tables.  Exit codes: 0 success, 2 usage or config
error, 3 numerical failure.

    proxforge train     --config run.json [--seed S] [--out DIR]
    proxforge eval      --config run.json --weights w.json [--weights ...] [--depth D] [--out results.csv]
    proxforge diagnose  --config run.json --weights w.json [--depth 300] [--out trace.csv]
    proxforge make-data --config run.json [--out DIR]

``PROXFORGE_THREADS`` caps the number of BLAS/OpenMP threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .bench import (
    METHODS,
    Family,
    FamilyConfig,
    batch_problem,
    reference_solve,
    run_table,
    split_validation,
    write_results_csv,
)
from .convergence import ConvergenceFailure, lyapunov_trace, write_trace_csv
from .learn import (
    TrainConfig,
    TrainingDivergence,
    convergent_params,
    decode,
    initial_params,
    load_weights,
    save_weights,
    train,
)
from .scheme import SchemeMatrices, SolverState, fixed_point_residual, step
from .tensor import RngStream, SpaceElement, save_element

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "family": "deblur",
    "side": 32,
    "noise_frac": 0.05,
    "lam": None,
    "n_ellipses": 5,
    "data_seed": 0,
    "n_train": 20,
    "n_eval": 5,
    "method": "pdhg_constrained",
    "train": {},
    "seed": 0,
    "depth": 10,
    "diagnose_depth": 300,
    "instance": 0,
    "ref_iters": 10_000,
    "ref_tol": 1e-6,
    "out_dir": "out",
    "cache_dir": None,
}

TRAIN_TRACE_COLUMNS = ("step", "depth", "lr", "loss", "grad_norm", "val_loss")


class ConfigError(ValueError):
    """Invalid command line or configuration."""


def load_config(path) -> dict:
    """Read a run config, fill defaults and resolve paths relative to the config file."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    cfg = {**DEFAULTS, **doc}
    train_keys = {f.name for f in fields(TrainConfig)}
    bad = sorted(set(cfg["train"]) - train_keys)
    if bad:
        raise ConfigError(f"{path}: unknown train keys {bad}")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"{path}: unknown method {cfg['method']!r}; choose from {list(METHODS)}")
    for key in ("side", "n_train", "n_eval", "depth", "diagnose_depth", "ref_iters"):
        if not isinstance(cfg[key], int) or cfg[key] < 0:
            raise ConfigError(f"{path}: {key} must be a nonnegative integer")
    base = path.resolve().parent
    cfg["out_dir"] = str((base / cfg["out_dir"]).resolve())
    if cfg["cache_dir"] is not None:
        cfg["cache_dir"] = str((base / cfg["cache_dir"]).resolve())
    try:
        cfg["_family"] = FamilyConfig(kind=cfg["family"], side=cfg["side"],
                                      noise_frac=cfg["noise_frac"], lam=cfg["lam"],
                                      n_ellipses=cfg["n_ellipses"], seed=cfg["data_seed"])
        cfg["_train"] = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return cfg


def _out_path(arg, default: Path) -> Path:
    p = Path(arg).resolve() if arg else default
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9e}"


def _write_train_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_TRACE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in TRAIN_TRACE_COLUMNS])


def _weights(path):
    """Load a weights file and check that its parameters decode to its stored matrices."""
    try:
        pv, doc = load_weights(path)
    except FileNotFoundError:
        raise ConfigError(f"weights file not found: {path}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    try:
        mats = decode(pv, float(doc["L_norm"]))
        stored = SchemeMatrices.from_dict(doc["matrices"])
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None
    if mats.shapes() != stored.shapes() or not np.allclose(mats.flatten(), stored.flatten(),
                                                           rtol=1e-12, atol=1e-14):
        raise ConfigError(f"{path}: parameters do not decode to the stored matrices "
                          f"under mapping {pv.mapping!r}")
    name = doc.get("training", {}).get("method") or Path(path).stem
    return name, pv


def cmd_train(cfg: dict, args) -> int:
    fam = Family(cfg["_family"])
    tcfg = cfg["_train"]
    if cfg["n_train"] < 2:
        raise ConfigError("n_train must be at least 2 (one instance is held out)")
    instances = fam.instances(cfg["n_train"], stream=0)
    tr, va = split_validation(len(instances))
    train_set = [instances[i] for i in tr]
    val_problem = batch_problem([instances[i] for i in va])
    mapping, margs = METHODS[cfg["method"]]
    pv0 = initial_params(mapping, fam.L_norm, margs, RngStream(tcfg.seed, 77))
    if pv0.raw.size:
        best, trace = train(lambda idx: batch_problem([train_set[i] for i in idx]),
                            len(train_set), val_problem, pv0, tcfg, fam.L_norm)
    else:
        best, trace = pv0, []
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"method": cfg["method"], "family": asdict(cfg["_family"]),
            "config": asdict(tcfg), "n_train": cfg["n_train"]}
    save_weights(out / f"weights_{cfg['method']}.json", best, fam.L_norm, meta)
    _write_train_trace(out / f"trace_{cfg['method']}.csv", trace)
    print(f"wrote {out / ('weights_' + cfg['method'] + '.json')}")
    return EXIT_OK


def _eval_set(cfg):
    fam = Family(cfg["_family"])
    if cfg["n_eval"] < 1:
        raise ConfigError("empty instance set (n_eval must be >= 1)")
    instances = fam.instances(cfg["n_eval"], stream=1)
    return fam, instances


def cmd_eval(cfg: dict, args) -> int:
    if not args.weights:
        raise ConfigError("eval needs at least one --weights file")
    loaded = [_weights(w) for w in args.weights]
    fam, instances = _eval_set(cfg)
    refs = reference_solve(instances, cfg["ref_iters"], cfg["ref_tol"], cfg["cache_dir"],
                           fam.L_norm)
    depth = cfg["depth"] if args.depth is None else args.depth
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    methods = dict(loaded)
    rows = run_table(methods, instances, refs, depth, cfg["seed"], fam.L_norm)
    path = _out_path(args.out, Path(cfg["out_dir"]) / "results.csv")
    write_results_csv(path, rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_diagnose(cfg: dict, args) -> int:
    if not args.weights or len(args.weights) != 1:
        raise ConfigError("diagnose needs exactly one --weights file")
    name, pv = _weights(args.weights[0])
    fam, instances = _eval_set(cfg)
    if not 0 <= cfg["instance"] < len(instances):
        raise ConfigError(f"instance index {cfg['instance']} outside the evaluation set")
    inst = instances[cfg["instance"]]
    depth = cfg["diagnose_depth"] if args.depth is None else args.depth
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    problem = inst.problem()
    cp = convergent_params(pv, fam.L_norm)
    if cp is not None:
        ref = reference_solve([inst], cfg["ref_iters"], cfg["ref_tol"], cfg["cache_dir"],
                              fam.L_norm)[0]
        reference = (ref.x_star[None], [y[None] for y in ref.y_star])
        with np.errstate(all="ignore"):
            rows = lyapunov_trace(problem, cp, depth, reference)
    else:
        rows = _plain_trace(problem, decode(pv, fam.L_norm), depth)
    path = _out_path(args.out, Path(cfg["out_dir"]) / f"diagnose_{name}.csv")
    write_trace_csv(path, rows)
    print(f"wrote {path}")
    return EXIT_OK


def _plain_trace(problem, mats, depth):
    """Objective and residual per iteration for schemes without a Lyapunov function."""
    state = SolverState.zeros(problem, mats)
    rows = []
    with np.errstate(all="ignore"):
        for n in range(depth):
            rows.append({"iter": n, "Q1": math.nan, "Q2_displacement": math.nan,
                         "objective": float(np.sum(problem.objective(state.x))),
                         "fixed_point_residual": fixed_point_residual(problem, mats, state)})
            state = step(problem, mats, state)
    return rows


def cmd_make_data(cfg: dict, args) -> int:
    fam = Family(cfg["_family"])
    out = Path(args.out).resolve() if args.out else Path(cfg["out_dir"]) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for split, n, stream in (("train", cfg["n_train"], 0), ("eval", cfg["n_eval"], 1)):
        for i in range(n):
            inst = fam.instance(i, stream)
            save_element(out / f"{split}_{i:04d}_truth.f8", SpaceElement(inst.truth, "image"))
            save_element(out / f"{split}_{i:04d}_b.f8", SpaceElement(inst.b, "data"))
    meta = {"family": asdict(cfg["_family"]), "L_norm": fam.L_norm,
            "n_train": cfg["n_train"], "n_eval": cfg["n_eval"]}
    with open(out / "family.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {cfg['n_train'] + cfg['n_eval']} instances to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose,
            "make-data": cmd_make_data}


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage errors through the exit-code convention instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit()


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="proxforge", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--weights", action="append", default=[], help="weights JSON (repeatable)")
    ap.add_argument("--depth", type=int, default=None, help="override the unroll depth")
    ap.add_argument("--seed", type=int, default=None, help="override the training seed")
    ap.add_argument("--out", default=None, help="output file or directory")
    return ap


def _limit_threads():
    n = os.environ.get("PROXFORGE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"PROXFORGE_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("PROXFORGE_THREADS must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
            cfg["_train"].seed = args.seed
        if args.command == "train" and args.out:
            cfg["out_dir"] = str(Path(args.out).resolve())
        try:
            return COMMANDS[args.command](cfg, args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as e:
        print(f"proxforge: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, ConvergenceFailure, FloatingPointError) as e:
        print(f"proxforge: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
