"""Command-line front end.

    jumpdensity --config exp.json [--seed N] [--paths N] [--out DIR] [--threads N]

Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dsl
from .config import ConfigError, ExperimentConfig, load
from .density import gaussian_baseline_compare, kde, smoothness_proxy
from .engine import PathRecorder, _Compiled, fmt, run_batch, simulate_endpoints
from .fields import uh_check
from .inequalities import (NorrisInstance, dkw_band, emi_grid, empirical_cdf, longest_interval_cdf,
                           longest_interval_samples, norris_experiment, write_emi_csv, write_interval_csv,
                           write_norris_csv)
from .levy import check_conditions, tail_mass
from .malliavin import covariance_batch, inverse_moment, tail_probability

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def version_string() -> str:
    """``v<version>`` plus ``git describe`` output when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_rows(filename: Path, header, rows) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else fmt(v) for v in row])


def _write_json(filename: Path, obj) -> None:
    with open(filename, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


# -- experiments -----------------------------------------------------------------------------------
# each returns a JSON-serialisable summary and writes its CSV tables into ``out``


def run_simulate(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    system = cfg.system()
    sim = cfg.sim_config()
    x0 = cfg.initial_state(system.e)
    ex = cfg.experiment
    n_paths = ex.get("n_paths", 1)
    n_dump = min(ex.get("dump_paths", 1), n_paths)
    rec = PathRecorder()
    run_batch(system, x0, sim, np.arange(n_dump), [rec])
    e = system.e
    header = ["path", "t"] + [f"x_{i + 1}" for i in range(e)]
    if sim.record_jacobians:
        header += [f"Jfwd_{i + 1}{j + 1}" for i in range(e) for j in range(e)]
        header += [f"Jinv_{i + 1}{j + 1}" for i in range(e) for j in range(e)]
    rows = []
    for p, traj in enumerate(rec.rows):
        for t, x, Jf, Ji in traj:
            row = [p, t, *x]
            if sim.record_jacobians:
                row += [*Jf.ravel(), *Ji.ravel()]
            rows.append(row)
    write_rows(out / "paths.csv", header, rows)
    xT = simulate_endpoints(system, x0, sim, n_paths, threads)
    write_rows(out / "endpoints.csv", ["path"] + [f"x_{i + 1}" for i in range(e)],
               [[p, *xT[p]] for p in range(n_paths)])
    return {"n_paths": n_paths, "mean_xT": xT.mean(axis=0), "var_xT": xT.var(axis=0, ddof=1) if n_paths > 1 else None}


def run_uh_check(cfg, out, threads):
    system = cfg.system()
    ex = cfg.experiment
    box = ex.get("sample_box", [[-1.0, 1.0]] * system.e)
    rep = uh_check(system, ex.get("jmax", 4), box, ex.get("n_points", 32), ex.get("n_dirs", 16),
                   ex.get("c_min", 1e-8), seed=cfg.seed)
    write_rows(out / "uh_levels.csv", ["level", "min_quadratic_form", "max_eigenvalue"],
               [[j, m, M] for j, (m, M) in enumerate(zip(rep.per_level_min, rep.per_level_max_eig))])
    _write_json(out / "uh_report.json", rep.to_dict())
    return rep.to_dict()


def run_cov_tail(cfg, out, threads):
    system = cfg.system()
    ex = cfg.experiment
    eps = ex.get("eps_grid", list(np.geomspace(1e-1, 1e-4, 7)))
    te = tail_probability(system, cfg.initial_state(system.e), cfg.sim_config(), eps, ex.get("n_paths", 1000),
                          u=ex.get("u"), threads=threads)
    te.to_csv(out / "tail.csv")
    _write_json(out / "tail.json", te.to_dict())
    return te.to_dict()


def run_inverse_moment(cfg, out, threads):
    system = cfg.system()
    ex = cfg.experiment
    sim = cfg.sim_config()
    n = ex.get("n_paths", 1000)
    C = covariance_batch(system, cfg.initial_state(system.e), sim, n, threads)
    rows, res = [], []
    for fl in ex.get("floors", [1e-3, 1e-4, 1e-5, 1e-6]):
        est = inverse_moment(system, None, sim, ex.get("p", 2.0), n, fl, covariances=C)
        rows.append([fl, est.mean, est.se, est.n])
        res.append({"floor": fl, **est.to_dict()})
    write_rows(out / "inverse_moment.csv", ["floor", "mean", "se", "n"], rows)
    return {"p": ex.get("p", 2.0), "estimates": res}


def run_emi(cfg, out, threads):
    ex = cfg.experiment
    G = cfg.levy_measure()
    rows = emi_grid(ex["f"], G, ex["A"], ex["delta"], ex["rho"], ex.get("n_paths", 10000), cfg.seed,
                    T=ex.get("T", 1.0), cut=ex.get("cut", 0.0), threads=threads)
    write_emi_csv(rows, out / "emi.csv")
    return {"cells": [{"A": A, "delta": d, "rho": r, "empirical": res.empirical.to_dict(), "bound": res.bound,
                       "holds": res.holds()} for A, d, r, res in rows]}


def run_norris(cfg, out, threads):
    ex = cfg.experiment
    params = dict(ex.get("instance", {}))
    G = cfg.levy_measure()
    if G is not None:
        params["G"] = G
    for key in ("gamma", "u"):
        if key in params:
            params[key] = tuple(params[key])
    try:
        inst = NorrisInstance(**params)
    except TypeError as exc:
        raise ConfigError("/experiment/instance", str(exc)) from None
    except (ValueError, dsl.DSLError) as exc:
        raise ConfigError("/experiment/instance", str(exc)) from None
    pts = norris_experiment(inst, ex.get("eps_grid", [0.5, 0.3, 0.2, 0.1]), ex.get("n_paths", 1000), cfg.seed,
                            threads)
    write_norris_csv(pts, out / "norris.csv")
    return {"z": inst.z, "points": [{"eps": p.eps, **p.lhs_prob.to_dict(), "window": p.window} for p in pts]}


def run_density(cfg, out, threads):
    system = cfg.system()
    ex = cfg.experiment
    sim = cfg.sim_config()
    n = ex.get("n_paths", 10000)
    summary = {}
    if cfg.model.get("builtin") == "linear_additive" and system.e == 1:
        params = {"a": -1.0, "sigma": 1.0, **(cfg.model.get("params") or {})}
        x0 = cfg.initial_state(1)[0]
        l1, est = gaussian_baseline_compare(params["a"], params["sigma"], x0, sim, n, threads,
                                            ex.get("n_grid", 401))
        summary["l1_error"] = l1
    else:
        xT = simulate_endpoints(system, cfg.initial_state(system.e), sim, n, threads)
        if system.e > 3:
            xT = xT[:, :1]
        est = kde(xT, ex.get("n_grid", 101 if system.e == 1 else 41))
    est.to_csv(out / "density.csv")
    summary.update({"integral": est.integral(), "bandwidth": est.bandwidth, "n_samples": est.n_samples,
                    "smoothness_order1": smoothness_proxy(est, 1), "smoothness_order2": smoothness_proxy(est, 2)})
    return summary


def run_verify_measure(cfg, out, threads):
    system = cfg.system()
    ex = cfg.experiment
    G = system.G or cfg.levy_measure()
    if G is None:
        raise ConfigError("/measure", "verify-measure needs a jump measure")
    box = ex.get("sample_box", [[-1.0, 1.0]] * system.e)
    rep = check_conditions(G, system.Y, ex.get("alpha", 0.5), box, beta=ex.get("beta", 0.5))
    eps = ex.get("tail_eps", [1e-1, 1e-2, 1e-3])
    write_rows(out / "tail_mass.csv", ["eps", "tail_mass"], [[v, tail_mass(G, v)] for v in eps])
    _write_json(out / "conditions.json", rep.to_dict())
    return rep.to_dict()


def run_interval_cdf(cfg, out, threads):
    ex = cfg.experiment
    m, t0 = ex.get("m", 5), ex.get("t0", 1.0)
    n_mc = ex.get("n_mc", 100000)
    xs = np.linspace(0.0, t0, ex.get("n_grid", 21))
    samples = longest_interval_samples(m, t0, n_mc, cfg.seed)
    emp = empirical_cdf(samples, xs)
    rows = [[x, *longest_interval_cdf(m, t0, x), ec] for x, ec in zip(xs, emp)]
    write_interval_csv(rows, out / "interval_cdf.csv")
    band = dkw_band(n_mc)
    return {
        "dkw_band": band,
        "standard_within_band": bool(max(abs(r[2] - r[3]) for r in rows) <= band),
        "printed_within_band": bool(max(abs(r[1] - r[3]) for r in rows) <= band),
    }


RUNNERS = {
    "simulate": run_simulate,
    "uh-check": run_uh_check,
    "cov-tail": run_cov_tail,
    "inverse-moment": run_inverse_moment,
    "emi": run_emi,
    "norris": run_norris,
    "density": run_density,
    "verify-measure": run_verify_measure,
    "interval-cdf": run_interval_cdf,
}


# -- entry point ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpdensity", description="Jump-diffusion simulation and verification")
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths (overrides experiment.n_paths)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: available CPUs)")
    return p


def resolve(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    raw = json.loads(load(path).to_json())
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.paths is not None:
        raw["experiment"]["n_paths"] = args.paths
    if args.out is not None:
        raw["output_dir"] = args.out
    return ExperimentConfig.from_dict(raw)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads or cfg.threads or os.cpu_count() or 1
    out = Path(cfg.output_dir)
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = RUNNERS[cfg.experiment["type"]](cfg, out, threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure of the experiment itself
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    wall = time.perf_counter() - start
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": version_string(),
        "wall_time_seconds": wall,
        "threads": threads,
        "experiment": cfg.experiment["type"],
    })
    print(f"{cfg.experiment['type']}: wrote results to {out}")
    return EXIT_OK


def main() -> None:  # pragma: no cover
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
