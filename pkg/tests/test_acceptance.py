"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math

import numpy as np
import pytest

from jumpdensity import cli
from jumpdensity.density import gaussian_baseline_compare
from jumpdensity.engine import SimConfig, jacobian_inverse_residuals
from jumpdensity.fields import FieldSystem, bracket_condition_check, eval_field, lie_bracket, uh_check
from jumpdensity.inequalities import (
    NorrisInstance,
    dkw_band,
    emi_grid,
    empirical_cdf,
    longest_interval_cdf,
    longest_interval_samples,
    norris_experiment,
)
from jumpdensity.levy import LevyMeasure, check_conditions, tail_mass
from jumpdensity.malliavin import covariance_batch, monotone_within, tail_probability
from jumpdensity.models import heisenberg, heisenberg_group, linear_additive, linear_multiplicative, paper_example

from helpers import fd_bracket, random_poly_field

pytestmark = pytest.mark.slow

BOX2 = [[-1.0, 1.0], [-1.0, 1.0]]


def report(number, title, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
    assert ok, f"criterion {number} failed: {detail}"


def test_criterion_01_jacobian_inverse_identity():
    system = linear_multiplicative()
    fine = jacobian_inverse_residuals(system, [1.0], SimConfig(T=1.0, dt=1e-4, seed=1), 100).mean()
    coarse = jacobian_inverse_residuals(system, [1.0], SimConfig(T=1.0, dt=4e-4, seed=1), 100).mean()
    ratio = coarse / fine
    report(1, "Jacobian inverse identity", fine < 1e-2 and ratio >= 1.5,
           f"mean residual {fine:.3g} at dt=1e-4, ratio dt=4e-4 : 1e-4 = {ratio:.3g}")


def test_criterion_02_covariance_closed_form():
    C = covariance_batch(linear_additive(a=1.0, sigma=1.0), [0.0], SimConfig(T=1.0, dt=1e-3, seed=2), 1000)[:, 0, 0]
    exact = (1 - math.exp(-2.0)) / 2
    rel = abs(C.mean() - exact) / exact
    spread = C.std() / C.mean()
    report(2, "covariance closed form", rel <= 1e-2 and spread <= 1e-6,
           f"C_T = {C.mean():.6f} vs {exact:.6f} (rel {rel:.2e}), path spread {spread:.1e}")


def test_criterion_03_emi_bound_grid():
    G = LevyMeasure.finite_activity_uniform(rate=5.0)
    rows = emi_grid("0.05*y1", G, [0.06, 0.2], [0.1, 0.2, 0.3], [0.005, 0.02], 100_000, seed=3)
    assert len(rows) == 12
    bad = [(A, d, r, res.empirical.mean, res.bound) for A, d, r, res in rows if not res.holds(3.0)]
    worst = max(res.empirical.mean - res.bound for *_, res in rows)
    report(3, "exponential martingale inequality", not bad,
           f"12 cells, max(empirical - bound) = {worst:.4f}, violations: {bad}")


def test_criterion_04_norris_decay():
    pts = norris_experiment(NorrisInstance(), [0.5, 0.3, 0.2, 0.1], 10_000, seed=4)
    probs = [p.lhs_prob for p in pts]
    ok = monotone_within(probs, 2.0) and probs[-1].mean <= 0.05
    report(4, "Norris-type decay", ok, "probabilities " + ", ".join(f"{p.mean:.4f}" for p in probs))


def test_criterion_05_uh_checker():
    frame = FieldSystem.from_strings(["0", "0"], [["1", "0"], ["0", "1"]])
    a = uh_check(frame, 5, BOX2)
    b = uh_check(heisenberg(), 5, BOX2)
    degenerate = FieldSystem.from_strings(["0", "0"], [["1", "0"]])
    c = uh_check(degenerate, 5, BOX2)
    ok = a.j0 == 0 and abs(a.c_est - 1.0) <= 1e-9 and b.j0 == 1 and c.j0 is None
    report(5, "UH checker", ok, f"frame j0={a.j0} c={a.c_est!r}; heisenberg j0={b.j0}; degenerate j0={c.j0}")


def test_criterion_06_bracket_condition():
    always = all(bracket_condition_check(j0, 1.0, 1, 0.5, 0.1, 0.1)[0] for j0 in range(11))
    holds, lhs, rhs = bracket_condition_check(1, 1.5, 1, 0.5, 0.1, 0.1)
    report(6, "bracket condition", always and not holds and lhs == 1.0,
           f"kappa=n true for j0 0..10: {always}; j0=1 case holds={holds}, lhs={lhs}, rhs={rhs:.4g}")


def test_criterion_07_hypoelliptic_tail():
    eps = np.geomspace(1e-1, 1e-4, 7)
    cfg = SimConfig(T=1.0, dt=1e-3, seed=7)
    est = tail_probability(heisenberg(), [0.0, 0.0], cfg, eps, 10_000)
    group = tail_probability(heisenberg_group(), [0.0, 0.0, 0.0], cfg, eps, 10_000)
    print(f"[INFO] heisenberg_group hits over the same grid: {group.hits}, slope {group.fitted_slope}")
    positive = all(p.mean > 0 for p in est.probs)
    slope = est.fitted_slope
    ok = positive and est.monotone(2.0) and slope is not None and slope > 0.5
    report(7, "hypoelliptic tail", ok, f"hits {est.hits}, fitted slope {slope}")


def test_criterion_08_bracket_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        e = int(rng.integers(1, 4))
        A_txt, B_txt = random_poly_field(rng, e), random_poly_field(rng, e)
        A = FieldSystem.from_strings(A_txt, [A_txt]).Z
        B = FieldSystem.from_strings(B_txt, [B_txt]).Z
        br = lie_bracket(A, B)
        for _ in range(10):
            x = rng.uniform(-1, 1, size=e)
            sym = eval_field(br, x)
            ref = fd_bracket(A, B, x)
            err = np.max(np.abs(sym - ref)) / max(1.0, np.max(np.abs(ref)))
            worst = max(worst, err)
    report(8, "bracket oracle", worst <= 1e-5, f"worst relative error {worst:.2e} over 500 points")


def test_criterion_09_levy_toolkit():
    tm = tail_mass(LevyMeasure.power_law(1.5), 0.01)
    good = paper_example(kappa=1.5)
    rep_good = check_conditions(good.G, good.Y, 0.25, [[-2, 2]] * good.e)
    bad = paper_example(kappa=2.5)
    rep_bad = check_conditions(bad.G, bad.Y, 0.25, [[-2, 2]] * bad.e)
    ok = abs(tm - 36.0) / 36.0 <= 1e-6 and rep_good.all_true and not rep_bad.verdicts["condition1"]
    report(9, "Levy toolkit", ok,
           f"tail_mass {tm!r}; kappa=1.5 verdicts {rep_good.verdicts}; kappa=2.5 verdicts {rep_bad.verdicts}")


def test_criterion_10_longest_interval_cdf():
    n = 100_000
    samples = longest_interval_samples(5, 1.0, n, seed=10)
    xs = np.linspace(0.05, 1.0, 20)
    emp = empirical_cdf(samples, xs)
    vals = [longest_interval_cdf(5, 1.0, x) for x in xs]
    std_dev = np.max(np.abs(np.array([v[1] for v in vals]) - emp))
    printed_dev = np.max(np.abs(np.array([v[0] for v in vals]) - emp))
    band = dkw_band(n, 0.01)
    print(f"[INFO] printed formula max deviation {printed_dev:.4g} vs band {band:.4g}: "
          f"{'within' if printed_dev <= band else 'outside'}")
    report(10, "longest-interval CDF", std_dev <= band, f"standard formula max deviation {std_dev:.4g} <= {band:.4g}")


def test_criterion_11_density_baseline():
    l1, _ = gaussian_baseline_compare(-1.0, 1.0, 0.0, SimConfig(T=1.0, dt=1e-3, seed=11), 100_000, threads=4)
    report(11, "density baseline", l1 <= 0.03, f"L1 error {l1:.4g}")


DETERMINISM_CONFIGS = {
    "simulate": {"model": {"builtin": "paper_example"}, "measure": {"name": "power_law", "kappa": 1.5},
                 "sim": {"T": 1.0, "dt": 0.01, "cut": 0.01}, "experiment": {"type": "simulate", "n_paths": 10000}},
    "cov-tail": {"model": {"builtin": "heisenberg_group"}, "sim": {"T": 1.0, "dt": 0.01},
                 "experiment": {"type": "cov-tail", "n_paths": 10000}},
    "emi": {"measure": {"name": "finite_activity_uniform", "rate": 5.0},
            "experiment": {"type": "emi", "f": "0.05*y1", "A": [0.06, 0.2], "delta": [0.1, 0.2, 0.3],
                           "rho": [0.005, 0.02], "n_paths": 20000}},
    "norris": {"experiment": {"type": "norris", "n_paths": 10000, "instance": {"dt": 0.01}}},
    "density": {"model": {"builtin": "linear_additive"}, "sim": {"dt": 0.01},
                "experiment": {"type": "density", "n_paths": 10000}},
}


def test_criterion_12_determinism(tmp_path):
    mismatches, compared = [], 0
    for name, cfg in DETERMINISM_CONFIGS.items():
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps({**cfg, "seed": 12}))
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"{name}-{threads}"
            assert cli.run(["--config", str(path), "--out", str(out), "--threads", str(threads)]) == 0
            outs.append(out)
        for csv_file in sorted(outs[0].glob("*.csv")):
            compared += 1
            if csv_file.read_bytes() != (outs[1] / csv_file.name).read_bytes():
                mismatches.append(f"{name}/{csv_file.name}")
    report(12, "determinism across thread counts", not mismatches and compared >= 5,
           f"{compared} CSV files compared, mismatches: {mismatches}")
