"""Monte Carlo harnesses for the exponential martingale inequality, the
Norris-type decay estimate, and the longest-interval distribution."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import comb

from . import dsl
from .engine import Observer, SimConfig, _Compiled, fmt, map_chunks, run_batch
from .fields import FieldSystem
from .levy import DEFAULT_MAX_EVENTS, LevyMeasure, measure_rule, sample_jumps_batch, tail_mass
from .malliavin import McEstimate, wilson_se
from .rng import GENERIC, StreamFamily


def emi_bound(A: float, delta: float, rho: float) -> float:
    """``2 exp(-delta^2 / (2 (A delta + rho)))``."""
    return 2.0 * math.exp(-delta * delta / (2.0 * (A * delta + rho)))


# -- exponential martingale inequality ----------------------------------------------------------


@dataclass
class EmiInstance:
    """``M_t = ∫∫ f(s, y) (mu - nu)(dy, ds)`` with jumps bounded by ``A``.

    ``f`` is a DSL expression in ``t`` and ``y1``.
    """

    f: str
    G: LevyMeasure
    A: float
    delta: float
    rho: float
    T: float = 1.0
    cut: float = 0.0
    dt: float = 1e-2

    def __post_init__(self):
        if self.A <= 0 or self.delta <= 0 or self.rho <= 0 or self.T <= 0:
            raise ValueError("A, delta, rho and T must be positive")
        if self.cut == 0.0 and not self.G.total_mass_finite():
            raise ValueError("cut = 0 needs a finite jump measure")

    @property
    def expr(self) -> dsl.Expr:
        return dsl.parse_expr(self.f, 0, 1)

    @property
    def bound(self) -> float:
        return emi_bound(self.A, self.delta, self.rho)

    def check_bounded(self, n_t: int = 101, n_y: int = 401) -> float:
        """Largest ``|f|`` on a dense (t, y) grid; raises if it reaches ``A``."""
        ts = np.linspace(0.0, self.T, n_t)
        mags = np.linspace(max(self.cut, self.G.lo), self.G.hi, n_y)
        ys = np.concatenate([mags, -mags]) if self.G.symmetric else mags
        vals = dsl.eval_expr(self.expr, None, ys[None, :, None], ts[:, None])
        sup = float(np.max(np.abs(vals)))
        if not sup < self.A:
            raise ValueError(f"sup |f| = {sup:.6g} is not below A = {self.A}")
        return sup


@dataclass
class EmiResult:
    empirical: McEstimate
    bound: float
    bracket_T: float
    sup_f: float

    def holds(self, k: float = 3.0) -> bool:
        return self.empirical.mean <= self.bound + k * self.empirical.se


def _deterministic_rates(expr, G: LevyMeasure, cut: float, grid: np.ndarray):
    """Per-step compensator ``∫ f G`` and bracket rate ``∫ f^2 G`` at left endpoints."""
    rule = measure_rule(G, lo=cut)
    ys = rule.nodes[None, :, None]
    vals = np.broadcast_to(dsl.eval_expr(expr, None, ys, grid[:-1, None]), (len(grid) - 1, len(rule.nodes)))
    return vals @ rule.weights, (vals * vals) @ rule.weights


def emi_experiment(inst: EmiInstance, n_paths: int, seed: int = 0, threads: int = 1,
                   max_events: int = DEFAULT_MAX_EVENTS) -> EmiResult:
    """Fraction of paths with ``sup|M| >= delta`` and ``<M>_T < rho``, plus the bound."""
    sup_f = inst.check_bounded()
    expr = inst.expr
    n = max(1, int(math.ceil(inst.T / inst.dt - 1e-9)))
    grid = np.linspace(0.0, inst.T, n + 1)
    comp_rate, br_rate = _deterministic_rates(expr, inst.G, inst.cut, grid)
    h = np.diff(grid)
    comp_cum = np.concatenate([[0.0], np.cumsum(comp_rate * h)])  # piecewise linear in t
    bracket_T = float(np.sum(br_rate * h))
    family = StreamFamily(seed)
    lam = tail_mass(inst.G, inst.cut)

    def work(a, b):
        P = b - a
        owner, times, marks = sample_jumps_batch(inst.G, inst.cut, inst.T, family, np.arange(a, b), max_events, lam)
        # sup over grid points
        step = np.clip(np.searchsorted(grid, times, side="left"), 1, n)  # jump lands in (grid[step-1], grid[step]]
        sizes = np.broadcast_to(dsl.eval_expr(expr, None, marks[:, None], times), times.shape).astype(float)
        at_grid = np.zeros((P, n + 1))
        np.add.at(at_grid, (owner, step), sizes)
        S = np.cumsum(at_grid, axis=1)
        sup = np.abs(S - comp_cum[None, :]).max(axis=1)
        if len(times):
            comp_at = np.interp(times, grid, comp_cum)
            post = np.cumsum(sizes)
            starts = np.searchsorted(owner, np.arange(P))
            base = np.concatenate([[0.0], post])[starts][owner]
            post = post - base
            pre = post - sizes
            m = np.maximum(np.abs(post - comp_at), np.abs(pre - comp_at))
            np.maximum.at(sup, owner, m)
        return sup

    sups = np.concatenate(map_chunks(work, n_paths, threads, chunk=8192))
    hit = (sups >= inst.delta) & (bracket_T < inst.rho)
    k = int(np.count_nonzero(hit))
    return EmiResult(McEstimate(k / n_paths, wilson_se(k, n_paths), n_paths, seed), inst.bound, bracket_T, sup_f)


def emi_grid(f: str, G: LevyMeasure, As: Sequence[float], deltas: Sequence[float], rhos: Sequence[float],
             n_paths: int, seed: int = 0, T: float = 1.0, cut: float = 0.0, threads: int = 1) -> list:
    """Run every ``(A, delta, rho)`` cell with the same seed; rows ``(A, delta, rho, result)``."""
    rows = []
    for A in As:
        for d in deltas:
            for r in rhos:
                res = emi_experiment(EmiInstance(f, G, A, d, r, T, cut), n_paths, seed, threads)
                rows.append((A, d, r, res))
    return rows


def write_emi_csv(rows, filename) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["A", "delta", "rho", "empirical", "se", "bound"])
        for A, d, r, res in rows:
            w.writerow([fmt(A), fmt(d), fmt(r), fmt(res.empirical.mean), fmt(res.empirical.se), fmt(res.bound)])


# -- Norris-type decay -----------------------------------------------------------------------------


@dataclass
class NorrisInstance:
    """Coefficients are DSL expressions in ``t``, ``x1 = a`` and ``x2 = Y`` (jump
    coefficients also in ``y1``).  ``a0_init`` is the starting value of ``a``;
    ``alpha_holder`` is the exponent used in ``z``."""

    beta: str = "0"
    gamma: Sequence[str] = ("0",)
    u: Sequence[str] = ("1",)
    zeta: str = "0"
    f: str = "0"
    G: Optional[LevyMeasure] = None
    kappa: float = 1.0
    n: int = 1
    alpha_holder: float = 0.5
    a0_init: float = 0.0
    y0: float = 0.0
    delta: float = 1.0
    q: float = 9.0
    r: float = 0.03
    v: float = 0.03
    w: float = 0.2
    l: float = 1.0
    t0: float = 1.0
    dt: float = 1e-3
    cut: float = 1e-4
    # dominance data (|coefficient| <= D_t phi(y)); kept for reporting
    phi: str = "abs(y1)"
    D: str = "1"

    def __post_init__(self):
        if len(self.gamma) != len(self.u):
            raise ValueError("gamma and u need the same number of components")
        self.validate()

    @property
    def z(self) -> float:
        return 3.0 * self.delta / (self.kappa - self.n + self.alpha_holder)

    def validate(self) -> None:
        if self.kappa < self.n:
            raise ValueError("need kappa >= n")
        if self.alpha_holder <= 0 or self.delta <= 0 or min(self.w, self.l, self.r, self.v) <= 0:
            raise ValueError("alpha_holder, delta, l, r, v, w must be positive")
        if not self.q > 8:
            raise ValueError("need q > 8")
        if not 18 * self.r + 9 * self.v < self.q - 8:
            raise ValueError("need 18 r + 9 v < q - 8")
        g = self.kappa - self.n + self.alpha_holder
        if not self.delta / self.w > max(self.q / 2 - self.r + self.v / 2, g / (4 * self.alpha_holder)):
            raise ValueError("need delta / w > max(q/2 - r + v/2, (kappa - n + alpha)/(4 alpha))")
        jumpy = self.zeta.strip() != "0" or self.f.strip() != "0"
        if jumpy and self.G is None:
            raise ValueError("jump coefficients need a jump measure")

    def system(self, eps: float) -> FieldSystem:
        """``(a, Y)`` as a two-dimensional jump diffusion with marks restricted to ``|y| < eps^z``."""
        G = None
        Y = None
        if self.G is not None:
            G = dataclasses.replace(self.G, hi=min(self.G.hi, eps ** self.z))
            Y = [self.zeta, self.f]
        V = [[g, u] for g, u in zip(self.gamma, self.u)]
        return FieldSystem.from_strings([self.beta, "x1"], V, Y=Y, G=G, name="norris")


class _NorrisObserver(Observer):
    def __init__(self, u_exprs, f_expr, window_rule):
        self.u = u_exprs
        self.f = f_expr
        self.rule = window_rule

    def start(self, n, x, Jf, Ji):
        self.I1 = np.zeros(n)
        self.I2 = np.zeros(n)

    def interval(self, idx, t, h, x, Jf, Ji):
        a = x[:, 0]
        if self.rule is not None and len(self.rule.nodes):
            tt = np.asarray(t)[..., None] if np.ndim(t) else t
            fv = dsl.eval_expr(self.f, x[:, None, :], self.rule.nodes[None, :, None], tt)
            a = a - np.broadcast_to(fv, (len(x), len(self.rule.nodes))) @ self.rule.weights
        uu = 0.0
        for ue in self.u:
            uu = uu + dsl.eval_expr(ue, x, None, t) ** 2
        self.I1[idx] += x[:, 1] ** 2 * h
        self.I2[idx] += (a * a + uu) * h


@dataclass
class NorrisPoint:
    eps: float
    lhs_prob: McEstimate
    window: float
    threshold_small: float
    threshold_large: float
    hits: int


def norris_experiment(inst: NorrisInstance, eps_grid: Sequence[float], n_paths: int, seed: int = 0,
                      threads: int = 1) -> list:
    """Empirical probability of the joint small/large event for each ``eps``."""
    inst.validate()
    out = []
    for eps in eps_grid:
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        system = inst.system(eps)
        window = eps ** inst.z
        cfg = SimConfig(T=inst.t0, dt=inst.dt, cut=min(inst.cut, window), seed=seed, record_jacobians=False)
        rule = None
        f_expr = dsl.parse_expr(inst.f, 2, 1)
        if inst.G is not None and not dsl.is_zero(f_expr):
            rule = measure_rule(system.G, lo=0.0, hi=window)
        u_exprs = [dsl.parse_expr(s, 2, 1) for s in inst.u]
        compiled = _Compiled(system, cfg.cut, False)

        def work(a, b):
            ob = _NorrisObserver(u_exprs, f_expr, rule)
            run_batch(system, [inst.a0_init, inst.y0], cfg, np.arange(a, b), [ob], jacobians=False,
                      compiled=compiled)
            return ob.I1, ob.I2

        parts = map_chunks(work, n_paths, threads)
        I1 = np.concatenate([p[0] for p in parts])
        I2 = np.concatenate([p[1] for p in parts])
        small = eps ** (inst.q * inst.w)
        large = inst.l * eps ** inst.w
        k = int(np.count_nonzero((I1 < small) & (I2 >= large)))
        out.append(NorrisPoint(eps, McEstimate(k / n_paths, wilson_se(k, n_paths), n_paths, seed), window,
                               small, large, k))
    return out


def write_norris_csv(points, filename) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "empirical", "se", "n", "window"])
        for p in points:
            w.writerow([fmt(p.eps), fmt(p.lhs_prob.mean), fmt(p.lhs_prob.se), p.lhs_prob.n, fmt(p.window)])


# -- longest interval ------------------------------------------------------------------------------------


def _pos_pow(base, p):
    base = np.asarray(base, dtype=float)
    return np.where(base > 0, np.power(np.clip(base, 0.0, None), p), 0.0)


def longest_interval_cdf(m: int, t0: float, x: float):
    """``(as_printed, standard)`` CDFs of the longest of the ``m + 1`` gaps left by ``m``
    uniform points on ``[0, t0]``.

    ``as_printed`` is ``sum_{i=1}^m (-1)^i C(m, i) (1 - i x/t0)_+^(i-1)``;
    ``standard`` is ``sum_{j=0}^{m+1} (-1)^j C(m+1, j) (1 - j x/t0)_+^m``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0 <= x <= t0:
        raise ValueError("need 0 <= x <= t0")
    i = np.arange(1, m + 1)
    printed = float(np.sum((-1.0) ** i * comb(m, i) * _pos_pow(1 - i * x / t0, i - 1)))
    j = np.arange(0, m + 2)
    standard = float(np.sum((-1.0) ** j * comb(m + 1, j) * _pos_pow(1 - j * x / t0, m)))
    return printed, standard


def longest_interval_samples(m: int, t0: float, n: int, seed: int = 0) -> np.ndarray:
    """Longest gap among ``m`` uniform points on ``[0, t0]``, ``n`` replications."""
    fam = StreamFamily(seed)
    keys = fam.path_keys(np.arange(n))
    u = np.sort(fam.uniform(keys[:, None], GENERIC, np.arange(m, dtype=np.uint64)[None, :]), axis=1) * t0
    pts = np.concatenate([np.zeros((n, 1)), u, np.full((n, 1), t0)], axis=1)
    return np.diff(pts, axis=1).max(axis=1)


def dkw_band(n: int, alpha: float = 0.01) -> float:
    """Half-width of the DKW confidence band at level ``1 - alpha``."""
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n))


def empirical_cdf(samples: np.ndarray, xs) -> np.ndarray:
    s = np.sort(samples)
    return np.searchsorted(s, np.asarray(xs, dtype=float), side="right") / len(s)


def write_interval_csv(rows, filename) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "as_printed", "standard", "empirical"])
        for row in rows:
            w.writerow([fmt(v) for v in row])

