"""Jump measures on the real line: tail masses, quadrature, sampling, conditions.

A measure is described on jump magnitudes: ``G(dy) = g(|y|) dy`` on
``lo < |y| <= hi`` when symmetric, or ``g(y) dy`` on ``lo < y <= hi`` when
not.  Only one-dimensional marks are supported.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats

from . import dsl
from .rng import JUMP_COUNT, JUMP_MARK, JUMP_SIGN, JUMP_TIME, PathStream, StreamFamily

DEFAULT_MAX_EVENTS = 10**7


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


class EventOverflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class LevyMeasure:
    """Jump measure with density ``coef * r**(-exponent)`` or a DSL density.

    ``kappa`` is the order used in the small-jump growth conditions; for the
    power law it equals the density exponent, for finite measures it is ``n``.
    """

    name: str
    kappa: float
    lo: float = 0.0
    hi: float = 1.0
    symmetric: bool = True
    exponent: Optional[float] = None
    coef: float = 1.0
    density_text: Optional[str] = None
    n: int = 1

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi):
            raise ValueError(f"support needs 0 <= lo < hi, got ({self.lo}, {self.hi})")
        if (self.exponent is None) == (self.density_text is None):
            raise ValueError("give exactly one of exponent or density_text")
        if self.n != 1:
            raise ValueError("only one-dimensional marks are supported")

    # -- construction ------------------------------------------------------
    @classmethod
    def power_law(cls, kappa: float, hi: float = 1.0, symmetric: bool = True, lo: float = 0.0):
        return cls("power_law", kappa=kappa, lo=lo, hi=hi, symmetric=symmetric, exponent=kappa)

    @classmethod
    def finite_activity_uniform(cls, rate: float = 5.0, hi: float = 1.0):
        """Rate ``rate`` with marks uniform on ``[-hi, hi]``."""
        return cls(
            "finite_activity_uniform", kappa=1.0, hi=hi, exponent=0.0, coef=rate / (2.0 * hi)
        )

    @classmethod
    def custom(cls, density: str, kappa: float, lo: float = 0.0, hi: float = 1.0, symmetric: bool = True):
        dsl.parse_expr(density, 0, 1)
        return cls("custom", kappa=kappa, lo=lo, hi=hi, symmetric=symmetric, density_text=density)

    def to_dict(self) -> dict:
        if self.name == "power_law":
            return {"name": "power_law", "kappa": self.kappa, "support": [self.lo, self.hi],
                    "symmetric": self.symmetric}
        if self.name == "finite_activity_uniform":
            return {"name": self.name, "rate": self.coef * 2.0 * self.hi, "support": [0.0, self.hi]}
        return {"name": "custom", "density": self.density_text, "kappa": self.kappa,
                "support": [self.lo, self.hi], "symmetric": self.symmetric}

    # -- density -----------------------------------------------------------
    @cached_property
    def _expr(self):
        return dsl.parse_expr(self.density_text, 0, 1)

    def density(self, r) -> np.ndarray:
        """Density on magnitudes ``r`` in the support (per sign when symmetric)."""
        r = np.asarray(r, dtype=float)
        if self.exponent is None:
            return np.broadcast_to(dsl.eval_expr(self._expr, None, r[..., None]), r.shape).astype(float)
        if self.exponent == 0.0:
            return np.full_like(r, self.coef)
        with np.errstate(divide="ignore"):
            return self.coef * np.power(r, -self.exponent)

    @property
    def signs(self) -> int:
        return 2 if self.symmetric else 1

    def total_mass_finite(self) -> bool:
        if self.lo > 0:
            return True
        if self.exponent is not None:
            return self.exponent < 1.0
        try:
            v, _ = _adaptive(self.density, 0.0, self.hi, singular_at_lo=True)
        except QuadratureError:
            return False
        return math.isfinite(v) and v < 1e300


def f_of(kappa: float, n: int, x: float) -> float:
    """Small-jump growth profile: ``log(1/x)`` if kappa == n else ``x**(n - kappa)``."""
    if kappa < n:
        raise ValueError(f"need kappa >= n, got kappa={kappa}, n={n}")
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    if kappa == n:
        return math.log(1.0 / x)
    return x ** (-(kappa - n))


# -- quadrature ----------------------------------------------------------------


def _adaptive(fn, a: float, b: float, singular_at_lo: bool = False, epsrel: float = 1e-8):
    """Adaptive quadrature of a scalar function with geometric splitting toward ``a``."""
    if b <= a:
        return 0.0, 0.0
    if singular_at_lo or a == 0.0:
        edges = [b]
        while len(edges) < 60 and edges[-1] / 2.0 > a:
            edges.append(edges[-1] / 2.0)
        edges.append(a)
    elif b / a > 4.0:
        edges = list(np.geomspace(b, a, int(math.ceil(math.log2(b / a))) + 1))
    else:
        edges = [b, a]
    total, err = 0.0, 0.0
    for right, left in zip(edges[:-1], edges[1:]):
        res = integrate.quad(lambda r: float(fn(r)), left, right, epsabs=0.0, epsrel=epsrel,
                             limit=200, full_output=1)
        v, e = res[0], res[1]
        if len(res) > 3 and not (math.isfinite(v) and e <= 1e-6 * abs(v) + 1e-14):
            raise QuadratureError("quadrature did not converge", e)
        total += v
        err += e
    return total, err


def tail_mass(G: LevyMeasure, eps: float) -> float:
    """``G({|y| > eps})`` by adaptive quadrature (relative tolerance 1e-8)."""
    if eps < 0:
        raise ValueError("cut must be non-negative")
    a = max(eps, G.lo)
    if a >= G.hi:
        return 0.0
    if a == 0.0 and not G.total_mass_finite():
        return math.inf
    v, _ = _adaptive(G.density, a, G.hi, singular_at_lo=(a == 0.0))
    return G.signs * v


@dataclass(frozen=True)
class Rule:
    """Fixed quadrature rule for ``∫ h(y) G(dy)`` over a region: ``sum w * h(nodes)``."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def integrate(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        return np.tensordot(values, self.weights, axes=([axis], [0])) if values.ndim else values * 0.0


_GL_CACHE: dict = {}


def _gauss(order: int):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def measure_rule(G: LevyMeasure, lo: float = 0.0, hi: float = math.inf, order: int = 8,
                 depth: int = 60) -> Rule:
    """Gauss–Legendre rule on dyadic panels for the region ``lo < |y| <= hi``.

    When the region reaches 0, panels halve down to ``hi * 2**-depth`` and one
    last panel covers the remainder.
    """
    a = max(lo, G.lo)
    b = min(hi, G.hi)
    if a >= b:
        return Rule(np.zeros(0), np.zeros(0))
    edges = [b]
    while edges[-1] / 2.0 > a and len(edges) <= depth:
        edges.append(edges[-1] / 2.0)
    edges.append(a)
    x, w = _gauss(order)
    nodes, weights = [], []
    for right, left in zip(edges[:-1], edges[1:]):
        half = 0.5 * (right - left)
        r = left + half * (x + 1.0)
        nodes.append(r)
        weights.append(half * w)
    r = np.concatenate(nodes)
    wr = np.concatenate(weights) * G.density(r)
    if G.symmetric:
        return Rule(np.concatenate([r, -r]), np.concatenate([wr, wr]))
    return Rule(r, wr)


def compensator_integral(Y, G: LevyMeasure, region: str, cut: float, x, t: float = 0.0,
                         epsrel: float = 1e-8) -> np.ndarray:
    """``∫ Y(x, y) G(dy)`` over ``{|y| > cut}`` (region="above") or ``{|y| < cut}`` ("below").

    ``Y`` is a sequence of DSL expressions (one per state component).
    """
    x = np.asarray(x, dtype=float)
    if region == "above":
        a, b = max(cut, G.lo), G.hi
    elif region == "below":
        a, b = G.lo, min(cut, G.hi)
    else:
        raise ValueError(f"unknown region {region!r}")
    out = np.zeros(len(Y))
    if a >= b:
        return out
    split = min(1.0, cut) if region == "below" else None
    for i, comp in enumerate(Y):
        if dsl.is_zero(comp):
            continue

        def h(r, comp=comp):
            v = dsl.eval_expr(comp, x, np.array([r]), t) * G.density(r)
            if G.symmetric:
                v = v + dsl.eval_expr(comp, x, np.array([-r]), t) * G.density(r)
            return v

        if split is not None and a < split < b:
            v1, _ = _adaptive(h, a, split, singular_at_lo=(a == 0.0), epsrel=epsrel)
            v2, _ = _adaptive(h, split, b, epsrel=epsrel)
            out[i] = v1 + v2
        else:
            out[i], _ = _adaptive(h, a, b, singular_at_lo=(a == 0.0), epsrel=epsrel)
    return out


# -- mark sampling -------------------------------------------------------------


def _magnitude_sampler(G: LevyMeasure, a: float):
    """Inverse CDF of the normalised restriction of G to magnitudes in (a, hi]."""
    b = G.hi
    if G.exponent is not None:
        k = G.exponent
        if k == 1.0:
            if a == 0.0:
                raise ValueError("infinite mass near 0")
            return lambda u: a * (b / a) ** u
        p = 1.0 - k
        if a == 0.0 and p <= 0:
            raise ValueError("infinite mass near 0")
        lo_p, hi_p = a**p, b**p
        return lambda u: (lo_p + u * (hi_p - lo_p)) ** (1.0 / p)
    # numeric CDF: 4-point Gauss on each cell of a geometric grid
    inner = np.geomspace(max(a, b * 1e-15), b, 20001)
    grid = np.concatenate([[a], inner]) if a < inner[0] else inner
    x, w = _gauss(4)
    left, right = grid[:-1, None], grid[1:, None]
    half = 0.5 * (right - left)
    cells = (G.density(left + half * (x + 1.0)) * half * w).sum(1)
    cdf = np.concatenate([[0.0], np.cumsum(cells)])
    cdf /= cdf[-1]
    return lambda u: np.interp(u, cdf, grid)


def sample_jumps_batch(G: LevyMeasure, cut: float, T: float, family: StreamFamily, paths,
                       max_events: int = DEFAULT_MAX_EVENTS, lam: Optional[float] = None):
    """Jumps with ``|y| > cut`` on ``[0, T]`` for many paths at once.

    Returns ``(owner, times, marks)`` where ``owner`` indexes into ``paths``;
    entries are sorted by owner, then time.  Each path's jumps depend only on
    ``(seed, path index)``.
    """
    paths = np.asarray(paths)
    if lam is None:
        lam = tail_mass(G, cut)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    if lam == 0.0 or len(paths) == 0:
        return empty
    mean = lam * T
    if not math.isfinite(mean) or mean > max_events:
        raise EventOverflowError(
            f"expected {mean:.3g} jumps per path exceeds the limit {max_events}; raise the cut"
        )
    keys = family.path_keys(paths)
    u = family.uniform(keys, JUMP_COUNT, 0)
    counts = stats.poisson.ppf(u, mean).astype(np.int64)
    if counts.max(initial=0) > max_events:
        raise EventOverflowError(f"sampled jump count exceeds the limit {max_events}")
    total = int(counts.sum())
    if total == 0:
        return empty
    owner = np.repeat(np.arange(len(paths)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    idx = (np.arange(total) - start).astype(np.uint64)
    k = keys[owner]
    times = T * family.uniform(k, JUMP_TIME, idx)
    a = max(cut, G.lo)
    mags = _magnitude_sampler(G, a)(family.uniform(k, JUMP_MARK, idx))
    mags = np.maximum(mags, np.nextafter(a, np.inf)) if a > 0 else mags
    if G.symmetric:
        sign = np.where(family.uniform(k, JUMP_SIGN, idx) < 0.5, -1.0, 1.0)
        marks = sign * mags
    else:
        marks = mags
    order = np.lexsort((times, owner))
    return owner[order], times[order], marks[order]


def sample_jumps(G: LevyMeasure, cut: float, T: float, rng: PathStream,
                 max_events: int = DEFAULT_MAX_EVENTS) -> list[tuple[float, float]]:
    """Jump times and marks above ``cut`` for the single path behind ``rng``."""
    _, times, marks = sample_jumps_batch(G, cut, T, rng.family, [rng.index], max_events)
    return list(zip(times.tolist(), marks.tolist()))


# -- condition checks ------------------------------------------------------------


@dataclass(frozen=True)
class Tolerances:
    """Thresholds for the grid surrogates; larger values are looser."""

    decay_margin: float = 0.02  # annulus contributions must shrink by at least this factor
    growth: float = 0.05  # allowed relative growth of a limsup sequence over its tail
    bound: float = 1e12  # any surrogate above this counts as infinite

    def looser_or_equal(self, other: "Tolerances") -> bool:
        return (self.decay_margin <= other.decay_margin and self.growth >= other.growth
                and self.bound >= other.bound)


@dataclass
class ConditionReport:
    cond1_sup_integral: float
    cond2_limsup_ratio: float
    cond2_moment: float
    cond3_kphi: float
    cond3_constant: float
    alpha_used: float
    beta_used: float
    verdicts: dict
    details: dict = field(default_factory=dict)

    @property
    def all_true(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return asdict(self)


_KGRID = np.arange(4, 21)


def _bounded_tail(seq: np.ndarray, tol: Tolerances) -> bool:
    seq = np.asarray(seq, dtype=float)
    if not np.all(np.isfinite(seq)) or seq.max(initial=0.0) > tol.bound:
        return False
    head, tail = seq[-8:-4].max(), seq[-4:].max()
    if tail <= 0.0:
        return True
    return tail <= (1.0 + tol.growth) * head if head > 0 else False


def _annulus_sums(values_fn, G: LevyMeasure, kmax: int = 20, order: int = 8):
    """Integrals of a non-negative function over ``2**-(k+1) < |y| <= 2**-k``, k = 0..kmax.

    The first entry also absorbs the part of the support above 1.
    """
    out = []
    for k in range(kmax + 1):
        lo = 2.0 ** -(k + 1)
        hi = 2.0**-k if k > 0 else math.inf
        rule = measure_rule(G, lo, hi, order=order, depth=4)
        out.append(float(rule.weights @ values_fn(rule.nodes)) if len(rule) else 0.0)
    return np.array(out)


def _integral_with_decay(annuli: np.ndarray, tol: Tolerances):
    """Sum annulus contributions and extrapolate the geometric remainder toward 0."""
    a = np.asarray(annuli)
    tail = a[-4:]
    if tail[-1] <= 0.0 and tail[-2] <= 0.0:
        return float(a.sum()), 0.0, True
    prev = a[-4] + a[-3]
    last = a[-2] + a[-1]
    rate = math.sqrt(last / prev) if prev > 0 else math.inf
    ok = rate <= 1.0 - tol.decay_margin
    if not ok:
        return math.inf, rate, False
    return float(a.sum() + a[-1] * rate / (1.0 - rate)), rate, True


def sample_points(box: Sequence[Sequence[float]], n_random: int = 16, seed: int = 12345) -> np.ndarray:
    """Grid (3 points per axis) plus uniform random points in ``box``."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    axes = [np.linspace(lo, hi, 3) for lo, hi in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(box))
    fam = StreamFamily(seed)
    keys = fam.path_keys(np.arange(n_random))[:, None]
    u = fam.uniform(keys, 99, np.arange(len(box))[None, :]) if n_random else np.zeros((0, len(box)))
    rnd = box[:, 0] + u * (box[:, 1] - box[:, 0])
    return np.vstack([grid, rnd])


def check_conditions(G: LevyMeasure, Y, alpha: float, sample_box, beta: float = 0.5,
                     tol: Tolerances = Tolerances(), n_random: int = 16) -> ConditionReport:
    """Grid surrogates for the integrability, small-jump growth and dominance conditions.

    ``Y`` is a list of DSL expressions in ``x`` and ``y1`` (or None for no jumps).
    Every limsup is replaced by the maximum over ``eps = 2**-k``, ``k = 4..20``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    xs = sample_points(sample_box, n_random)
    Y = [] if Y is None else list(Y)
    e = xs.shape[1]
    n = G.n
    live = [c for c in Y if not dsl.is_zero(c)]

    # integrability of |Y(x, .)| against G, uniformly over the sampled states
    sup_int, rates = 0.0, []
    ok1 = True
    if live:
        for x in xs:
            def absY(y, x=x):
                vals = np.stack([np.broadcast_to(dsl.eval_expr(c, x, y[:, None]), y.shape) for c in Y])
                return np.sqrt((vals**2).sum(0))
            val, rate, ok = _integral_with_decay(_annulus_sums(absY, G), tol)
            rates.append(rate)
            ok1 &= ok
            sup_int = max(sup_int, val)
    cond1 = ok1 and sup_int <= tol.bound

    # growth of the tail mass relative to f
    eps = 2.0 ** -_KGRID.astype(float)
    if G.kappa >= n:
        ratio = np.array([tail_mass(G, ep) / f_of(G.kappa, n, ep) for ep in eps])
        cond2a = _bounded_tail(ratio, tol)
        lim_ratio = float(ratio.max())
    else:
        ratio, cond2a, lim_ratio = np.full(len(eps), np.inf), False, math.inf
    power = G.kappa - n + beta
    mom = []
    for ep in eps:
        rule = measure_rule(G, 0.0, ep, depth=60)
        mom.append(float(rule.weights @ np.abs(rule.nodes) ** power) / ep**beta if len(rule) else 0.0)
    mom = np.array(mom)
    full_moment, _, ok_moment = _integral_with_decay(_annulus_sums(lambda y: np.abs(y) ** power, G), tol)
    cond2c = _bounded_tail(mom, tol) and ok_moment
    cond2 = cond2a and cond2c and G.kappa >= n

    # dominance of Y and its x-derivatives by phi(y) = |y|
    kphi_seq = eps ** (1.0 - (G.kappa - n + alpha))
    kphi = float(kphi_seq.max())
    phi_l1, _, ok_phi = _integral_with_decay(_annulus_sums(np.abs, G), tol)
    derivs = _derivative_exprs(Y, e) if live else []
    ygrid = np.concatenate([2.0 ** -np.arange(0, 21, dtype=float)])
    ygrid = ygrid[(ygrid > G.lo) & (ygrid <= G.hi)]
    if G.symmetric:
        ygrid = np.concatenate([ygrid, -ygrid])
    const_by_y = np.zeros(len(ygrid))
    for level in derivs:
        for j, yv in enumerate(ygrid):
            vals = np.stack([np.broadcast_to(dsl.eval_expr(c, xs, np.array([yv])), xs.shape[:1]) for c in level])
            norm = np.sqrt((vals**2).sum(0)).max()
            const_by_y[j] = max(const_by_y[j], norm / abs(yv))
    c_const = float(const_by_y.max(initial=0.0))
    mags = np.abs(ygrid)
    order = np.argsort(-mags, kind="stable")
    cond3 = (_bounded_tail(kphi_seq, tol) and ok_phi and phi_l1 <= tol.bound
             and c_const <= tol.bound
             and (len(order) < 8 or _bounded_tail(_running_max_by_scale(mags[order], const_by_y[order]), tol)))

    return ConditionReport(
        cond1_sup_integral=sup_int if cond1 else math.inf,
        cond2_limsup_ratio=lim_ratio,
        cond2_moment=float(mom.max()),
        cond3_kphi=kphi,
        cond3_constant=c_const,
        alpha_used=alpha,
        beta_used=beta,
        verdicts={"condition1": bool(cond1), "condition2": bool(cond2), "condition3": bool(cond3)},
        details={
            "eps_grid": eps.tolist(),
            "cond2_ratio": ratio.tolist(),
            "cond2_moment_seq": mom.tolist(),
            "moment_integral": full_moment,
            "cond1_decay_rates": rates,
            "phi_l1": phi_l1,
            "surrogate": "limsups replaced by maxima over eps = 2^-k, k = 4..20",
        },
    )


def _running_max_by_scale(mags: np.ndarray, vals: np.ndarray) -> np.ndarray:
    # one value per distinct magnitude, largest magnitude first
    uniq = []
    for m in np.unique(mags)[::-1]:
        uniq.append(vals[mags == m].max())
    return np.array(uniq)


def _derivative_exprs(Y, e: int):
    """Components of Y, DY and D^2Y (x-derivatives) as flat expression lists."""
    xs = [dsl.Var("x", j + 1) for j in range(e)]
    d0 = [dsl.canonical(c) for c in Y]
    d1 = [dsl.diff(c, v) for c in d0 for v in xs]
    d2 = [dsl.diff(c, v) for c in d1 for v in xs]
    return [d0, d1, d2]
