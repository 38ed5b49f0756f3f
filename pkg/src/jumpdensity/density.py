"""Kernel density estimates of the law of ``x_T`` and simple diagnostics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .engine import SimConfig, fmt, simulate_endpoints
from .models import linear_additive

MAX_DIM = 3


@dataclass
class DensityEstimate:
    grid: list  # one 1-d array of evaluation points per dimension
    values: np.ndarray  # shape (len(grid[0]), ..., len(grid[e-1]))
    bandwidth: np.ndarray
    n_samples: int

    @property
    def spacing(self) -> np.ndarray:
        return np.array([g[1] - g[0] for g in self.grid])

    def integral(self) -> float:
        v = self.values
        for axis in reversed(range(len(self.grid))):
            v = np.trapezoid(v, self.grid[axis], axis=axis)
        return float(v)

    def to_csv(self, filename) -> None:
        e = len(self.grid)
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(e)] + ["density"])
            for idx in itertools.product(*(range(len(g)) for g in self.grid)):
                pt = [self.grid[a][i] for a, i in enumerate(idx)]
                w.writerow([fmt(v) for v in pt] + [fmt(self.values[idx])])


def silverman(samples: np.ndarray) -> np.ndarray:
    """``1.06 sd n^(-1/5)`` per dimension."""
    n = samples.shape[0]
    return 1.06 * samples.std(axis=0, ddof=1) * n ** (-0.2)


def make_grid(samples: np.ndarray, grid_spec) -> list:
    """``grid_spec`` is a list of ``(lo, hi, n)`` per dimension, or an int ``n``
    meaning ``n`` points over mean ± 6 sd."""
    e = samples.shape[1]
    if isinstance(grid_spec, (int, np.integer)):
        mu, sd = samples.mean(axis=0), samples.std(axis=0, ddof=1)
        return [np.linspace(mu[i] - 6 * sd[i], mu[i] + 6 * sd[i], int(grid_spec)) for i in range(e)]
    if len(grid_spec) != e:
        raise ValueError("grid_spec needs one (lo, hi, n) triple per dimension")
    return [np.linspace(lo, hi, int(n)) for lo, hi, n in grid_spec]


def kde(samples, grid_spec=201, bandwidth: Optional[Sequence[float]] = None,
        block: int = 1 << 22) -> DensityEstimate:
    """Gaussian product-kernel density estimate on a rectangular grid."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n, e = s.shape
    if n < 100:
        raise ValueError("need at least 100 samples")
    if e > MAX_DIM:
        raise ValueError(f"joint estimates are limited to {MAX_DIM} dimensions; use marginals")
    s = s[np.lexsort(s.T[::-1])]  # fixed summation order: permutation-invariant output
    sd = s.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("zero sample variance in some dimension")
    h = silverman(s) if bandwidth is None else np.asarray(bandwidth, dtype=float)
    if h.shape != (e,) or np.any(h <= 0):
        raise ValueError("bandwidth must be positive, one per dimension")
    grid = make_grid(s, grid_spec)
    # per-dimension kernel matrices K_a[i, k] = phi((g_i - s_k) / h_a) / h_a, combined in blocks of samples
    shape = tuple(len(g) for g in grid)
    out = np.zeros(shape)
    step = max(1, block // max(shape))
    for start in range(0, n, step):
        chunk = s[start:start + step]
        mats = [norm.pdf((grid[a][:, None] - chunk[None, :, a]) / h[a]) / h[a] for a in range(e)]
        if e == 1:
            out += mats[0].sum(axis=1)
        elif e == 2:
            out += mats[0] @ mats[1].T
        else:
            out += np.einsum("ik,jk,lk->ijl", *mats)
    return DensityEstimate(grid=grid, values=out / n, bandwidth=h, n_samples=n)


def ou_baseline(x0: float, a: float, sigma: float, T: float):
    """Mean and variance of the Ornstein–Uhlenbeck endpoint."""
    mean = x0 * math.exp(a * T)
    var = sigma**2 * T if a == 0 else sigma**2 * math.expm1(2 * a * T) / (2 * a)
    return mean, var


def gaussian_baseline_compare(a: float, sigma: float, x0: float, cfg: SimConfig, n_paths: int,
                              threads: int = 1, n_grid: int = 401):
    """Trapezoid L1 distance between the KDE of simulated ``x_T`` and the exact Gaussian.

    Returns ``(l1_error, estimate)``.
    """
    xs = simulate_endpoints(linear_additive(a, sigma), [x0], cfg, n_paths, threads)[:, 0]
    mean, var = ou_baseline(x0, a, sigma, cfg.T)
    sd = math.sqrt(var)
    est = kde(xs, [(mean - 6 * sd, mean + 6 * sd, n_grid)])
    exact = norm.pdf(est.grid[0], mean, sd)
    return float(np.trapezoid(np.abs(est.values - exact), est.grid[0])), est


def smoothness_proxy(est: DensityEstimate, order: int = 1) -> float:
    """Largest central finite difference of the given order, divided by the peak density.

    Qualitative only: finitely many samples cannot certify smoothness.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if any(len(g) < 5 for g in est.grid):
        raise ValueError("grid needs at least 5 points per dimension")
    v = est.values
    peak = float(np.max(v))
    if peak == 0:
        return 0.0
    worst = 0.0
    for axis, g in enumerate(est.grid):
        hstep = g[1] - g[0]
        lo = np.take(v, range(0, v.shape[axis] - 2), axis=axis)
        mid = np.take(v, range(1, v.shape[axis] - 1), axis=axis)
        hi = np.take(v, range(2, v.shape[axis]), axis=axis)
        d = (hi - lo) / (2 * hstep) if order == 1 else (hi - 2 * mid + lo) / hstep**2
        worst = max(worst, float(np.max(np.abs(d))))
    return worst / peak
