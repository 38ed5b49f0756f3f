"""Reduced Malliavin covariance, its smallest eigenvalue and Monte Carlo diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import CovarianceObserver, Path, SimConfig, _Compiled, fmt, map_chunks, run_batch
from .fields import FieldSystem, eval_field


@dataclass
class McEstimate:
    mean: float
    se: float
    n: int
    seed: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n": self.n, "seed": self.seed}


@dataclass
class CovarianceMatrix:
    C: np.ndarray
    t: float
    lambda_min: float

    @classmethod
    def from_matrix(cls, C: np.ndarray, t: float) -> "CovarianceMatrix":
        C = 0.5 * (C + C.T)
        return cls(C=C, t=t, lambda_min=smallest_eigenvalue(C))


def smallest_eigenvalue(C: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue(s), clamped at 0; works on stacks ``(..., e, e)``."""
    lam = np.linalg.eigvalsh(0.5 * (C + np.swapaxes(C, -1, -2)))[..., 0]
    return np.clip(lam, 0.0, None) if np.ndim(lam) else max(float(lam), 0.0)


def reduced_covariance(path: Path, V: Sequence) -> CovarianceMatrix:
    """Left-endpoint sum of ``sum_i (J_inv V_i(x))(J_inv V_i(x))^T`` over the path grid."""
    if path.J_inv is None:
        raise ValueError("path was simulated without Jacobians")
    e = path.x.shape[1]
    h = np.diff(path.grid)
    xs, Ji, ts = path.x[:-1], path.J_inv[:-1], path.grid[:-1]
    C = np.zeros((e, e))
    for Vi in V:
        w = np.einsum("kab,kb->ka", Ji, eval_field(Vi, xs, None, ts) * np.ones_like(xs))
        C += np.einsum("k,ka,kb->ab", h, w, w)
    return CovarianceMatrix.from_matrix(C, float(path.grid[-1]))


def covariance_batch(system: FieldSystem, x0, cfg: SimConfig, n_paths: int, threads: int = 1,
                     truncated: bool = False) -> np.ndarray:
    """``C_T`` for paths ``0 .. n_paths-1``; shape ``(n_paths, e, e)``."""
    compiled = _Compiled(system, cfg.cut, cfg.gaussian_smalljump_correction)

    def work(a, b):
        ob = CovarianceObserver(system.V)
        run_batch(system, x0, cfg, np.arange(a, b), [ob], truncated=truncated, jacobians=True,
                  compiled=compiled)
        return 0.5 * (ob.C + np.swapaxes(ob.C, -1, -2))

    return np.concatenate(map_chunks(work, n_paths, threads))


# -- tail probabilities -------------------------------------------------------------------


def wilson_se(hits: int, n: int, z: float = 1.0) -> float:
    """Half-width of the Wilson score interval at ``z`` standard errors."""
    p = hits / n
    return z / (1.0 + z * z / n) * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))


@dataclass
class TailEstimate:
    eps_grid: list
    probs: list  # McEstimate per eps
    hits: list
    fitted_slope: Optional[float]
    p_moment: Optional[McEstimate] = None
    direction: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "eps_grid": list(self.eps_grid),
            "probs": [p.to_dict() for p in self.probs],
            "hits": list(self.hits),
            "fitted_slope": self.fitted_slope,
            "p_moment": None if self.p_moment is None else self.p_moment.to_dict(),
            "direction": self.direction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, filename) -> None:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "prob", "se", "n"])
            for eps, p in zip(self.eps_grid, self.probs):
                w.writerow([fmt(eps), fmt(p.mean), fmt(p.se), p.n])

    def monotone(self, k: float = 2.0) -> bool:
        """Probabilities do not increase as eps decreases, up to ``k`` standard errors."""
        return monotone_within(self.probs, k)


def monotone_within(estimates: Sequence[McEstimate], k: float = 2.0) -> bool:
    """True when each successive estimate exceeds its predecessor by at most ``k`` combined SEs."""
    for a, b in zip(estimates[:-1], estimates[1:]):
        if b.mean - a.mean > k * math.hypot(a.se, b.se):
            return False
    return True


def fit_loglog_slope(eps, probs: Sequence[McEstimate], hits, min_hits: int = 5) -> Optional[float]:
    """Weighted least-squares slope of ``log p`` on ``log eps`` over entries with enough hits."""
    use = [i for i, h in enumerate(hits) if h >= min_hits]
    if len(use) < 2:
        return None
    lx = np.log(np.asarray(eps, dtype=float)[use])
    p = np.array([probs[i].mean for i in use])
    se = np.array([probs[i].se for i in use])
    if np.ptp(lx) == 0:
        return None
    ly = np.log(p)
    w = p / se  # 1 / sd(log p) by the delta method
    slope, _ = np.polyfit(lx, ly, 1, w=w)
    return float(slope)


def tail_probability(system: FieldSystem, x0, cfg: SimConfig, eps_grid, n_paths: int,
                     u: Optional[Sequence[float]] = None, threads: int = 1,
                     covariances: Optional[np.ndarray] = None) -> TailEstimate:
    """Monte Carlo ``P(Lambda <= eps)`` (or ``P(u^T C u <= eps)``) across ``eps_grid``."""
    eps = [float(v) for v in eps_grid]
    if any(v <= 0 for v in eps):
        raise ValueError("eps_grid must be positive")
    if any(b >= a for a, b in zip(eps[:-1], eps[1:])):
        raise ValueError("eps_grid must be strictly decreasing")
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    C = covariances if covariances is not None else covariance_batch(system, x0, cfg, n_paths, threads)
    if u is None:
        stat = smallest_eigenvalue(C)
        direction = None
    else:
        uu = np.asarray(u, dtype=float)
        uu = uu / np.linalg.norm(uu)
        stat = np.einsum("a,pab,b->p", uu, C, uu)
        direction = uu.tolist()
    n = len(stat)
    hits = [int(np.count_nonzero(stat <= v)) for v in eps]
    probs = [McEstimate(h / n, wilson_se(h, n), n, cfg.seed) for h in hits]
    return TailEstimate(eps_grid=eps, probs=probs, hits=hits, fitted_slope=fit_loglog_slope(eps, probs, hits),
                        direction=direction)


def inverse_moment(system: FieldSystem, x0, cfg: SimConfig, p: float, n_paths: int, floor: float,
                   threads: int = 1, covariances: Optional[np.ndarray] = None) -> McEstimate:
    """Mean and SE of ``max(Lambda, floor)**(-p)``."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    if p < 2:
        raise ValueError("p must be at least 2")
    C = covariances if covariances is not None else covariance_batch(system, x0, cfg, n_paths, threads)
    vals = np.maximum(smallest_eigenvalue(C), floor) ** (-p)
    n = len(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return McEstimate(float(vals.mean()), se, n, cfg.seed)
