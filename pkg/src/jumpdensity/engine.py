"""Euler scheme for the state and both Jacobian flows, with event-exact jumps.

Between events the scheme is Euler–Maruyama on a fixed base grid.  Jumps with
``|y| > cut`` are inserted at their exact times; jumps below the cut are
dropped together with their compensator, or optionally replaced by a Gaussian
with matching covariance.  The inverse Jacobian is integrated from its own
SDE, never by inverting the forward Jacobian.

Random numbers come from :mod:`jumpdensity.rng`.  The Brownian increment used
on base step ``k``, sub-interval ``j`` (sub-intervals are separated by jump
times) for path ``p`` is a pure function of ``(seed, p, k, j)``, so results do
not depend on batching or thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsl
from .fields import FieldSystem, eval_field, symbolic_jacobian
from .levy import DEFAULT_MAX_EVENTS, measure_rule, sample_jumps_batch, tail_mass
from .rng import BROWNIAN, SMALL_JUMP, PathStream, StreamFamily

CHUNK = 4096
SINGULAR_COND = 1e12


class SingularJumpError(RuntimeError):
    """``I + D1Y(x-, y)`` is (numerically) singular at a jump."""


@dataclass(frozen=True)
class SimConfig:
    T: float = 1.0
    dt: float = 1e-3
    cut: float = 0.01
    seed: int = 0
    gaussian_smalljump_correction: bool = False
    record_jacobians: bool = True
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        if not (self.T > 0 and 0 < self.dt <= self.T):
            raise ValueError("need 0 < dt <= T")
        if self.cut < 0:
            raise ValueError("cut must be non-negative")

    @property
    def n_steps(self) -> int:
        return max(1, int(math.ceil(self.T / self.dt - 1e-9)))

    def base_grid(self) -> np.ndarray:
        g = np.arange(self.n_steps + 1) * self.dt
        g[-1] = self.T
        return g

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "dt": self.dt,
            "cut": self.cut,
            "seed": self.seed,
            "gaussian_smalljump_correction": self.gaussian_smalljump_correction,
            "record_jacobians": self.record_jacobians,
        }


@dataclass
class Path:
    grid: np.ndarray
    x: np.ndarray
    J_fwd: Optional[np.ndarray] = None
    J_inv: Optional[np.ndarray] = None
    jumps: list = field(default_factory=list)

    def to_csv(self, filename) -> None:
        write_path_csv(self, filename)


# -- compiled model ---------------------------------------------------------------------


def _flat(exprs):
    return [c for row in exprs for c in row]


class _Compiled:
    """Symbolic derivatives and jump integrals prepared once per (model, cut)."""

    def __init__(self, system: FieldSystem, cut: float, small_correction: bool):
        e = system.e
        self.system = system
        self.e = e
        self.Z = system.Z
        self.DZ = _flat(symbolic_jacobian(system.Z, e))
        self.V = [Vi for Vi in system.V if not all(c == dsl.ZERO for c in Vi)]
        self.DV = [_flat(symbolic_jacobian(Vi, e)) for Vi in self.V]
        self.jumps = system.has_jumps
        self.cut = cut
        self.small = None
        if not self.jumps:
            return
        G = system.G
        Y = system.Y
        self.G = G
        self.lam = tail_mass(G, cut) if cut < G.hi else 0.0
        y1 = dsl.Var("y", 1)
        dY = [dsl.diff(c, y1) for c in Y]
        affine = all(dsl.is_zero(dsl.diff(c, y1)) for c in dY)
        self.big_rule = measure_rule(G, lo=cut, order=8, depth=60)
        if affine:
            zero = {("y", 1): dsl.ZERO}
            self.Y0 = tuple(dsl.canonical(dsl.substitute(c, zero)) for c in Y)
            self.A = tuple(dsl.canonical(c) for c in dY)
            self.DY0 = _flat(symbolic_jacobian(self.Y0, e))
            self.DA = _flat(symbolic_jacobian(self.A, e))
            r = self.big_rule
            self.m0 = float(r.weights.sum())
            self.m1 = 0.0 if G.symmetric else float(r.weights @ r.nodes)
            self.y0_zero = all(c == dsl.ZERO for c in self.Y0)
        self.affine = affine
        self.Y = Y
        self.DY = _flat(symbolic_jacobian(Y, e))
        if small_correction and cut > 0:
            self.small = measure_rule(G, lo=0.0, hi=min(cut, G.hi), order=8, depth=60)

    # drift of the compensated big jumps, and its x-derivative
    def compensator(self, x, t):
        P, e = x.shape
        if not self.jumps or self.lam == 0.0:
            return None, None
        if self.affine:
            comp = np.zeros((P, e))
            dcomp = np.zeros((P, e, e))
            if not self.y0_zero and self.m0:
                comp += eval_field(self.Y0, x, None, t) * self.m0
                dcomp += eval_field(self.DY0, x, None, t).reshape(P, e, e) * self.m0
            if self.m1:
                comp += eval_field(self.A, x, None, t) * self.m1
                dcomp += eval_field(self.DA, x, None, t).reshape(P, e, e) * self.m1
            return comp, dcomp
        r = self.big_rule
        ys = r.nodes[None, :, None]
        xs = x[:, None, :]
        tt = np.asarray(t)[..., None] if np.ndim(t) else t
        comp = np.einsum("q,pqe->pe", r.weights, eval_field(self.Y, xs, ys, tt))
        dcomp = np.einsum("q,pqe->pe", r.weights, eval_field(self.DY, xs, ys, tt)).reshape(P, e, e)
        return comp, dcomp

    def small_cov_sqrt(self, x, t):
        r = self.small
        ys = r.nodes[None, :, None]
        tt = np.asarray(t)[..., None] if np.ndim(t) else t
        vals = eval_field(self.Y, x[:, None, :], ys, tt)  # (P, Q, e)
        cov = np.einsum("q,pqa,pqb->pab", r.weights, vals, vals)
        w, U = np.linalg.eigh(cov)
        return U * np.sqrt(np.clip(w, 0.0, None))[:, None, :]


# -- observers ------------------------------------------------------------------------------


class Observer:
    """Hooks called by the batch stepper; ``idx`` selects the paths concerned."""

    def start(self, n: int, x, Jf, Ji) -> None:
        pass

    def interval(self, idx, t, h, x, Jf, Ji) -> None:
        """Called with left-endpoint values before each Euler sub-step."""

    def point(self, idx, t, x, Jf, Ji, jump: bool) -> None:
        """Called with the values after each sub-step or jump."""


class PathRecorder(Observer):
    """Records the full trajectory of a batch of (typically one) paths."""

    def start(self, n, x, Jf, Ji):
        self.rows = [[(0.0, x[i].copy(), None if Jf is None else Jf[i].copy(),
                       None if Ji is None else Ji[i].copy())] for i in range(n)]

    def point(self, idx, t, x, Jf, Ji, jump):
        ids = _as_indices(idx, len(self.rows))
        for pos, i in enumerate(ids):
            ti = float(t[pos]) if np.ndim(t) else float(t)
            row = (ti, x[pos].copy(), None if Jf is None else Jf[pos].copy(),
                   None if Ji is None else Ji[pos].copy())
            if jump:
                self.rows[i][-1] = row  # jump at an existing grid time replaces the left value
            else:
                self.rows[i].append(row)


class EndpointObserver(Observer):
    def start(self, n, x, Jf, Ji):
        self.x = x.copy()

    def point(self, idx, t, x, Jf, Ji, jump):
        self.x[idx] = x


class ResidualObserver(Observer):
    """Running ``max_t max_ij |J_inv J_fwd - I|`` per path."""

    def start(self, n, x, Jf, Ji):
        self.res = np.zeros(n)

    def point(self, idx, t, x, Jf, Ji, jump):
        e = Jf.shape[-1]
        r = np.abs(Ji @ Jf - np.eye(e)).max(axis=(-2, -1))
        self.res[idx] = np.maximum(self.res[idx], r)


class CovarianceObserver(Observer):
    """Left-endpoint Riemann sum of ``sum_i (J_inv V_i)(J_inv V_i)^T``."""

    def __init__(self, V: Sequence):
        self.V = list(V)

    def start(self, n, x, Jf, Ji):
        e = x.shape[1]
        self.C = np.zeros((n, e, e))

    def interval(self, idx, t, h, x, Jf, Ji):
        acc = 0.0
        for Vi in self.V:
            w = np.einsum("pab,pb->pa", Ji, eval_field(Vi, x, None, t) * np.ones_like(x))
            acc = acc + w[:, :, None] * w[:, None, :]
        self.C[idx] += acc * np.reshape(h, (-1, 1, 1))


def _as_indices(idx, n):
    if isinstance(idx, slice):
        return range(n)[idx]
    return np.asarray(idx)


# -- the stepper --------------------------------------------------------------------------------


def _take(a, idx):
    return None if a is None else a[idx]


def run_batch(system: FieldSystem, x0, cfg: SimConfig, paths, observers: Sequence[Observer] = (),
              truncated: bool = False, jacobians: Optional[bool] = None,
              compiled: Optional[_Compiled] = None):
    """Simulate the paths with the given indices; returns ``(x_T, Jf_T, Ji_T)``.

    With ``truncated=True`` jumps above the cut are never applied, while the
    compensator drift of those jumps is kept.
    """
    paths = np.asarray(paths, dtype=np.int64)
    P = len(paths)
    e = system.e
    comp = compiled or _Compiled(system, cfg.cut, cfg.gaussian_smalljump_correction)
    jac = cfg.record_jacobians if jacobians is None else jacobians
    family = StreamFamily(cfg.seed)
    keys = family.path_keys(paths)

    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, e)).copy()
    Jf = np.broadcast_to(np.eye(e), (P, e, e)).copy() if jac else None
    Ji = np.broadcast_to(np.eye(e), (P, e, e)).copy() if jac else None
    for ob in observers:
        ob.start(P, x, Jf, Ji)

    grid = cfg.base_grid()
    if comp.jumps and not truncated and comp.lam > 0:
        owner, times, marks = sample_jumps_batch(system.G, cfg.cut, cfg.T, family, paths,
                                                 cfg.max_events, lam=comp.lam)
        step_of = np.clip(np.searchsorted(grid, times, side="left") - 1, 0, len(grid) - 2)
        order = np.lexsort((times, owner, step_of))
        owner, times, marks, step_of = owner[order], times[order], marks[order], step_of[order]
        bounds = np.searchsorted(step_of, np.arange(len(grid)))
    else:
        owner = times = marks = step_of = None

    nV = len(comp.V)
    d_idx = np.arange(max(nV, 1), dtype=np.uint64)
    e_idx = np.arange(e, dtype=np.uint64)

    def substep(idx, t, h, k, j):
        nonlocal x, Jf, Ji
        xs, Jfs, Jis = x[idx], _take(Jf, idx), _take(Ji, idx)
        for ob in observers:
            ob.interval(idx, t, h, xs, Jfs, Jis)
        hcol = np.reshape(h, (-1, 1))
        sq = np.sqrt(hcol)
        kidx = keys[idx]
        drift = eval_field(comp.Z, xs, None, t) * np.ones_like(xs)
        c, dc = comp.compensator(xs, t)
        if c is not None:
            drift = drift - c
        new_x = xs + drift * hcol
        if nV:
            dW = family.normal(kidx[:, None], BROWNIAN, np.uint64(k), np.uint64(j), d_idx[None, :nV]) * sq
            for i, Vi in enumerate(comp.V):
                new_x = new_x + eval_field(Vi, xs, None, t) * dW[:, i:i + 1]
        if comp.small is not None:
            S = comp.small_cov_sqrt(xs, t)
            xi = family.normal(kidx[:, None], SMALL_JUMP, np.uint64(k), np.uint64(j), e_idx[None, :]) * sq
            new_x = new_x + np.einsum("pab,pb->pa", S, xi)
        if Jf is not None:
            n = len(xs)
            A = eval_field(comp.DZ, xs, None, t).reshape(n, e, e) * np.ones((n, 1, 1))
            if dc is not None:
                A = A - dc
            h3 = np.reshape(h, (-1, 1, 1))
            Bsq = 0.0
            new_Jf = Jfs + (A @ Jfs) * h3
            new_Ji = Jis
            stoch_f = 0.0
            stoch_i = 0.0
            for i in range(nV):
                B = eval_field(comp.DV[i], xs, None, t).reshape(n, e, e) * np.ones((n, 1, 1))
                Bsq = Bsq + B @ B
                w = dW[:, i].reshape(-1, 1, 1)
                stoch_f = stoch_f + (B @ Jfs) * w
                stoch_i = stoch_i + (Jis @ B) * w
            new_Jf = new_Jf + stoch_f
            new_Ji = Jis - (Jis @ (A - Bsq)) * h3 - stoch_i
            Jf[idx], Ji[idx] = new_Jf, new_Ji
        x[idx] = new_x
        for ob in observers:
            ob.point(idx, t + h, new_x, _take(Jf, idx), _take(Ji, idx), False)

    def apply_jump(idx, t, y):
        nonlocal x, Jf, Ji
        xs = x[idx]
        yy = y[:, None]
        new_x = xs + eval_field(system.Y, xs, yy, t)
        if Jf is not None:
            n = len(xs)
            D = eval_field(comp.DY, xs, yy, t).reshape(n, e, e)
            M = np.eye(e) + D
            if np.any(np.linalg.cond(M) > SINGULAR_COND):
                raise SingularJumpError("I + D1Y is singular at a jump")
            Jf[idx] = M @ Jf[idx]
            Ji[idx] = np.linalg.solve(M.transpose(0, 2, 1), Ji[idx].transpose(0, 2, 1)).transpose(0, 2, 1)
        x[idx] = new_x
        for ob in observers:
            ob.point(idx, t, new_x, _take(Jf, idx), _take(Ji, idx), True)

    everyone = np.arange(P)
    for k in range(len(grid) - 1):
        t0, t1 = grid[k], grid[k + 1]
        if owner is None or bounds[k] == bounds[k + 1]:
            substep(slice(None), t0, t1 - t0, k, 0)
            continue
        lo, hi = bounds[k], bounds[k + 1]
        o, tm, mk = owner[lo:hi], times[lo:hi], marks[lo:hi]
        counts = np.bincount(o, minlength=P)
        first = np.searchsorted(o, everyone)  # jumps of path p in this step start here
        cur = np.full(P, t0)
        for j in range(int(counts.max()) + 1):
            act = np.nonzero(counts >= j)[0]
            has = counts[act] > j
            end = np.full(len(act), t1)
            pos = first[act[has]] + j
            end[has] = tm[pos]
            idx = slice(None) if j == 0 and len(act) == P else act
            substep(idx, cur[act], end - cur[act], k, j)
            cur[act] = end
            if has.any():
                apply_jump(act[has], tm[pos], mk[pos])
    return x, Jf, Ji


# -- single paths --------------------------------------------------------------------------------


def _single(system, x0, cfg, rng: Optional[PathStream], truncated):
    if rng is None:
        rng = PathStream.from_seed(cfg.seed, 0)
    if rng.family.seed != (int(cfg.seed) & ((1 << 64) - 1)):
        cfg = SimConfig(**{**cfg.__dict__, "seed": rng.family.seed})
    rec = PathRecorder()
    run_batch(system, x0, cfg, [rng.index], [rec], truncated=truncated)
    rows = rec.rows[0]
    grid = np.array([r[0] for r in rows])
    xs = np.array([r[1] for r in rows])
    Jf = np.array([r[2] for r in rows]) if cfg.record_jacobians else None
    Ji = np.array([r[3] for r in rows]) if cfg.record_jacobians else None
    jumps = []
    if system.has_jumps and not truncated:
        c = _Compiled(system, cfg.cut, False)
        if c.lam > 0:
            _, tm, mk = sample_jumps_batch(system.G, cfg.cut, cfg.T, rng.family, [rng.index], cfg.max_events,
                                           lam=c.lam)
            jumps = list(zip(tm.tolist(), mk.tolist()))
    return Path(grid=grid, x=xs, J_fwd=Jf, J_inv=Ji, jumps=jumps)


def simulate_path(system: FieldSystem, x0, cfg: SimConfig, rng: Optional[PathStream] = None) -> Path:
    """One path of the full system with exact insertion of jumps above ``cfg.cut``."""
    return _single(system, x0, cfg, rng, truncated=False)


def simulate_truncated_path(system: FieldSystem, x0, cfg: SimConfig, rng: Optional[PathStream] = None) -> Path:
    """One path of the process with all jumps above the cut removed (compensator kept)."""
    return _single(system, x0, cfg, rng, truncated=True)


def jacobian_inverse_residual(path: Path) -> float:
    """``max_t max_ij |J_inv(t) J_fwd(t) - I|``."""
    if path.J_fwd is None or path.J_inv is None:
        raise ValueError("path was simulated without Jacobians")
    e = path.J_fwd.shape[-1]
    return float(np.abs(path.J_inv @ path.J_fwd - np.eye(e)).max())


# -- many paths ---------------------------------------------------------------------------------


def _chunks(n_paths: int, chunk: int):
    return [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]


def map_chunks(fn, n_paths: int, threads: int = 1, chunk: int = CHUNK):
    """Apply ``fn(start, stop)`` to fixed chunks; results come back in chunk order."""
    spans = _chunks(n_paths, chunk)
    if threads <= 1 or len(spans) == 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


def simulate_endpoints(system: FieldSystem, x0, cfg: SimConfig, n_paths: int, threads: int = 1,
                       truncated: bool = False) -> np.ndarray:
    """``x_T`` for paths ``0 .. n_paths-1``, shape ``(n_paths, e)``."""
    compiled = _Compiled(system, cfg.cut, cfg.gaussian_smalljump_correction)

    def work(a, b):
        xT, _, _ = run_batch(system, x0, cfg, np.arange(a, b), truncated=truncated, jacobians=False,
                             compiled=compiled)
        return xT

    return np.concatenate(map_chunks(work, n_paths, threads))


def jacobian_inverse_residuals(system: FieldSystem, x0, cfg: SimConfig, n_paths: int,
                               threads: int = 1) -> np.ndarray:
    """Per-path residual ``max_t |J_inv J_fwd - I|`` for paths ``0 .. n_paths-1``."""
    compiled = _Compiled(system, cfg.cut, cfg.gaussian_smalljump_correction)

    def work(a, b):
        ob = ResidualObserver()
        run_batch(system, x0, cfg, np.arange(a, b), [ob], jacobians=True, compiled=compiled)
        return ob.res

    return np.concatenate(map_chunks(work, n_paths, threads))


def write_path_csv(path: Path, filename) -> None:
    e = path.x.shape[1]
    header = ["t"] + [f"x_{i + 1}" for i in range(e)]
    if path.J_fwd is not None:
        header += [f"Jfwd_{i + 1}{j + 1}" for i in range(e) for j in range(e)]
        header += [f"Jinv_{i + 1}{j + 1}" for i in range(e) for j in range(e)]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(path.grid):
            row = [t, *path.x[k]]
            if path.J_fwd is not None:
                row += [*path.J_fwd[k].ravel(), *path.J_inv[k].ravel()]
            w.writerow([fmt(v) for v in row])


def fmt(v) -> str:
    """17 significant digits: exact float round trip."""
    return format(float(v), ".17g")
