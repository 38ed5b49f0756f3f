"""Vector fields, Lie brackets and the jump-corrected bracket hierarchy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsl
from .dsl import Expr
from .levy import LevyMeasure, QuadratureError, measure_rule, sample_points

JMAX_CAP = 6
MAX_NESTED_INTEGRALS = 3

VectorField = tuple  # tuple of e DSL expressions


def as_field(components) -> VectorField:
    return tuple(dsl.canonical(c) for c in components)


def eval_field(fld: Sequence[Expr], x, y=None, t=0.0) -> np.ndarray:
    """Evaluate all components; result has shape ``broadcast(...) + (e,)``."""
    x = np.asarray(x, dtype=float)
    vals = [dsl.eval_expr(c, x, y, t) for c in fld]
    shape = np.broadcast_shapes(*(np.shape(v) for v in vals), x.shape[:-1],
                                np.shape(y)[:-1] if y is not None else (), np.shape(t))
    return np.stack([np.broadcast_to(v, shape) for v in vals], axis=-1)


def symbolic_jacobian(fld: Sequence[Expr], e: int) -> list[list[Expr]]:
    xs = [dsl.Var("x", j + 1) for j in range(e)]
    return [[dsl.diff(c, v) for v in xs] for c in fld]


def is_zero_field(fld: Sequence[Expr]) -> bool:
    return all(dsl.canonical(c) == dsl.ZERO for c in fld)


def lie_bracket(K1: Sequence[Expr], K2: Sequence[Expr]) -> VectorField:
    """``[K1, K2] = DK2 K1 - DK1 K2`` (derivatives in the state only)."""
    if len(K1) != len(K2):
        raise ValueError("fields must have the same dimension")
    e = len(K1)
    J1 = symbolic_jacobian(K1, e)
    J2 = symbolic_jacobian(K2, e)
    out = []
    for i in range(e):
        acc = dsl.ZERO
        for j in range(e):
            acc = dsl.add(acc, dsl.mul(J2[i][j], K1[j]))
            acc = dsl.sub(acc, dsl.mul(J1[i][j], K2[j]))
        out.append(acc)
    return tuple(out)


def compute_v0(Z: Sequence[Expr], V: Sequence[Sequence[Expr]]) -> VectorField:
    """Stratonovich-corrected drift ``Z - 1/2 sum_i DV_i V_i``."""
    e = len(Z)
    out = list(Z)
    for Vi in V:
        Ji = symbolic_jacobian(Vi, e)
        for r in range(e):
            corr = dsl.ZERO
            for c in range(e):
                corr = dsl.add(corr, dsl.mul(Ji[r][c], Vi[c]))
            out[r] = dsl.sub(out[r], dsl.mul(dsl.const(0.5), corr))
    return as_field(out)


# -- the model ------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSystem:
    """Drift ``Z``, diffusion fields ``V[0..d-1]``, jump field ``Y(x, y)`` and measure ``G``."""

    e: int
    d: int
    Z: VectorField
    V: tuple
    Y: Optional[VectorField] = None
    G: Optional[LevyMeasure] = None
    n: int = 1
    name: str = "custom"

    def __post_init__(self):
        if len(self.Z) != self.e:
            raise ValueError(f"Z has {len(self.Z)} components, expected {self.e}")
        if len(self.V) != self.d:
            raise ValueError(f"expected {self.d} diffusion fields, got {len(self.V)}")
        for i, Vi in enumerate(self.V):
            if len(Vi) != self.e:
                raise ValueError(f"V{i + 1} has {len(Vi)} components, expected {self.e}")
        if self.Y is not None and len(self.Y) != self.e:
            raise ValueError(f"Y has {len(self.Y)} components, expected {self.e}")
        if self.has_jumps and self.G is None:
            raise ValueError("a non-zero jump field needs a jump measure")
        for fld in (self.Z, *self.V, *( [self.Y] if self.Y is not None else [])):
            for c in fld:
                if dsl.max_index(c, "x") > self.e or dsl.max_index(c, "y") > self.n:
                    raise ValueError(f"expression {dsl.to_text(c)} uses undeclared variables")

    @classmethod
    def from_strings(cls, Z: Sequence[str], V: Sequence[Sequence[str]], Y: Optional[Sequence[str]] = None,
                     G: Optional[LevyMeasure] = None, name: str = "custom") -> "FieldSystem":
        e = len(Z)
        p = lambda s: dsl.parse_expr(s, e, 1)  # noqa: E731
        return cls(
            e=e,
            d=len(V),
            Z=tuple(p(s) for s in Z),
            V=tuple(tuple(p(s) for s in Vi) for Vi in V),
            Y=None if Y is None else tuple(p(s) for s in Y),
            G=G,
            name=name,
        )

    @property
    def has_jumps(self) -> bool:
        return self.Y is not None and not is_zero_field(self.Y)

    def scaled_diffusion(self, sigma: float) -> "FieldSystem":
        c = dsl.const(sigma)
        V = tuple(tuple(dsl.mul(c, comp) for comp in Vi) for Vi in self.V)
        return FieldSystem(self.e, self.d, self.Z, V, self.Y, self.G, self.n, self.name)

    def to_dict(self) -> dict:
        return {
            "e": self.e,
            "d": self.d,
            "Z": [dsl.to_text(c) for c in self.Z],
            "V": [[dsl.to_text(c) for c in Vi] for Vi in self.V],
            "Y": None if self.Y is None else [dsl.to_text(c) for c in self.Y],
        }


# -- hierarchy fields --------------------------------------------------------------
# A hierarchy member is a sum of terms.  A term with ``marks = m`` stands for
#     x -> ∫...∫ comps(x, y1..ym) G(dy1)...G(dym)
# so that brackets of jump-corrected fields stay symbolic in x.


@dataclass(frozen=True)
class Term:
    comps: VectorField
    marks: int = 0


@dataclass(frozen=True)
class HField:
    terms: tuple

    @classmethod
    def plain(cls, fld: Sequence[Expr]) -> "HField":
        return cls((Term(as_field(fld), 0),)) if not is_zero_field(fld) else cls(())

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def max_marks(self) -> int:
        return max((t.marks for t in self.terms), default=0)

    def evaluate(self, x, G: Optional[LevyMeasure] = None, t: float = 0.0, check: bool = False) -> np.ndarray:
        """Evaluate at states ``x`` of shape ``(..., e)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for term in self.terms:
            out = out + _eval_term(term, x, G, t, check)
        return out

    __call__ = evaluate


def _rule_for(G: LevyMeasure, marks: int, fine: bool = True):
    if marks == 1:
        return measure_rule(G, order=8, depth=60) if fine else measure_rule(G, order=6, depth=40)
    if marks == 2:
        return measure_rule(G, order=6, depth=24)
    return measure_rule(G, order=4, depth=12)


def _eval_term(term: Term, x: np.ndarray, G, t, check: bool) -> np.ndarray:
    if term.marks == 0:
        return eval_field(term.comps, x, None, t) * np.ones(x.shape)
    if G is None:
        raise ValueError("jump-corrected field needs the jump measure to evaluate")
    if term.marks > MAX_NESTED_INTEGRALS:
        raise NotImplementedError(f"more than {MAX_NESTED_INTEGRALS} nested mark integrals")
    rule = _rule_for(G, term.marks)
    val = _product_integral(term, x, rule, t)
    if check and term.marks == 1:
        coarse = _product_integral(term, x, _rule_for(G, 1, fine=False), t)
        scale = np.maximum(np.abs(val), 1e-12)
        err = float(np.max(np.abs(val - coarse) / scale))
        if err > 1e-6:
            raise QuadratureError("mark integral of bracket did not settle", err)
    return val


def _product_integral(term: Term, x: np.ndarray, rule, t) -> np.ndarray:
    m = term.marks
    grids = np.meshgrid(*([rule.nodes] * m), indexing="ij")
    ys = np.stack([g.ravel() for g in grids], axis=-1)  # (Q^m, m)
    w = np.ones(len(ys))
    for wg in np.meshgrid(*([rule.weights] * m), indexing="ij"):
        w = w * wg.ravel()
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty(flat.shape)
    for i, xi in enumerate(flat):
        vals = eval_field(term.comps, xi[None, :], ys, t)  # (Q^m, e)
        out[i] = w @ vals
    return out.reshape(x.shape)


def _rename_marks(comps: VectorField, offset: int) -> VectorField:
    if offset == 0:
        return comps
    return tuple(dsl.substitute(c, {("y", 1): dsl.Var("y", 1 + offset)}) for c in comps)


def _add_term(terms: dict, marks: int, comps: VectorField, sign: float = 1.0):
    if is_zero_field(comps):
        return
    if sign < 0:
        comps = tuple(dsl.neg(c) for c in comps)
    if marks in terms:
        comps = tuple(dsl.add(a, b) for a, b in zip(terms[marks], comps))
    terms[marks] = comps


def _finish(terms: dict) -> HField:
    items = [Term(as_field(c), m) for m, c in sorted(terms.items()) if not is_zero_field(c)]
    return HField(tuple(items))


def bracket_with(A: Sequence[Expr], K: HField) -> HField:
    """``[A, K]`` for a plain field ``A`` and a hierarchy member ``K``."""
    terms: dict = {}
    for term in K.terms:
        _add_term(terms, term.marks, lie_bracket(A, term.comps))
    return _finish(terms)


def jump_corrected_drift_bracket(V0: Sequence[Expr], K, Y: Optional[Sequence[Expr]],
                                 G: Optional[LevyMeasure]) -> HField:
    """``x -> [V0, K](x) - ∫ [Y(., y), K](x) G(dy)`` as an evaluable hierarchy field."""
    if not isinstance(K, HField):
        K = HField.plain(K)
    terms: dict = {}
    for term in K.terms:
        _add_term(terms, term.marks, lie_bracket(V0, term.comps))
    if Y is not None and not is_zero_field(Y):
        for term in K.terms:
            Yr = _rename_marks(as_field(Y), term.marks)
            _add_term(terms, term.marks + 1, lie_bracket(Yr, term.comps), sign=-1.0)
    return _finish(terms)


@dataclass
class BracketHierarchy:
    levels: list  # levels[j] = list of HField in L_j (nested: L_j contains L_{j-1})
    introduced: list  # introduced[j] = members new at level j
    j0: Optional[int] = None
    c_est: float = 0.0


def bracket_hierarchy(system: FieldSystem, jmax: int) -> BracketHierarchy:
    """Build ``L_0 .. L_jmax``; exact duplicates and zero fields are pruned."""
    if jmax < 0:
        raise ValueError("jmax must be non-negative")
    if jmax > JMAX_CAP:
        raise ValueError(f"jmax is capped at {JMAX_CAP}")
    V0 = compute_v0(system.Z, system.V)
    seen: set = set()
    first = []
    for Vi in system.V:
        h = HField.plain(Vi)
        if not h.is_zero and h not in seen:
            seen.add(h)
            first.append(h)
    levels = [list(first)]
    introduced = [list(first)]
    for _ in range(jmax):
        new = []
        for K in introduced[-1]:
            candidates = [bracket_with(Vi, K) for Vi in system.V]
            candidates.append(jump_corrected_drift_bracket(V0, K, system.Y, system.G))
            for h in candidates:
                if not h.is_zero and h not in seen:
                    seen.add(h)
                    new.append(h)
        levels.append(levels[-1] + new)
        introduced.append(new)
    return BracketHierarchy(levels=levels, introduced=introduced)


# -- uniform Hörmander check ---------------------------------------------------------


@dataclass
class UHReport:
    j0: Optional[int]
    c_est: float
    per_level_min: list
    per_level_max_eig: list
    sample_box: list
    n_points: int
    c_min: float
    note: str = field(default="infimum over x replaced by grid + random points in sample_box")

    def to_dict(self) -> dict:
        return {
            "j0": self.j0,
            "c_est": self.c_est,
            "per_level_minima": self.per_level_min,
            "per_level_max_eigenvalue": self.per_level_max_eig,
            "sample_box": self.sample_box,
            "n_points": self.n_points,
            "c_min": self.c_min,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def uh_check(system: FieldSystem, jmax: int, sample_box, n_points: int = 32, n_dirs: int = 16,
             c_min: float = 1e-8, seed: int = 2024, stop_at_span: bool = True) -> UHReport:
    """Smallest level whose accumulated Gram form is bounded below on the sample.

    For level j the quadratic form is ``sum_{j'<=j} sum_{K in L_j'} (u.K(x))^2``;
    its minimum over sampled unit ``u`` (random directions plus the Gram
    eigenvectors) and sampled ``x`` is compared with ``c_min`` times the
    largest Gram eigenvalue seen at that level.
    """
    if n_points < 1 or n_dirs < 1:
        raise ValueError("n_points and n_dirs must be at least 1")
    hier = bracket_hierarchy(system, min(jmax, JMAX_CAP))
    xs = sample_points(sample_box, n_points, seed)
    e = system.e
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, e))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    gram = np.zeros((len(xs), e, e))
    minima, max_eigs = [], []
    j0, c_est = None, 0.0
    cumulative = np.zeros((len(xs), e, e))
    for j, members in enumerate(hier.introduced):
        for K in members:
            vals = K.evaluate(xs, system.G)
            cumulative += vals[:, :, None] * vals[:, None, :]
        gram = gram + cumulative  # level j counts members of L_0..L_j once per level they appear in
        eigval, eigvec = np.linalg.eigh(gram)
        from_eig = eigval[:, 0]
        from_dirs = np.einsum("ne,xef,nf->xn", dirs, gram, dirs).min(axis=1)
        # sign flips of u leave every (u.K)^2 unchanged, so the eigenvector sign is irrelevant
        per_x = np.minimum(from_eig, from_dirs)
        level_min = float(max(per_x.min(), 0.0))
        level_max = float(eigval[:, -1].max())
        minima.append(level_min)
        max_eigs.append(level_max)
        if level_max > 0 and level_min >= c_min * level_max:
            j0, c_est = j, level_min
            if stop_at_span:
                break
    return UHReport(j0=j0, c_est=c_est, per_level_min=minima, per_level_max_eig=max_eigs,
                    sample_box=[list(map(float, b)) for b in np.asarray(sample_box).reshape(-1, 2)],
                    n_points=len(xs), c_min=c_min)


def bracket_condition_check(j0: int, kappa: float, n: int, alpha: float, r: float, v: float):
    """Return ``(holds, lhs, rhs)`` for ``16*2**(-4*j0) > 3(kappa-n) max((8-r+v/2)/(kappa-n+alpha), 1/(4 alpha))``."""
    if j0 < 0:
        raise ValueError("j0 must be non-negative")
    if kappa < n:
        raise ValueError("need kappa >= n")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if r <= 0 or v <= 0 or 18 * r + 9 * v >= 8:
        raise ValueError("need r, v > 0 with 18 r + 9 v < 8")
    lhs = 16.0 * 2.0 ** (-4 * j0)
    gap = kappa - n
    rhs = 3.0 * gap * max((8.0 - r + v / 2.0) / (gap + alpha), 1.0 / (4.0 * alpha))
    return lhs > rhs, lhs, rhs

