"""Shared test oracles."""

import numpy as np

from jumpdensity.fields import eval_field


def fd_jacobian(field, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    e = len(x)
    J = np.zeros((e, e))
    for j in range(e):
        dx = np.zeros(e)
        dx[j] = h
        J[:, j] = (eval_field(field, x + dx) - eval_field(field, x - dx)) / (2 * h)
    return J


def fd_bracket(A, B, x, h=1e-5):
    """Central-difference Lie bracket ``DB A - DA B``."""
    return fd_jacobian(B, x, h) @ eval_field(A, x) - fd_jacobian(A, x, h) @ eval_field(B, x)


def random_poly_field(rng, e, degree=2, n_terms=4):
    """Random polynomial vector field as DSL strings."""
    comps = []
    for _ in range(e):
        terms = []
        for _ in range(n_terms):
            c = float(np.round(rng.uniform(-2, 2), 3))
            powers = rng.integers(0, degree + 1, size=e)
            mono = "*".join(f"x{i + 1}^{int(p)}" for i, p in enumerate(powers) if p > 0) or "1"
            terms.append(f"({c!r})*{mono}")
        comps.append(" + ".join(terms))
    return comps
