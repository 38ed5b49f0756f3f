"""Built-in models, addressable by name."""

from __future__ import annotations

from typing import Optional, Sequence

from .fields import FieldSystem
from .levy import LevyMeasure


def _num(v: float) -> str:
    return repr(float(v)) if v >= 0 else f"({float(v)!r})"


def linear_additive(a: float = -1.0, sigma: float = 1.0) -> FieldSystem:
    """Ornstein–Uhlenbeck: ``dx = a x dt + sigma dW`` (e = d = 1)."""
    return FieldSystem.from_strings([f"{_num(a)}*x1"], [[_num(sigma)]], name="linear_additive")


def linear_multiplicative(a: float = -1.0, sigma: float = 0.5) -> FieldSystem:
    """Geometric Brownian motion: ``dx = a x dt + sigma x dW``."""
    return FieldSystem.from_strings([f"{_num(a)}*x1"], [[f"{_num(sigma)}*x1"]], name="linear_multiplicative")


def _chain(e: int):
    Z = ["0"] + [f"x{i}" for i in range(1, e)]
    V = [["1"] + ["0"] * (e - 1)]
    return Z, V


def heisenberg() -> FieldSystem:
    """Hypoelliptic two-dimensional model ``V1 = (1, 0)``, ``Z = (0, x1)``."""
    Z, V = _chain(2)
    return FieldSystem.from_strings(Z, V, name="heisenberg")


def heisenberg_group() -> FieldSystem:
    """Three-dimensional Heisenberg group: ``V1 = (1, 0, -x2/2)``, ``V2 = (0, 1, x1/2)``, ``Z = 0``.

    Only the bracket ``[V1, V2] = (0, 0, 1)`` reaches the third direction, so
    the reduced covariance is genuinely random.
    """
    return FieldSystem.from_strings(["0", "0", "0"], [["1", "0", "(-0.5)*x2"], ["0", "1", "0.5*x1"]],
                                    name="heisenberg_group")


DEFAULT_YTILDE = ("0.5*sin(x2)", "0.5*cos(x1)")


def paper_example(kappa: float = 1.5, ytilde: Sequence[str] = DEFAULT_YTILDE,
                  hi: float = 1.0) -> FieldSystem:
    """Chain drift ``Z_i = x_{i-1}``, ``V1 = e1`` and jumps ``Y(x, y) = Ytilde(x) y``.

    The jump measure is ``|y|^-kappa`` on ``0 < |y| <= hi``; with bounded
    ``Ytilde`` the integrability conditions hold exactly when ``kappa < 2``.
    """
    e = len(ytilde)
    if e < 1:
        raise ValueError("ytilde needs at least one component")
    Z, V = _chain(e)
    Y = [f"({c})*y1" for c in ytilde]
    return FieldSystem.from_strings(Z, V, Y=Y, G=LevyMeasure.power_law(kappa, hi=hi), name="paper_example")


def pure_jump(G: LevyMeasure) -> FieldSystem:
    """``Z = 0``, ``V = 0``, ``Y(x, y) = y`` in one dimension."""
    return FieldSystem.from_strings(["0"], [["0"]], Y=["y1"], G=G, name="pure_jump")


BUILTINS = {
    "linear_additive": linear_additive,
    "linear_multiplicative": linear_multiplicative,
    "heisenberg": heisenberg,
    "heisenberg_group": heisenberg_group,
    "paper_example": paper_example,
}


def builtin(name: str, params: Optional[dict] = None) -> FieldSystem:
    if name not in BUILTINS:
        raise KeyError(f"unknown built-in model {name!r}")
    return BUILTINS[name](**(params or {}))
