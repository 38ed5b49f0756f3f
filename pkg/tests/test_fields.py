import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import fd_bracket, random_poly_field
from jumpdensity import dsl
from jumpdensity.fields import (FieldSystem, HField, bracket_condition_check, bracket_hierarchy, compute_v0,
                                eval_field, jump_corrected_drift_bracket, lie_bracket, uh_check)
from jumpdensity.levy import LevyMeasure, QuadratureError
from jumpdensity.models import heisenberg


def F(*comps, e=None, n=1):
    e = e or len(comps)
    return tuple(dsl.parse_expr(c, e, n) for c in comps)


BOX2 = [[-1.0, 1.0], [-1.0, 1.0]]


# -- brackets ------------------------------------------------------------------------


def test_bracket_with_itself_is_zero():
    K = F("sin(x2)", "x1*x2")
    for x in np.random.default_rng(0).normal(size=(10, 2)):
        np.testing.assert_array_equal(eval_field(lie_bracket(K, K), x), [0.0, 0.0])


def test_bracket_of_constants_is_zero():
    assert all(c == dsl.ZERO for c in lie_bracket(F("1", "2"), F("-3", "0.5")))


def test_bracket_example_against_finite_differences():
    K1, K2 = F("1", "0"), F("0", "x1")
    br = lie_bracket(K1, K2)
    x = np.array([0.3, -0.8])
    np.testing.assert_allclose(eval_field(br, x), [0.0, 1.0])
    np.testing.assert_allclose(fd_bracket(K1, K2, x), [0.0, 1.0], atol=1e-8)


def test_bracket_dimension_mismatch():
    with pytest.raises(ValueError):
        lie_bracket(F("1", "0"), F("1", e=2))


def test_v0_constant_diffusion_is_drift():
    Z = F("x2", "sin(x1)")
    assert compute_v0(Z, [F("1", "0"), F("0.5", "2")]) == tuple(dsl.canonical(c) for c in Z)


def test_v0_scalar_multiplicative():
    V0 = compute_v0(F("0"), [F("x1")])
    for x in [-2.0, 0.5, 3.0]:
        assert eval_field(V0, [x])[0] == pytest.approx(-x / 2)
        # finite-difference oracle for -1/2 V'(x) V(x)
        h = 1e-6
        assert eval_field(V0, [x])[0] == pytest.approx(-0.5 * ((x + h) - (x - h)) / (2 * h) * x, rel=1e-8)


def test_v0_heisenberg():
    H = heisenberg()
    V0 = compute_v0(H.Z, H.V)
    for x in np.random.default_rng(1).normal(size=(5, 2)):
        np.testing.assert_array_equal(eval_field(V0, x), [0.0, x[0]])


def _random_fields(seed, e=2, count=3):
    rng = np.random.default_rng(seed)
    return [F(*random_poly_field(rng, e, degree=2), e=e) for _ in range(count)], rng


def test_antisymmetry():
    for seed in range(10):
        (A, B), rng = _random_fields(seed, count=2)
        for x in rng.normal(size=(5, 2)):
            np.testing.assert_allclose(eval_field(lie_bracket(A, B), x), -eval_field(lie_bracket(B, A), x),
                                       atol=1e-12, rtol=0)


def test_jacobi_identity():
    for seed in range(10):
        (A, B, C), rng = _random_fields(100 + seed, e=3, count=3)
        total = lambda x: (eval_field(lie_bracket(A, lie_bracket(B, C)), x)  # noqa: E731
                           + eval_field(lie_bracket(B, lie_bracket(C, A)), x)
                           + eval_field(lie_bracket(C, lie_bracket(A, B)), x))
        for x in rng.uniform(-1, 1, size=(5, 3)):
            assert np.abs(total(x)).max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symbolic_bracket_matches_finite_differences(seed):
    (A, B), rng = _random_fields(seed, count=2)
    for x in rng.uniform(-1, 1, size=(3, 2)):
        sym = eval_field(lie_bracket(A, B), x)
        ref = fd_bracket(A, B, x)
        assert np.abs(sym - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())


# -- jump-corrected brackets ------------------------------------------------------------------


def test_jump_correction_vanishes_without_jumps():
    V0, K = F("x2^2", "sin(x1)"), F("x1*x2", "1")
    h = jump_corrected_drift_bracket(V0, K, None, None)
    for x in np.random.default_rng(2).normal(size=(5, 2)):
        np.testing.assert_allclose(h.evaluate(x[None, :])[0], eval_field(lie_bracket(V0, K), x), rtol=0, atol=0)


def test_state_independent_jumps_cancel_under_symmetric_measure():
    G = LevyMeasure.power_law(1.5)
    V0, K = F("0", "x1"), F("x2", "2*x1 + 1")
    Y = F("0.3*y1", "-0.7*y1")
    h = jump_corrected_drift_bracket(V0, K, Y, G)
    x = np.array([[0.4, -0.2], [1.0, 2.0]])
    np.testing.assert_allclose(h.evaluate(x, G), eval_field(lie_bracket(V0, K), x), atol=1e-12)


def test_example_bracket_integral_matches_quadrature_oracle():
    G = LevyMeasure.power_law(1.5)
    V0, K = F("0", "x1"), F("0", "1")
    Y = F("x1*y1", "0")
    h = jump_corrected_drift_bracket(V0, K, Y, G)
    x = np.array([0.7, -0.4])
    # oracle: finite-difference bracket at frozen marks, integrated with mpmath against |y|^-1.5 on both signs
    def integrand(comp):
        def g(r):
            r = float(r)
            Yp = tuple(dsl.substitute(c, {("y", 1): dsl.const(r)}) for c in Y)
            Ym = tuple(dsl.substitute(c, {("y", 1): dsl.const(-r)}) for c in Y)
            return (fd_bracket(Yp, K, x)[comp] + fd_bracket(Ym, K, x)[comp]) * r ** -1.5
        return g

    oracle = np.array([float(mpmath.quad(integrand(c), [0, 1])) for c in range(2)])
    expected = eval_field(lie_bracket(V0, K), x) - oracle
    np.testing.assert_allclose(h.evaluate(x[None, :], G, check=True)[0], expected, atol=1e-6)


def test_one_sided_bracket_integral_matches_quadrature_oracle():
    G = LevyMeasure.power_law(1.5, symmetric=False)
    V0, K = F("0", "x1"), F("0", "1")
    Y = F("x2*y1", "sin(x2)*y1^2")
    h = jump_corrected_drift_bracket(V0, K, Y, G)
    for x in ([0.7, -0.4], [-1.2, 0.3]):
        # [Y, K] = -DY K = -(y, cos(x2) y^2); the correction subtracts its integral
        i1 = float(mpmath.quad(lambda r: r * r ** -1.5, [0, 1]))
        i2 = float(mpmath.quad(lambda r: r**2 * r ** -1.5, [0, 1])) * np.cos(x[1])
        base = eval_field(lie_bracket(V0, K), np.array(x))
        got = h.evaluate(np.array([x]), G, check=True)[0]
        np.testing.assert_allclose(got, base + np.array([i1, i2]), rtol=1e-6)


def test_nonconvergent_bracket_integral_is_reported():
    G = LevyMeasure.power_law(2.5, symmetric=False)
    h = jump_corrected_drift_bracket(F("0", "0"), F("0", "1"), F("x2*y1", "0"), G)
    with pytest.raises(QuadratureError) as err:
        h.evaluate(np.array([[0.1, 0.2]]), G, check=True)
    assert err.value.achieved > 1e-6


# -- hierarchy ---------------------------------------------------------------------------------


def test_elliptic_hierarchy_base_level():
    S = FieldSystem.from_strings(["0", "0"], [["1", "0"], ["0", "1"]])
    hier = bracket_hierarchy(S, 0)
    assert len(hier.levels) == 1
    M = np.array([K.evaluate(np.zeros((1, 2)))[0] for K in hier.levels[0]])
    assert np.linalg.matrix_rank(M) == 2


def test_heisenberg_first_level_has_vertical_direction():
    hier = bracket_hierarchy(heisenberg(), 1)
    assert len(hier.levels) == 2
    new = hier.introduced[1]
    vals = [K.evaluate(np.array([[0.3, 0.1]]))[0] for K in new]
    assert any(np.allclose(np.abs(v), [0.0, 1.0]) for v in vals)
    # symbolic bracket [V0, V1] agrees with finite differences
    H = heisenberg()
    V0 = compute_v0(H.Z, H.V)
    np.testing.assert_allclose(fd_bracket(V0, H.V[0], [0.3, 0.1]), [0.0, -1.0], atol=1e-8)


def test_hierarchy_levels_are_nested_and_pruned():
    S = FieldSystem.from_strings(["x2", "-x1"], [["1", "0"], ["1", "0"]], Y=["0.1*y1*x1", "0"],
                                 G=LevyMeasure.power_law(1.2))
    hier = bracket_hierarchy(S, 3)
    assert len(hier.levels[0]) == 1  # duplicate V pruned
    for a, b in zip(hier.levels[:-1], hier.levels[1:]):
        assert b[: len(a)] == a
        assert len(set(b)) == len(b)
    assert all(not K.is_zero for L in hier.levels for K in L)


def test_hierarchy_limits():
    with pytest.raises(ValueError):
        bracket_hierarchy(heisenberg(), 7)
    with pytest.raises(ValueError):
        bracket_hierarchy(heisenberg(), -1)


# -- uniform Hörmander check --------------------------------------------------------------------------


def test_uh_orthonormal_frame():
    S = FieldSystem.from_strings(["0", "0"], [["1", "0"], ["0", "1"]])
    rep = uh_check(S, 4, BOX2, 16, 8)
    assert rep.j0 == 0
    assert rep.c_est == pytest.approx(1.0, abs=1e-9)


def test_uh_heisenberg():
    rep = uh_check(heisenberg(), 4, BOX2, 16, 8)
    assert rep.j0 == 1
    # Gram-matrix oracle: level-1 form is 2 V1 V1^T + [V0,V1][V0,V1]^T = diag(2, 1)
    assert rep.c_est == pytest.approx(1.0)
    assert rep.per_level_min[0] == 0.0


def test_uh_degenerate():
    S = FieldSystem.from_strings(["0", "0"], [["1", "0"]])
    rep = uh_check(S, 5, BOX2, 16, 8)
    assert rep.j0 is None
    assert len(rep.per_level_min) == 6


def test_uh_report_json_fields():
    d = uh_check(heisenberg(), 2, BOX2, 4, 4).to_dict()
    for key in ("j0", "c_est", "per_level_minima", "sample_box", "n_points"):
        assert key in d


def test_uh_quadratic_form_sign_invariant():
    S = FieldSystem.from_strings(["x2", "sin(x1)"], [["1", "x1"]])
    hier = bracket_hierarchy(S, 2)
    xs = np.random.default_rng(5).uniform(-1, 1, (10, 2))
    vals = np.stack([K.evaluate(xs) for L in hier.levels for K in L])
    for u in np.random.default_rng(6).normal(size=(10, 2)):
        np.testing.assert_array_equal(((vals @ u) ** 2).sum(0), ((vals @ -u) ** 2).sum(0))
    a = uh_check(S, 2, BOX2, 8, 8, seed=1)
    b = uh_check(S, 2, BOX2, 8, 8, seed=1)
    assert a.c_est == b.c_est


def test_uh_needs_points():
    with pytest.raises(ValueError):
        uh_check(heisenberg(), 2, BOX2, 0, 4)


# -- bracket criterion -----------------------------------------------------------------------------


def test_criterion_always_true_when_kappa_equals_n():
    for j0 in range(11):
        holds, lhs, rhs = bracket_condition_check(j0, 1.0, 1, 0.5, 0.1, 0.1)
        assert holds and rhs == 0.0


def test_criterion_j0_zero_lhs():
    assert bracket_condition_check(0, 1.5, 1, 0.5, 0.1, 0.1)[1] == 16.0


def test_criterion_failing_case():
    holds, lhs, rhs = bracket_condition_check(1, 1.5, 1, 0.5, 0.1, 0.1)
    assert not holds
    assert lhs == 1.0
    assert rhs == pytest.approx(3 * 0.5 * max(7.95 / 1.0, 0.5))
    assert rhs == pytest.approx(11.925)


@pytest.mark.parametrize("args", [(1, 0.5, 1, 0.5, 0.1, 0.1), (1, 1.5, 1, 0.0, 0.1, 0.1),
                                  (1, 1.5, 1, 0.5, 0.4, 0.2), (1, 1.5, 1, 0.5, 0.0, 0.1), (-1, 1.0, 1, 0.5, 0.1, 0.1)])
def test_criterion_parameter_constraints(args):
    with pytest.raises(ValueError):
        bracket_condition_check(*args)


def test_field_system_validation():
    with pytest.raises(ValueError):
        FieldSystem.from_strings(["0", "0"], [["1"]])
    with pytest.raises(ValueError):
        FieldSystem.from_strings(["0"], [["1"]], Y=["y1"])  # jumps without a measure
    assert not FieldSystem.from_strings(["0"], [["1"]], Y=["0"]).has_jumps


def test_hfield_plain_zero():
    assert HField.plain(F("0", "0")).is_zero
