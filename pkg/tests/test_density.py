import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from jumpdensity.density import (
    DensityEstimate,
    gaussian_baseline_compare,
    kde,
    make_grid,
    ou_baseline,
    silverman,
    smoothness_proxy,
)
from jumpdensity.engine import SimConfig


def test_identical_samples_rejected():
    with pytest.raises(ValueError, match="variance"):
        kde(np.ones(200))


def test_too_few_samples_or_dimensions():
    with pytest.raises(ValueError):
        kde(np.arange(50.0))
    with pytest.raises(ValueError):
        kde(np.random.default_rng(0).normal(size=(200, 4)))


def test_standard_normal_recovery():
    s = np.random.default_rng(1).normal(size=100_000)
    est = kde(s, [(-3.0, 3.0, 121)])
    assert np.max(np.abs(est.values - norm.pdf(est.grid[0]))) <= 0.01


@pytest.mark.parametrize("e", [1, 2, 3])
def test_estimate_integrates_to_one(e):
    s = np.random.default_rng(e).normal(size=(2000, e)) * np.arange(1, e + 1)
    est = kde(s, 41 if e == 3 else 101)
    assert np.all(est.values >= 0)
    assert 0.95 <= est.integral() <= 1.02


def test_silverman_bandwidth():
    s = np.random.default_rng(2).normal(size=(1000, 2))
    est = kde(s, 21)
    np.testing.assert_allclose(est.bandwidth, 1.06 * s.std(axis=0, ddof=1) * 1000**-0.2)
    np.testing.assert_allclose(silverman(s), est.bandwidth, rtol=1e-12)


def test_explicit_bandwidth_and_grid():
    s = np.random.default_rng(3).normal(size=500)
    est = kde(s, [(-1, 1, 5)], bandwidth=[0.5])
    np.testing.assert_array_equal(est.grid[0], [-1, -0.5, 0, 0.5, 1])
    manual = norm.pdf((est.grid[0][:, None] - s[None, :]) / 0.5).mean(axis=1) / 0.5
    np.testing.assert_allclose(est.values, manual, rtol=1e-12)
    with pytest.raises(ValueError):
        kde(s, [(-1, 1, 5)], bandwidth=[-0.1])
    with pytest.raises(ValueError):
        make_grid(s[:, None], [(-1, 1, 5), (0, 1, 3)])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_translation_equivariance(seed, c):
    s = np.random.default_rng(seed).normal(size=(300, 2))
    a = kde(s, [(-3, 3, 15), (-2, 2, 11)], bandwidth=[0.4, 0.3])
    b = kde(s + c, [(-3 + c, 3 + c, 15), (-2 + c, 2 + c, 11)], bandwidth=[0.4, 0.3])
    np.testing.assert_allclose(b.values, a.values, rtol=1e-9, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(400, 2))
    a = kde(s, 17)
    b = kde(s[rng.permutation(len(s))], 17)
    np.testing.assert_array_equal(a.values, b.values)


def test_csv_dump(tmp_path):
    s = np.random.default_rng(4).normal(size=(300, 2))
    est = kde(s, [(-1, 1, 3), (0, 2, 4)])
    est.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["x_1", "x_2", "density"]
    assert len(rows) == 1 + 12
    assert float(rows[5][2]) == est.values[1, 0]


def test_ou_baseline():
    assert ou_baseline(0.0, 0.0, 1.0, 1.0) == (0.0, 1.0)
    mean, var = ou_baseline(2.0, -1.0, 1.0, 1.0)
    assert mean == pytest.approx(2 * math.exp(-1))
    assert var == pytest.approx(0.432332, abs=1e-6)


def test_smoothness_proxy_normal_oracles():
    g = np.linspace(-4, 4, 401)
    est = DensityEstimate([g], norm.pdf(g), np.array([1.0]), 0)
    assert smoothness_proxy(est, 1) == pytest.approx(math.exp(-0.5), rel=0.02)
    assert smoothness_proxy(est, 2) == pytest.approx(1.0, rel=0.02)


def test_smoothness_proxy_constant_and_errors():
    g = np.linspace(0, 1, 11)
    est = DensityEstimate([g], np.full(11, 0.7), np.array([1.0]), 0)
    assert smoothness_proxy(est, 1) == 0.0 and smoothness_proxy(est, 2) == 0.0
    small = DensityEstimate([g[:4]], np.ones(4), np.array([1.0]), 0)
    with pytest.raises(ValueError):
        smoothness_proxy(small)
    with pytest.raises(ValueError):
        smoothness_proxy(est, 3)


def test_brownian_baseline():
    l1, est = gaussian_baseline_compare(0.0, 1.0, 0.0, SimConfig(T=1.0, dt=0.01, seed=1), 20_000)
    assert l1 < 0.05
    assert est.grid[0][0] == pytest.approx(-6.0)


def test_l1_error_shrinks_with_more_paths():
    def avg(n):
        return np.mean([gaussian_baseline_compare(-1.0, 1.0, 0.0, SimConfig(T=1.0, dt=0.01, seed=s), n)[0]
                        for s in (1, 2)])

    assert avg(20_000) < avg(2_000)
