import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from spdecov import gcq
from spdecov.errors import NumericalError
from spdecov.gcq import WeightedChiSquare, gamma_weights, mc_tail_oracle, null_eigenvalues, quantile, tail_probability
from spdecov.kernels import InverseFractionalLaplacian, coefficient_matrix, reference_eigenvalues
from spdecov.observation import ObservationScheme
from spdecov.spectral import SpectralOperator


def test_gamma_weights_examples():
    np.testing.assert_allclose(gamma_weights([2, 1]), [8, 4, 2])
    np.testing.assert_allclose(gamma_weights([1]), [2])
    assert gamma_weights([]).size == 0
    assert gamma_weights(np.linspace(1, 0.1, 7)).size == 28
    with pytest.raises(ValueError):
        gamma_weights([1, -0.5])


def test_null_eigenvalues_examples():
    g = ObservationScheme.pointwise(6).gram
    np.testing.assert_allclose(null_eigenvalues(g, np.linalg.inv(g)), np.ones(7), rtol=1e-10)
    np.testing.assert_allclose(null_eigenvalues(np.eye(2), np.diag([3.0, 1.0])), [3, 1])
    with pytest.raises(NumericalError):
        null_eigenvalues(-np.eye(2), np.eye(2))


def test_null_eigenvalues_match_spectrum_of_g_c0():
    rng = np.random.default_rng(0)
    g = ObservationScheme.pointwise(5).gram
    a = rng.normal(size=(6, 6))
    c0 = a @ a.T
    ref = np.sort(np.linalg.eigvals(g @ c0).real)[::-1]
    np.testing.assert_allclose(null_eigenvalues(g, c0), ref, rtol=1e-10)


def test_null_eigenvalues_commuting_reference():
    q = InverseFractionalLaplacian(0.5, SpectralOperator(mode_count=512))
    sch = ObservationScheme.local_average(64)
    mu = null_eigenvalues(sch.gram, coefficient_matrix(q, sch), k=3)
    np.testing.assert_allclose(mu, reference_eigenvalues(q, 3), rtol=0.02)


def test_floor_and_k():
    mu = null_eigenvalues(np.eye(4), np.diag([1.0, 1e-13, 0.5, -1e-15]))
    np.testing.assert_allclose(mu, [1.0, 0.5])
    assert null_eigenvalues(np.eye(150), np.eye(150)).size == 100
    assert null_eigenvalues(np.eye(5), np.eye(5), k=2).size == 2


def test_single_weight_closed_form():
    d = WeightedChiSquare([2.0])
    assert tail_probability(d, 2 * 3.841459) == pytest.approx(0.05, abs=1e-4)
    for x in (0.1, 1.0, 5.0, 20.0):
        assert tail_probability(d, x) == pytest.approx(stats.chi2.sf(x / 2, 1), abs=1e-6)


def test_two_equal_weights_are_chi2_2():
    d = WeightedChiSquare([1.0, 1.0])
    for x in (0.5, 2.0, 8.0):
        assert tail_probability(d, x) == pytest.approx(np.exp(-x / 2), abs=1e-9)


def test_zero_threshold():
    assert tail_probability(WeightedChiSquare([3.0, 1.0]), 0.0) == pytest.approx(1.0, abs=1e-6)


def test_three_weights_against_monte_carlo():
    d = WeightedChiSquare(gamma_weights([2, 1]))
    assert abs(tail_probability(d, 14.0) - mc_tail_oracle(d, 14.0, 10 ** 6, seed=1)) <= 3e-3


def test_empty_distribution():
    with pytest.raises(ValueError):
        tail_probability(WeightedChiSquare([]), 1.0)
    with pytest.raises(ValueError):
        WeightedChiSquare([1.0, 0.0])


def test_quantile_examples():
    assert quantile(WeightedChiSquare([1.0]), 0.95) == pytest.approx(3.841459, abs=1e-3)
    d = WeightedChiSquare([3.0, 1.0, 0.2])
    qs = [quantile(d, lv) for lv in (0.5, 0.9, 0.95, 0.99)]
    assert all(a < b for a, b in zip(qs, qs[1:]))
    d5 = WeightedChiSquare(5 * d.weights)
    assert quantile(d5, 0.95) == pytest.approx(5 * quantile(d, 0.95), rel=1e-4)
    with pytest.raises(ValueError):
        quantile(d, 1.0)


def test_mc_oracle_edges():
    d = WeightedChiSquare([2.0, 1.0])
    assert mc_tail_oracle(d, -1.0, 100) == 1.0
    assert mc_tail_oracle(d, 1e12 * d.mean, 100) == 0.0
    with pytest.raises(ValueError):
        mc_tail_oracle(d, 1.0, 0)


def test_agreement_random_weight_sets():
    rng = np.random.default_rng(12)
    n = 200_000
    for i in range(10):
        mu = np.sort(rng.exponential(size=rng.integers(1, 6)))[::-1]
        d = WeightedChiSquare(gamma_weights(mu))
        x = d.mean * rng.uniform(0.3, 2.5)
        p = tail_probability(d, x)
        ph = mc_tail_oracle(d, x, n, seed=i)
        se = max(np.sqrt(p * (1 - p) / n), 0.5 / n)
        assert abs(p - ph) <= 4 * se + 1e-6


def test_monte_carlo_moments():
    d = WeightedChiSquare([4.0, 1.0, 0.5, 0.1])
    v = d.sample(np.random.default_rng(0), 400_000)
    assert abs(v.mean() - d.mean) <= 5 * v.std() / np.sqrt(v.size)
    s2 = v.var(ddof=1)
    # stderr of the sample variance from the fourth central moment
    se = np.sqrt((np.mean((v - v.mean()) ** 4) - s2 ** 2) / v.size)
    assert abs(s2 - d.variance) <= 5 * se


def test_truncation_stability():
    w = gamma_weights(1.0 / (np.arange(1, 15) * np.pi) ** 2)
    small = np.full(200, 1e-13 * w[0])
    a, b = WeightedChiSquare(w), WeightedChiSquare(np.concatenate([w, small]))
    for x in (0.5 * a.mean, a.mean, 3 * a.mean):
        assert abs(tail_probability(a, x) - tail_probability(b, x)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(w=st.lists(st.floats(0.01, 10), min_size=1, max_size=8),
       x1=st.floats(0.01, 50), x2=st.floats(0.01, 50))
def test_tail_monotone_and_bounded(w, x1, x2):
    d = WeightedChiSquare(w)
    lo, hi = sorted((x1, x2))
    p_lo, p_hi = tail_probability(d, lo), tail_probability(d, hi)
    assert 0.0 <= p_hi <= p_lo + 1e-8 <= 1.0 + 1e-8


def test_many_weights_fast_path():
    # thousands of weights, like the default 100-eigenvalue truncation
    mu = np.arange(1, 101, dtype=float) ** -2.0
    d = WeightedChiSquare(gamma_weights(mu))
    x = d.mean + 2 * np.sqrt(d.variance)
    assert abs(tail_probability(d, x) - mc_tail_oracle(d, x, 100_000, 3)) <= 4 * np.sqrt(0.05 * 0.95 / 1e5) + 2e-3


def test_gk15_polynomial_exact():
    val, err = gcq.adaptive_gk15(lambda x: x ** 20, np.linspace(0, 1, 3))
    assert val == pytest.approx(1 / 21, rel=1e-13)
