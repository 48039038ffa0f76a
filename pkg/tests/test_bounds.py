import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from sketchkv import bounds, validate


def test_key_variance_tail_examples():
    thr, prob = bounds.key_variance_tail(300, 300, 1.0)
    assert thr == pytest.approx(math.pi) and prob == pytest.approx(math.exp(-1))
    thr, prob = bounds.key_variance_tail(0, 10, 2.0)
    assert thr == 0.0 and prob == 1.0


def test_key_variance_tail_rejects_bad_occupancy():
    with pytest.raises(ValueError):
        bounds.key_variance_tail(-1, 10, 1.0)
    with pytest.raises(ValueError):
        bounds.key_variance_tail(5, 0, 1.0)


@given(st.integers(0, 10_000), st.integers(1, 10_000), st.floats(0.01, 10))
def test_key_variance_tail_monotone_in_load(a, N, sigma):
    thr1, p1 = bounds.key_variance_tail(a, N, sigma)
    thr2, p2 = bounds.key_variance_tail(a + 1, N, sigma)
    assert thr2 > thr1 and p2 <= p1


def test_chernoff_example():
    assert bounds.chernoff_tail(300, 300, 1.0) == pytest.approx(math.exp(-1))
    assert bounds.chernoff_tail(300, 300, 1e-9) == pytest.approx(1.0)


@given(st.integers(1, 5000), st.integers(1, 5000), st.floats(0.01, 5))
def test_chernoff_monotone(a, N, delta):
    assert bounds.chernoff_tail(a, N, 1.5 * delta) <= bounds.chernoff_tail(a, N, delta)
    assert bounds.chernoff_tail(a + 1, N, delta) <= bounds.chernoff_tail(a, N, delta)
    assert bounds.chernoff_tail(a, N + 1, delta) >= bounds.chernoff_tail(a, N, delta)


def test_chernoff_upper_bounds_exact_binomial_tail():
    for a, N, delta in [(300, 300, 1.0), (1000, 90, 0.5), (50, 30, 2.0)]:
        exact = stats.binom.sf(math.floor((1 + delta) * 3 * a / N), a, 3 / N)
        assert exact <= bounds.chernoff_tail(a, N, delta)


def test_chernoff_rejects_non_positive_delta():
    with pytest.raises(ValueError):
        bounds.chernoff_tail(10, 10, 0.0)


def test_median3_constant_against_scipy_quad():
    def integrand(x):
        c = stats.norm.cdf(x)
        return x * x * 6 * c * (1 - c) * stats.norm.pdf(x)

    oracle, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-12)
    assert bounds.median3_constant() == pytest.approx(oracle, abs=1e-8)
    assert bounds.median3_constant() == pytest.approx(0.4487, abs=5e-5)


def test_median3_constant_is_a_variance_of_order_statistics():
    # the density integrates to 1, so the constant really is a second moment
    density = lambda x: 6 * stats.norm.cdf(x) * stats.norm.sf(x) * stats.norm.pdf(x)
    assert bounds.adaptive_simpson(density, -8, 8) == pytest.approx(1.0, abs=1e-8)


def test_median3_quadrature_stable_under_refinement():
    coarse = bounds.median3_constant(tol=1e-6)
    fine = bounds.median3_constant(tol=1e-10)
    assert abs(coarse - fine) < 1e-4
    assert abs(bounds.median3_constant(limit=10.0) - fine) < 1e-8


def test_median3_below_single_draw_and_asymptotic_factor():
    c = bounds.median3_constant()
    assert c < bounds.MEDIAN_ASYMPTOTIC_FACTOR < 1.0
    assert bounds.median3_variance(2.0) == pytest.approx(4 * c)


def test_adaptive_simpson_polynomials_exact():
    assert bounds.adaptive_simpson(lambda x: x**3 - 2 * x + 1, 0, 2) == pytest.approx(2.0, abs=1e-12)
    assert bounds.adaptive_simpson(math.sin, 0, math.pi) == pytest.approx(2.0, abs=1e-9)


def test_perturbation_uniform_example():
    v = bounds.attention_perturbation_variances([0.25] * 4, 1.0, 1.0)
    # p^2 [(1-p)^2 + 3 p^2] = 1/16 * (9/16 + 3/16)
    assert np.allclose(v, 0.046875)


def test_perturbation_two_token_example():
    assert bounds.attention_perturbation_variance([0.5, 0.5], 0, 1.0, 1.0) == pytest.approx(0.125)


def test_perturbation_exact_tokens_contribute_nothing():
    p = np.array([0.5, 0.3, 0.2])
    assert np.all(bounds.attention_perturbation_variances(p, 1.0, [0.0, 0.0, 0.0]) == 0)
    only_last = bounds.attention_perturbation_variances(p, 1.0, [0.0, 0.0, 1.0])
    assert only_last[0] == pytest.approx(0.25 * 0.04)
    assert only_last[2] == pytest.approx(0.04 * 0.64)


def test_perturbation_scalar_matches_uniform_array():
    p = np.array([0.1, 0.2, 0.7])
    assert np.allclose(
        bounds.attention_perturbation_variances(p, 0.7, 1.3),
        bounds.attention_perturbation_variances(p, 0.7, [1.3] * 3),
    )


def test_perturbation_rejects_non_distribution():
    with pytest.raises(ValueError):
        bounds.attention_perturbation_variances([0.5, 0.6], 1.0, 1.0)
    with pytest.raises(IndexError):
        bounds.attention_perturbation_variance([1.0], 1, 1.0, 1.0)


@settings(max_examples=100)
@given(
    st.lists(st.floats(0.01, 10), min_size=2, max_size=12),
    st.randoms(use_true_random=False),
)
def test_perturbation_permutation_invariant(w, rnd):
    p = np.array(w) / sum(w)
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    v = bounds.attention_perturbation_variances(p, 1.0, 0.5)
    vp = bounds.attention_perturbation_variances(p[perm], 1.0, 0.5)
    assert np.allclose(v[perm], vp)


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=12), st.floats(0.1, 3))
def test_perturbation_monotone_in_noise(w, s):
    p = np.array(w) / sum(w)
    lo = bounds.attention_perturbation_variances(p, 1.0, s)
    hi = bounds.attention_perturbation_variances(p, 1.0, 1.5 * s)
    assert np.all(hi >= lo) and np.allclose(hi, 2.25 * lo)


def test_perturbation_matches_linearised_monte_carlo():
    # oracle: push small Gaussian logit noise through the exact softmax Jacobian
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6))
    s = np.array([0.0, 0.3, 0.1, 0.0, 0.2, 0.05])
    jac = np.diag(p) - np.outer(p, p)
    eps = rng.standard_normal((400_000, 6)) * s
    dp = eps @ jac.T
    assert np.allclose(dp.var(axis=0), bounds.attention_perturbation_variances(p, 1.0, s), rtol=0.02)


def test_noise_from_occupancy():
    m = bounds.noise_from_occupancy(300, 300, 1.0, 2.0)
    assert m.sigma_k_new == pytest.approx(math.sqrt(math.pi))
    assert m.sigma_v_new == pytest.approx(2 * math.sqrt(math.pi))


def test_median_variance_normal_holds_with_gaussian_factor():
    res = validate.validate_median_variance(validate.normal_sampler, 200_000, seed=1, gaussian=True)
    assert res.holds
    assert res.var_median / res.var_single == pytest.approx(bounds.median3_constant(), abs=0.01)


def test_median_variance_uniform_holds():
    res = validate.validate_median_variance(validate.uniform_sampler, 200_000, seed=2)
    assert res.holds and res.var_median < res.var_single


def test_median_variance_constant_equality_edge():
    res = validate.validate_median_variance(validate.constant_sampler, 1000)
    assert res.var_median == 0 and res.var_single == 0 and res.holds


def test_sign_randomization_additivity():
    res = validate.validate_sign_randomization(100_000, seed=3)
    assert res.holds


def test_chernoff_validator():
    res = validate.validate_chernoff(50_000, seed=4)
    assert res.holds and res.empirical < res.predicted


def test_key_tail_validator_small():
    res = validate.validate_key_tail(200, seed=5)
    assert res.holds
    # the sketch's real variance sits well under the threshold on average
    assert res.details["mean_variance"] < res.details["threshold"]


def test_median3_monte_carlo_close_to_quadrature():
    emp, se = validate.median3_monte_carlo(500_000, seed=6)
    assert abs(emp - bounds.median3_constant()) < 4 * se


def test_run_all_reduced_trials():
    results = validate.run_all(trials=2000, seed=0)
    names = [r.name for r in results]
    assert names == [
        "median_variance_normal", "median_variance_uniform", "median3_constant",
        "sign_randomization", "value_unbiasedness", "chernoff_tail", "key_tail_bound",
    ]
    assert all(isinstance(r.holds, bool) for r in results)
