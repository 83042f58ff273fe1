import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dpblr.baselines import run_non_private
from dpblr.distributions import NiwParams, inverse_gaussian_sample, make_rng
from dpblr.evaluation import mmd2
from dpblr.gibbs import (
    GibbsConfig,
    GibbsError,
    _Sweeper,
    gibbs_step,
    init_state,
    norm_product,
    project_psd_stats,
    run_gibbs,
)
from dpblr.model import (
    Dataset,
    NigParams,
    compute_suff_stats,
    nig_posterior_update,
    stats_to_gram,
)
from dpblr.moments import moments_from_samples, mvn_fourth_moments
from dpblr.privacy import PrivacySpec, release_data_stats, release_fourth_moments

from .conftest import random_dataset

PRIOR = NigParams([0.0, 0.0], np.diag([0.5 / 19, 0.5 / 19]), 20, 0.5)
NIW = NiwParams([0.0], 1.0, [[1.0]], 50)


def _synthetic(rng, n, theta=(0.2, -0.4), sigma2=0.05):
    x = rng.normal(0.1, 0.3, size=n)
    data = Dataset.from_raw(x, np.zeros(n))
    y = data.covariates @ np.array(theta) + np.sqrt(sigma2) * rng.standard_normal(n)
    return Dataset(data.covariates, y)


def _random_spd(rng, k):
    a = rng.normal(size=(k, k))
    return a @ a.T + 0.1 * np.eye(k)


# --- NormProduct --------------------------------------------------------------


def test_norm_product_identical_inputs(rng):
    mu, cov = rng.normal(size=3), _random_spd(rng, 3)
    m3, c3 = norm_product(mu, cov, mu, cov)
    np.testing.assert_allclose(m3, mu, atol=1e-12)
    np.testing.assert_allclose(c3, cov / 2, rtol=1e-10)


def test_norm_product_scalar():
    m3, c3 = norm_product([0.0], [[1.0]], [2.0], [[1.0]])
    assert m3[0] == pytest.approx(1.0)
    assert c3[0, 0] == pytest.approx(0.5)


def test_norm_product_uninformative_factor(rng):
    mu, cov = rng.normal(size=3), _random_spd(rng, 3)
    m3, c3 = norm_product(mu, cov, rng.normal(size=3), 1e12 * np.eye(3))
    np.testing.assert_allclose(m3, mu, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(c3, cov, rtol=1e-6)


def test_norm_product_precision_identity():
    rng = make_rng(21)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        c1, c2 = _random_spd(rng, k), _random_spd(rng, k)
        mu1, mu2 = rng.normal(size=k), rng.normal(size=k)
        m3, c3 = norm_product(mu1, c1, mu2, c2)
        p3 = np.linalg.inv(c3)
        target = np.linalg.inv(c1) + np.linalg.inv(c2)
        assert np.linalg.norm(p3 - target) <= 1e-8 * np.linalg.norm(target)
        np.testing.assert_allclose(m3, c3 @ (np.linalg.solve(c1, mu1) + np.linalg.solve(c2, mu2)),
                                   rtol=1e-8, atol=1e-10)


# --- projection ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), d=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_projection_leaves_exact_stats(n, d, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, max(n, d + 2), d)
    s = compute_suff_stats(data).vector
    out = project_psd_stats(s, d)
    assert np.linalg.norm(out - s) <= 1e-9 * np.linalg.norm(s)


def test_projection_hand_example():
    s = np.array([1.0, 2.0, 1.0])         # B = [[1, 2], [2, 1]], eigenvalues -1 and 3
    out = project_psd_stats(s, 1)
    b_old, b_new = stats_to_gram(s, 1), stats_to_gram(out, 1)
    floor = 1e-8 * 3.0                    # trace of the positive part
    w = np.linalg.eigvalsh(b_new)
    assert w[0] >= floor * (1 - 1e-6)
    assert w[1] == pytest.approx(3.0)
    assert np.linalg.norm(b_new - b_old) == pytest.approx(1.0 + floor, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 3), seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 100))
def test_projection_idempotent_and_psd(d, seed, scale):
    rng = np.random.default_rng(seed)
    s = rng.normal(0, scale, size=d * (d + 1) // 2 + d + 1)
    once = project_psd_stats(s, d)
    twice = project_psd_stats(once, d)
    np.testing.assert_array_equal(once, twice)
    gram = stats_to_gram(once, d)
    assert np.linalg.eigvalsh(gram)[0] >= 0.98e-8 * max(np.trace(gram), 1)


# --- augmentation -------------------------------------------------------------


@pytest.mark.slow
def test_laplace_scale_mixture():
    rng = make_rng(31)
    b = 0.7
    omega2 = rng.exponential(2 * b * b, size=10 ** 6)      # rate 1 / (2 b^2)
    draws = np.sqrt(omega2) * rng.standard_normal(omega2.shape[0])
    assert stats.kstest(draws, stats.laplace(scale=b).cdf).pvalue > 0.001


@pytest.mark.slow
def test_omega_update_preserves_joint():
    # (omega2, e) from the augmented prior, then one conditional refresh of omega2:
    # the refreshed omega2 must still be Exp(rate 1/(2 b^2)).
    rng = make_rng(32)
    b = 1.3
    omega2 = rng.exponential(2 * b * b, size=2 * 10 ** 5)
    e = np.sqrt(omega2) * rng.standard_normal(omega2.shape[0])
    resid = np.maximum(np.abs(e), 1e-12)
    fresh = 1.0 / inverse_gaussian_sample(1.0 / (b * resid), 1.0 / b ** 2, rng)
    assert stats.kstest(fresh[:10 ** 4], stats.expon(scale=2 * b * b).cdf).pvalue > 0.001


# --- chain --------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        GibbsConfig("other")
    with pytest.raises(ValueError):
        GibbsConfig(samples=0)
    with pytest.raises(ValueError):
        GibbsConfig(thin=0)
    with pytest.raises(ValueError):
        GibbsConfig(b_floor=0.0)


def _release(rng, n=50, eps=1.0, split=1.0):
    data = _synthetic(rng, n)
    spec = PrivacySpec(eps, budget_split=split)
    return data, release_data_stats(data, spec, rng), spec


def test_variant_inputs_checked(rng):
    data, z, _ = _release(rng)
    mom = moments_from_samples(data)
    with pytest.raises(ValueError, match="NiwParams"):
        run_gibbs(z, PRIOR, mom, GibbsConfig("update", 1, 1), rng)
    noisy = release_fourth_moments(data, PrivacySpec(1.0, budget_split=0.5), rng)
    with pytest.raises(ValueError):
        run_gibbs(z, PRIOR, noisy, GibbsConfig("prior", 1, 1), rng)
    with pytest.raises(ValueError):
        run_gibbs(z, PRIOR, NIW, GibbsConfig("noisy", 1, 1), rng)
    with pytest.raises(ValueError):
        run_gibbs(z, PRIOR, NiwParams([0, 0], 1.0, np.eye(2), 5), GibbsConfig("update", 1, 1), rng)


@pytest.mark.parametrize("variant", ["noisy", "prior", "update"])
def test_chain_deterministic_and_valid(variant):
    rng = make_rng(5)
    data, z, _ = _release(rng, eps=0.5)
    if variant == "noisy":
        source = release_fourth_moments(data, PrivacySpec(0.5, budget_split=0.5), rng)
    elif variant == "prior":
        source = mvn_fourth_moments([0.1], [[0.09]], bias=True)
    else:
        source = NIW
    config = GibbsConfig(variant, burnin=50, samples=200, thin=2, seed=9, keep_stats=True)
    a = run_gibbs(z, PRIOR, source, config, make_rng(9))
    b = run_gibbs(z, PRIOR, source, config, make_rng(9))
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.sigma2.tobytes() == b.sigma2.tobytes()
    assert len(a) == 200 and a.latent_stats.shape == (200, 6)
    assert np.all(a.sigma2 > 0)
    for s in a.latent_stats:
        gram = stats_to_gram(s, 2)
        assert np.linalg.eigvalsh(gram)[0] >= 0.98e-8 * max(np.trace(gram), 1)
    assert a.meta["method"] == f"gibbs-ss-{variant}"
    assert a.meta["burnin"] == 50 and a.meta["thin"] == 2 and a.meta["seed"] == 9


def test_gibbs_step_keeps_invariants(rng):
    data, z, _ = _release(rng)
    config = GibbsConfig("update", 1, 1)
    state = init_state(z, PRIOR, NIW, config, rng)
    for _ in range(20):
        state = gibbs_step(state, z, PRIOR, config, rng)
        assert np.all(state.omega2 > 0) and np.all(np.isfinite(state.s))
        assert state.sigma2 > 0
        assert np.linalg.eigvalsh(state.tau2)[0] > 0


def test_b_floor_clamp(rng):
    z = release_data_stats(_synthetic(rng, 10), PrivacySpec(1.0), rng)
    sweeper = _Sweeper(z, PRIOR, GibbsConfig("prior"))
    # PSD Gram matrix with y perfectly explained: b_n would be ~0 or slightly negative
    x = np.array([[1.0, 0.5], [1.0, -0.5], [1.0, 0.1]])
    y = x @ np.array([0.3, 1.0])
    s = compute_suff_stats(Dataset(x, y)).vector
    s[-1] -= 1e-3                                   # push y^T y just below the fit
    theta, sigma2 = sweeper.draw_params(s, rng)
    assert sigma2 > 0 and np.all(np.isfinite(theta))


def test_update_variant_conditional_independence(rng):
    # with s fixed, the regression draw never reads (mu_x, tau2) and vice versa
    params = inspect.signature(_Sweeper.draw_params).parameters
    assert list(params) == ["self", "s", "rng"]
    params = inspect.signature(_Sweeper.draw_covariate_params).parameters
    assert list(params) == ["self", "s", "rng"]
    _, z, _ = _release(rng)
    sweeper = _Sweeper(z, PRIOR, GibbsConfig("update"), NIW)
    s = project_psd_stats(z.z, 2)
    a = sweeper.draw_params(s, make_rng(3))
    sweeper.niw_prior = NiwParams([5.0], 2.0, [[9.0]], 80)
    b = sweeper.draw_params(s, make_rng(3))
    assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1]


def test_error_carries_iteration(rng):
    _, z, _ = _release(rng)
    bad = mvn_fourth_moments([0.0], [[1.0]], bias=True)
    object.__setattr__(bad, "eta4", np.full_like(bad.eta4, np.nan))
    with pytest.raises(GibbsError) as info:
        run_gibbs(z, PRIOR, bad, GibbsConfig("prior", 3, 3), rng)
    assert info.value.iteration == 0


def _zero_noise_chain(seed):
    rng = make_rng(seed)
    data = _synthetic(rng, 40)
    z = release_data_stats(data, PrivacySpec(1e9), rng)
    out = run_gibbs(z, PRIOR, moments_from_samples(data), GibbsConfig("prior", 100, 2000), rng)
    return data, out


@pytest.mark.slow
def test_zero_noise_chain_matches_analytic_posterior():
    data, out = _zero_noise_chain(41)
    post = nig_posterior_update(PRIOR, compute_suff_stats(data))
    cov = np.linalg.inv(post.lam) * post.b / post.a
    for j in range(2):
        ref = stats.t(2 * post.a, loc=post.mu[j], scale=np.sqrt(cov[j, j]))
        assert stats.kstest(out.theta[:, j], ref.cdf).pvalue > 0.01
    assert stats.kstest(out.sigma2, stats.invgamma(post.a, scale=post.b).cdf).pvalue > 0.01


@pytest.mark.slow
def test_vanishing_noise_mmd_self_consistency():
    rng = make_rng(42)
    data = _synthetic(rng, 1000)
    z = release_data_stats(data, PrivacySpec(1e9), rng)
    out = run_gibbs(z, PRIOR, moments_from_samples(data), GibbsConfig("prior", 200, 2000), rng)
    ref = run_non_private(data, PRIOR, 2000, make_rng(1)).params()
    gibbs_mmd = mmd2(out.params(), ref, m=500, rng=make_rng(2))
    baseline = [mmd2(run_non_private(data, PRIOR, 2000, make_rng(100 + k)).params(), ref, m=500,
                     rng=make_rng(200 + k)) for k in range(20)]
    assert gibbs_mmd < np.mean(baseline) + 2 * np.std(baseline, ddof=1)


@pytest.mark.slow
def test_high_epsilon_agrees_with_non_private():
    rng = make_rng(43)
    data = _synthetic(rng, 1000)
    spec = PrivacySpec(10.0, budget_split=0.5)
    z = release_data_stats(data, spec, rng)
    mom = release_fourth_moments(data, spec, rng)
    out = run_gibbs(z, PRIOR, mom, GibbsConfig("noisy", 2000, 5000), rng)
    exact = nig_posterior_update(PRIOR, compute_suff_stats(data)).mu
    assert np.all(np.abs(out.theta.mean(axis=0) - exact) < 0.05)


def _batch_se(x, batches=20):
    means = x[: len(x) // batches * batches].reshape(batches, -1).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(batches)


@pytest.mark.slow
def test_split_half_stationarity():
    rng = make_rng(44)
    data = _synthetic(rng, 100)
    z = release_data_stats(data, PrivacySpec(1.0), rng)
    out = run_gibbs(z, PRIOR, NIW, GibbsConfig("update", 5000, 20000), rng)
    first, second = out.theta[:10000], out.theta[10000:]
    for j in range(2):
        se = np.hypot(_batch_se(first[:, j]), _batch_se(second[:, j]))
        assert abs(first[:, j].mean() - second[:, j].mean()) < 3 * se
