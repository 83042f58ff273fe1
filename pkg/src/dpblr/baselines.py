"""Comparison methods: the non-private posterior, noise-naive SSP and MCMC-Ind.

MCMC-Ind keeps a latent record ``(x_i, y_i)`` for every individual and runs
Metropolis-within-Gibbs: conjugate draws of the regression and covariate
parameters alternate with per-individual random-walk moves whose target
includes the exact Laplace likelihood of the release.
"""

import time
from dataclasses import dataclass

import numpy as np

from ._linalg import NumericalError, cholesky, symmetrize
from .distributions import NiwParams, niw_posterior_update, niw_sample
from .gibbs import project_psd_stats
from .model import (
    NigParams,
    NonPositiveScale,
    PosteriorSamples,
    SuffStats,
    compute_suff_stats,
    nig_draw_arrays,
    nig_posterior_update,
    nig_sample,
    nig_sample_many,
    nig_update_arrays,
    pair_indices,
    split_vector,
)


def run_non_private(data, prior, count=2000, rng=None):
    """I.i.d. draws from the exact conjugate posterior given the raw data."""
    start = time.process_time()
    post = nig_posterior_update(prior, compute_suff_stats(data))
    theta, sigma2 = nig_sample_many(post, count, rng)
    meta = {"method": "non-private", "n": data.n, "runtime": time.process_time() - start}
    return PosteriorSamples(theta, sigma2, meta)


def run_naive(z, prior, count=2000, rng=None):
    """Treat the released statistics as exact and apply the conjugate update.

    When the update is undefined (``Lambda_n`` not positive definite or
    ``b_n <= 0``) the release is first projected onto valid statistics;
    ``meta["repaired"]`` records whether that happened.
    """
    start = time.process_time()
    d = prior.d
    repaired = False
    try:
        post = nig_posterior_update(prior, SuffStats.from_vector(z.z, z.n, d))
    except NumericalError:
        repaired = True
        fixed = project_psd_stats(z.z, d)
        try:
            post = nig_posterior_update(prior, SuffStats.from_vector(fixed, z.n, d))
        except NonPositiveScale:
            # b_n can stay marginally non-positive when the projected Gram
            # matrix sits exactly on the PSD floor; the prior scale then bounds it
            mu_n, lam_n, _, a_n, _ = nig_update_arrays(
                prior.mu, prior.lam, prior.a, prior.b, *split_vector(fixed, d), z.n
            )
            post = NigParams(mu_n, symmetrize(lam_n), a_n, prior.b)
    theta, sigma2 = nig_sample_many(post, count, rng)
    meta = {
        "method": "naive",
        "n": z.n,
        "epsilon": z.epsilon,
        "repaired": repaired,
        "runtime": time.process_time() - start,
    }
    return PosteriorSamples(theta, sigma2, meta)


@dataclass(frozen=True)
class IndConfig:
    burnin: int = 500
    samples: int = 2000
    thin: int = 1
    seed: int = None
    init_scale: float = 0.2
    adapt_every: int = 25
    target_accept: tuple = (0.25, 0.4)
    recompute_every: int = 100
    # validation mode: start from the given latent records and keep X fixed
    clamp_x: bool = False

    def __post_init__(self):
        if self.burnin < 0 or self.samples < 1 or self.thin < 1:
            raise ValueError("need burnin >= 0, samples >= 1 and thin >= 1")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


@dataclass
class IndState:
    x: np.ndarray           # n x d latent covariates, unit column included
    y: np.ndarray
    theta: np.ndarray
    sigma2: float
    mu_x: np.ndarray
    tau2: np.ndarray
    proposal_scale: np.ndarray
    s: np.ndarray = None
    shift_scale: np.ndarray = None

    def __post_init__(self):
        if self.s is None:
            self.s = _stats(self.x, self.y)
        if self.shift_scale is None:
            self.shift_scale = np.full(self.x.shape[1], 0.5)


def _stats(x, y):
    rows, cols = pair_indices(x.shape[1])
    xtx = x.T @ x
    return np.concatenate([xtx[rows, cols], x.T @ y, [y @ y]])


def _t_single(xi, yi, rows, cols):
    return np.concatenate([np.outer(xi, xi)[rows, cols], xi * yi, [yi * yi]])


def metropolis_individuals(state, z, rng, counter=None, clamp_x=False):
    """One random-walk Metropolis pass over all individuals, in place.

    The target for record ``i`` is ``N(x_i; mu_x, tau2) N(y_i; theta^T x_i,
    sigma2) Lap(z; t(X, y), b)``, evaluated exactly.  The running statistics
    ``state.s`` are updated incrementally.  Returns the number of accepted moves.
    """
    n, d = state.x.shape
    rows, cols = pair_indices(d)
    zv, b = z.z, z.scale
    prec = np.linalg.inv(state.tau2)
    mu_x, theta, inv_s2 = state.mu_x, state.theta, 1.0 / state.sigma2
    scale = state.proposal_scale
    s = state.s
    resid_l1 = np.sum(np.abs(zv - s))
    steps = rng.standard_normal((n, d))
    log_u = np.log(rng.uniform(size=n))
    accepted = 0
    for i in range(n):
        xi, yi = state.x[i], state.y[i]
        xn = xi.copy()
        if not clamp_x:
            xn[1:] += scale[:-1] * steps[i, :-1]
        yn = yi + scale[-1] * steps[i, -1]
        dx_old, dx_new = xi[1:] - mu_x, xn[1:] - mu_x
        r_old, r_new = yi - theta @ xi, yn - theta @ xn
        t_old, t_new = _t_single(xi, yi, rows, cols), _t_single(xn, yn, rows, cols)
        s_new = s - t_old + t_new
        l1_new = np.sum(np.abs(zv - s_new))
        log_ratio = (
            -0.5 * (dx_new @ prec @ dx_new - dx_old @ prec @ dx_old)
            - 0.5 * inv_s2 * (r_new * r_new - r_old * r_old)
            - (l1_new - resid_l1) / b
        )
        if log_u[i] < log_ratio:
            state.x[i], state.y[i] = xn, yn
            s, resid_l1 = s_new, l1_new
            accepted += 1
            if counter is not None:
                counter["accepted"] += 1
                if counter["accepted"] % counter["every"] == 0:
                    fresh = _stats(state.x, state.y)
                    err = np.max(np.abs(fresh - s)) / max(np.max(np.abs(fresh)), 1.0)
                    counter["max_drift"] = max(counter["max_drift"], err)
                    s = fresh
                    resid_l1 = np.sum(np.abs(zv - s))
    state.s = s
    return accepted


def shift_moves(state, z, prior, rng):
    """Joint translations ``theta_j += delta``, ``y += delta * X[:, j]``, in place.

    Residuals ``y - X theta`` are unchanged, so only the coefficient prior and
    the Laplace term enter the acceptance ratio.  Without these moves
    ``theta`` can only drift by about ``sigma / sqrt(n)`` per sweep when the
    release is uninformative.  Returns a boolean array of acceptances.
    """
    d = state.x.shape[1]
    zv, b = z.z, z.scale
    inv_s2 = 1.0 / state.sigma2
    accepted = np.zeros(d, dtype=bool)
    deltas = state.shift_scale * rng.standard_normal(d)
    log_u = np.log(rng.uniform(size=d))
    for j in range(d):
        theta_new = state.theta.copy()
        theta_new[j] += deltas[j]
        y_new = state.y + deltas[j] * state.x[:, j]
        s_new = _stats(state.x, y_new)
        r_old, r_new = state.theta - prior.mu, theta_new - prior.mu
        log_ratio = (
            -0.5 * inv_s2 * (r_new @ prior.lam @ r_new - r_old @ prior.lam @ r_old)
            - (np.sum(np.abs(zv - s_new)) - np.sum(np.abs(zv - state.s))) / b
        )
        if log_u[j] < log_ratio:
            state.theta, state.y, state.s = theta_new, y_new, s_new
            accepted[j] = True
    return accepted


def _adapt(scale, rate, band):
    lo, hi = band
    if rate < lo:
        scale *= 0.7
    elif rate > hi:
        scale *= 1.4


def _init_ind_state(z, prior, covariate_prior, n, config, rng, init):
    d = prior.d
    draw = nig_sample(prior, rng)
    mu_x, tau2 = niw_sample(covariate_prior, rng)
    if init is not None:
        x, y = (np.array(a, dtype=float) for a in init)
    else:
        x_real = mu_x + rng.standard_normal((n, d - 1)) @ cholesky(tau2, "tau2").T
        x = np.column_stack([np.ones(n), x_real])
        y = x @ draw.theta + np.sqrt(draw.sigma2) * rng.standard_normal(n)
    scale = np.full(d, config.init_scale)
    return IndState(x, y, draw.theta, draw.sigma2, mu_x, tau2, scale)


def run_mcmc_ind(z, prior, covariate_prior, n, config=IndConfig(), rng=None, init=None):
    """Noise-aware inference with one latent record per individual.

    ``covariate_prior`` is the NIW prior of the non-unit covariates; column 0
    of the latent covariates is the unit feature.  ``init`` optionally gives
    starting ``(X, y)``; with ``config.clamp_x`` the covariates stay fixed.
    Proposal scales adapt during burn-in toward the ``target_accept`` band
    and are frozen afterwards.
    """
    if n != z.n:
        raise ValueError(f"n={n} does not match the release population size {z.n}")
    if not isinstance(covariate_prior, NiwParams) or covariate_prior.dim != prior.d - 1:
        raise ValueError("covariate_prior must be NiwParams over the d - 1 non-unit covariates")
    start = time.process_time()
    state = _init_ind_state(z, prior, covariate_prior, n, config, rng, init)
    counter = {"accepted": 0, "every": config.recompute_every, "max_drift": 0.0}
    thetas = np.empty((config.samples, prior.d))
    sigma2s = np.empty(config.samples)
    total = config.burnin + config.samples * config.thin
    window_acc = 0
    window_props = 0
    shift_acc = np.zeros(prior.d)
    accepted_total = 0
    kept = 0
    for it in range(total):
        xtx, xty, yty = split_vector(state.s, prior.d)
        mu_n, _, lower, a_n, b_n = nig_update_arrays(
            prior.mu, prior.lam, prior.a, prior.b, xtx, xty, yty, n
        )
        state.theta, state.sigma2 = nig_draw_arrays(mu_n, lower, a_n, max(b_n, 1e-12), rng)

        acc = metropolis_individuals(state, z, rng, counter, config.clamp_x)
        window_acc += acc
        window_props += n
        shift_acc += shift_moves(state, z, prior, rng)

        if not config.clamp_x:
            x_real = state.x[:, 1:]
            post = niw_posterior_update(
                covariate_prior, n, x_real.sum(axis=0), x_real.T @ x_real
            )
            state.mu_x, state.tau2 = niw_sample(post, rng)

        if it < config.burnin:
            if (it + 1) % config.adapt_every == 0:
                _adapt(state.proposal_scale, window_acc / window_props, config.target_accept)
                for j in range(prior.d):
                    _adapt(state.shift_scale[j:j + 1], shift_acc[j] / config.adapt_every,
                           config.target_accept)
                window_acc = window_props = 0
                shift_acc[:] = 0
        else:
            accepted_total += acc
            if (it - config.burnin + 1) % config.thin == 0:
                thetas[kept] = state.theta
                sigma2s[kept] = state.sigma2
                kept += 1
    sampled = config.samples * config.thin
    meta = {
        "method": "mcmc-ind",
        "seed": config.seed,
        "n": n,
        "epsilon": z.epsilon,
        "burnin": config.burnin,
        "samples": config.samples,
        "thin": config.thin,
        "acceptance_rate": accepted_total / (sampled * n),
        "proposal_scale": state.proposal_scale.tolist(),
        "shift_scale": state.shift_scale.tolist(),
        "max_bookkeeping_drift": counter["max_drift"],
        "runtime": time.process_time() - start,
    }
    return PosteriorSamples(thetas, sigma2s, meta)
