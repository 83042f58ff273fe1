"""Noise-aware Gibbs sampler over latent sufficient statistics.

Each sweep draws the latent statistics ``s`` from the product of the normal
approximation ``N(n mu_t, n Sigma_t)`` and the augmented noise model
``N(z, diag(omega2))``, projects ``s`` onto valid statistics, draws
``(theta, sigma2)`` by the conjugate update and refreshes the Laplace
augmentation variances ``omega2``.  Three variants differ only in where the
covariate moments come from:

``noisy``
    fixed moments estimated from a privately released fourth-moment sum;
``prior``
    fixed moments computed once from a covariate prior;
``update``
    moments of ``x ~ N(mu_x, tau2)`` with ``(mu_x, tau2)`` resampled every
    sweep from their NIW full conditional given the latent ``X^T X`` block.
"""

import time
from dataclasses import dataclass

import numpy as np

from ._linalg import COV_FLOOR, NumericalError, chol_solve, cholesky, symmetrize
from .distributions import (
    NiwParams,
    inverse_gaussian_sample,
    niw_posterior_update,
    niw_sample,
    niw_update_parts,
)
from .model import (
    ParamDraw,
    PosteriorSamples,
    gram_to_stats,
    nig_draw_arrays,
    nig_sample,
    nig_update_arrays,
    pair_indices,
    split_vector,
    stats_to_gram,
)
from .moments import CovariateMoments, clt_arrays, moments_from_noisy_release, mvn_fourth_moments
from .privacy import NoisyMoments

VARIANTS = ("noisy", "prior", "update")
STATS_PSD_FLOOR = 1e-8
RESIDUAL_GUARD = 1e-12


class GibbsError(NumericalError):
    """A sweep failed; ``iteration`` is the 0-based sweep index."""

    def __init__(self, iteration, cause):
        super().__init__(f"Gibbs sweep {iteration} failed: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class GibbsConfig:
    variant: str = "noisy"
    burnin: int = 5000
    samples: int = 20000
    thin: int = 1
    seed: int = None
    b_floor: float = 1e-8
    keep_stats: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.burnin < 0 or self.samples < 1 or self.thin < 1:
            raise ValueError("need burnin >= 0, samples >= 1 and thin >= 1")
        if not self.b_floor > 0:
            raise ValueError("b_floor must be positive")


@dataclass
class GibbsState:
    theta: np.ndarray
    sigma2: float
    s: np.ndarray
    omega2: np.ndarray
    moments: CovariateMoments
    niw_prior: NiwParams = None
    mu_x: np.ndarray = None
    tau2: np.ndarray = None

    @property
    def draw(self):
        return ParamDraw(self.theta, self.sigma2)


def norm_product(mu1, cov1, mu2, cov2):
    """Parameters of the normalised product ``N(mu1, cov1) N(mu2, cov2)``.

    Evaluated in gain form, ``cov3 = cov1 - cov1 (cov1 + cov2)^-1 cov1``, so
    neither input needs to be inverted and a singular ``cov1`` is allowed as
    long as ``cov1 + cov2`` is positive definite.
    """
    mu1 = np.asarray(mu1, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    lower = cholesky(symmetrize(cov1 + cov2), "joint covariance")
    gain_t = chol_solve(lower, cov1)            # (cov1 + cov2)^-1 cov1
    mu3 = mu1 + gain_t.T @ (np.asarray(mu2, dtype=float) - mu1)
    cov3 = symmetrize(cov1 - cov1 @ gain_t)
    return mu3, cov3


def project_psd_stats(s, d):
    """Map a statistics vector to one whose Gram matrix ``[X, y]^T [X, y]`` is PSD.

    Eigenvalues below ``1e-8 * max(t, 1)`` are raised to that floor, where
    ``t`` is the trace of the positive part of ``B`` (the plain trace for valid
    inputs).  Unlike the full trace, ``t`` barely moves when negative
    eigenvalues are lifted, so inputs that already clear the floor are
    returned unchanged and the projection is idempotent.
    """
    s = np.asarray(s, dtype=float)
    w, v = np.linalg.eigh(stats_to_gram(s, d))
    floor = STATS_PSD_FLOOR * max(np.sum(w[w > 0]), 1.0)
    if w[0] >= 0.99 * floor:
        return s
    w = np.maximum(w, floor)
    return gram_to_stats(symmetrize((v * w) @ v.T))


class _Sweeper:
    """Constants of one chain, precomputed so the per-sweep work stays small."""

    def __init__(self, z, prior, config, niw_prior=None):
        self.z = z.z
        self.n = z.n
        self.scale = z.scale
        self.d = prior.d
        self.rows, self.cols = pair_indices(self.d)
        self.prior = prior
        self.config = config
        self.niw_prior = niw_prior
        self._moments = None

    def set_moments(self, mom):
        if mom is self._moments:
            return
        if mom.d != self.d:
            raise ValueError(f"moments are {mom.d}-dimensional but the model has d={self.d}")
        self._moments = mom
        self.eta2 = mom.eta2
        self.eta4 = mom.eta4_tensor()
        self.xi_pairs = mom.xi_matrix()

    def draw_stats(self, theta, sigma2, omega2, rng):
        """Sample ``s`` from ``NormProduct(n mu_t, n Sigma_t, z, diag(omega2))`` and project.

        Uses the perturbation form of the product: with ``a ~ N(n mu_t, n Sigma_t)``
        and ``e ~ N(0, diag(omega2))``, ``a + K (z - a - e)`` with gain
        ``K = n Sigma_t (n Sigma_t + diag(omega2))^-1`` has exactly the
        product's mean and covariance, and needs a single Cholesky factor.
        """
        mu, cov = clt_arrays(
            theta, sigma2, self.eta2, self.eta4, self.xi_pairs, self.rows, self.cols
        )
        cov = self.n * symmetrize(cov)
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w, max(COV_FLOOR * np.sum(w), np.finfo(float).tiny))
        cov = (v * w) @ v.T
        size = mu.shape[0]
        a = self.n * mu + v @ (np.sqrt(w) * rng.standard_normal(size))
        e = np.sqrt(omega2) * rng.standard_normal(size)
        joint = cov + np.diag(omega2)
        s = a + cov @ chol_solve(cholesky(joint, "joint covariance"), self.z - a - e)
        return project_psd_stats(s, self.d)

    def draw_params(self, s, rng):
        p = self.prior
        xtx, xty, yty = split_vector(s, self.d)
        mu_n, _, lower, a_n, b_n = nig_update_arrays(
            p.mu, p.lam, p.a, p.b, xtx, xty, yty, self.n
        )
        b_n = max(b_n, self.config.b_floor)
        return nig_draw_arrays(mu_n, lower, a_n, b_n, rng)

    def draw_omega2(self, s, rng):
        resid = np.maximum(np.abs(self.z - s), RESIDUAL_GUARD)
        inv = inverse_gaussian_sample(1.0 / (self.scale * resid), 1.0 / self.scale ** 2, rng)
        return 1.0 / inv

    def draw_covariate_params(self, s, rng):
        xtx, _, _ = split_vector(s, self.d)
        try:
            post = niw_posterior_update(self.niw_prior, self.n, xtx[0, 1:], xtx[1:, 1:])
        except NumericalError:
            mu_n, kappa_n, psi_n, nu_n = niw_update_parts(
                self.niw_prior, self.n, xtx[0, 1:], xtx[1:, 1:]
            )
            w, v = np.linalg.eigh(psi_n)
            w = np.maximum(w, STATS_PSD_FLOOR * max(w[-1], 1.0))
            post = NiwParams(mu_n, kappa_n, symmetrize((v * w) @ v.T), nu_n)
        return niw_sample(post, rng)

    def sweep(self, state, rng):
        self.set_moments(state.moments)
        s = self.draw_stats(state.theta, state.sigma2, state.omega2, rng)
        theta, sigma2 = self.draw_params(s, rng)
        omega2 = self.draw_omega2(s, rng)
        new = GibbsState(theta, sigma2, s, omega2, state.moments, state.niw_prior,
                         state.mu_x, state.tau2)
        if self.config.variant == "update":
            new.mu_x, new.tau2 = self.draw_covariate_params(s, rng)
            new.moments = mvn_fourth_moments(new.mu_x, new.tau2, bias=True)
        return new


def gibbs_step(state, z, prior, config, rng):
    """One full sweep of the sampler; returns a new state."""
    return _Sweeper(z, prior, config, state.niw_prior).sweep(state, rng)


def _resolve_moments(z, prior, moments_source, config):
    if config.variant == "update":
        if not isinstance(moments_source, NiwParams):
            raise ValueError("the 'update' variant needs NiwParams for the covariate prior")
        if moments_source.dim != prior.d - 1:
            raise ValueError(
                f"covariate prior is {moments_source.dim}-dimensional; expected d - 1 = {prior.d - 1}"
            )
        return None
    if isinstance(moments_source, NoisyMoments):
        if config.variant != "noisy":
            raise ValueError("released moments are only used by the 'noisy' variant")
        return moments_from_noisy_release(moments_source.sums, moments_source.n,
                                          x_bounds=moments_source.x_bounds)
    if isinstance(moments_source, CovariateMoments):
        return moments_source
    raise ValueError(
        f"the {config.variant!r} variant needs CovariateMoments or NoisyMoments, "
        f"got {type(moments_source).__name__}"
    )


def init_state(z, prior, moments_source, config, rng):
    """Prior draws for ``(theta, sigma2)`` and ``omega2``; ``s`` starts at the projected release."""
    mom = _resolve_moments(z, prior, moments_source, config)
    draw = nig_sample(prior, rng)
    omega2 = rng.exponential(2.0 * z.scale ** 2, size=z.z.shape[0])
    state = GibbsState(draw.theta, draw.sigma2, project_psd_stats(z.z, prior.d), omega2, mom)
    if config.variant == "update":
        state.niw_prior = moments_source
        state.mu_x, state.tau2 = niw_sample(moments_source, rng)
        state.moments = mvn_fourth_moments(state.mu_x, state.tau2, bias=True)
    return state


def run_gibbs(z, prior, moments_source, config, rng):
    """Run one chain and return thinned post-burn-in draws.

    ``moments_source`` is :class:`~dpblr.privacy.NoisyMoments` or
    :class:`~dpblr.moments.CovariateMoments` for the ``noisy`` variant,
    :class:`~dpblr.moments.CovariateMoments` for ``prior`` and the covariate
    :class:`~dpblr.distributions.NiwParams` for ``update``.
    """
    if z.z.shape[0] != len(pair_indices(prior.d)[0]) + prior.d + 1:
        raise ValueError("released statistics do not match the prior dimension")
    start = time.process_time()
    state = init_state(z, prior, moments_source, config, rng)
    sweeper = _Sweeper(z, prior, config, state.niw_prior)
    thetas = np.empty((config.samples, prior.d))
    sigma2s = np.empty(config.samples)
    stats = np.empty((config.samples, z.z.shape[0])) if config.keep_stats else None
    total = config.burnin + config.samples * config.thin
    k = 0
    for it in range(total):
        try:
            state = sweeper.sweep(state, rng)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise GibbsError(it, exc) from exc
        kept = it - config.burnin
        if kept >= 0 and (kept + 1) % config.thin == 0:
            thetas[k] = state.theta
            sigma2s[k] = state.sigma2
            if stats is not None:
                stats[k] = state.s
            k += 1
    meta = {
        "method": f"gibbs-ss-{config.variant}",
        "seed": config.seed,
        "epsilon": z.epsilon,
        "n": z.n,
        "burnin": config.burnin,
        "samples": config.samples,
        "thin": config.thin,
        "runtime": time.process_time() - start,
    }
    return PosteriorSamples(thetas, sigma2s, meta, latent_stats=stats)
