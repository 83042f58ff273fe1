"""Seedable samplers for the distributions used by the release and inference code.

Every sampler takes an explicit :class:`numpy.random.Generator`.  A generator
plays the role of a random stream: build one with :func:`make_rng` and hand
independent children to concurrent chains with :func:`split_rng`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import NumericalError, cholesky, floor_eigenvalues, symmetrize


def make_rng(seed):
    """Return a PCG64 generator seeded from a 64-bit integer (or ``SeedSequence``)."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng, count):
    """Spawn ``count`` statistically independent child generators."""
    return rng.spawn(count)


def _check_square_symmetric(cov, tol=1e-8):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    scale = max(np.max(np.abs(cov)), 1.0)
    if np.max(np.abs(cov - cov.T)) > tol * scale:
        raise ValueError("covariance is not symmetric")
    return cov


def mvn_sample(mean, cov, rng):
    """Draw from ``N(mean, cov)``.

    Tiny negative eigenvalues from round-off are floored at ``1e-10 * trace``
    before the Cholesky factorisation.  A zero covariance returns ``mean``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = _check_square_symmetric(cov)
    if cov.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    if not np.any(cov):
        return mean.copy()
    lower = cholesky(floor_eigenvalues(cov), "covariance")
    return mean + lower @ rng.standard_normal(mean.shape[0])


def laplace_sample(loc, scale, rng):
    """I.i.d. Laplace draws centred componentwise at ``loc`` with scale ``scale``."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    loc = np.asarray(loc, dtype=float)
    return loc + rng.laplace(0.0, scale, size=loc.shape)


def exponential_sample(rate, rng, size=None):
    """Exponential draws with density ``rate * exp(-rate * w)``."""
    rate = np.asarray(rate, dtype=float)
    if np.any(rate <= 0):
        raise ValueError("exponential rate must be positive")
    return rng.exponential(1.0 / rate, size=size)


def inverse_gamma_sample(a, b, rng, size=None):
    """Inverse-gamma draws with shape ``a`` and scale ``b`` (mean ``b / (a - 1)``)."""
    if not (a > 0 and b > 0):
        raise ValueError(f"inverse-gamma parameters must be positive, got a={a}, b={b}")
    return b / rng.gamma(a, 1.0, size=size)


def inverse_gaussian_sample(m, v, rng):
    """Inverse-Gaussian draws with mean ``m`` and shape ``v``.

    Uses the Michael-Schucany-Haas transformation with one rejection step.
    ``m`` and ``v`` broadcast, so a vector of independent draws is returned for
    vector arguments.  The smaller root of the quadratic is computed as
    ``m**2 / larger_root`` to avoid cancellation when ``m`` is large.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(m <= 0) or np.any(v <= 0):
        raise ValueError("inverse-Gaussian parameters must be positive")
    shape = np.broadcast(m, v).shape
    nu = rng.standard_normal(shape)
    y = nu * nu
    my = m * y
    big = m + m * my / (2.0 * v) + m / (2.0 * v) * np.sqrt(4.0 * v * my + my * my)
    small = m * (m / big)
    u = rng.uniform(size=shape)
    out = np.where(u <= m / (m + small), small, big)
    return out if shape else float(out)


@dataclass(frozen=True)
class NiwParams:
    """Normal-inverse-Wishart prior over a covariate mean and covariance.

    ``mu | cov ~ N(mu0, cov / lambda0)`` and ``cov ~ InverseWishart(psi0, nu0)``.
    """

    mu0: np.ndarray
    lambda0: float
    psi0: np.ndarray
    nu0: float

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        psi0 = np.atleast_2d(np.asarray(self.psi0, dtype=float))
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "psi0", psi0)
        p = mu0.shape[0]
        if psi0.shape != (p, p):
            raise ValueError(f"psi0 must be {p}x{p}, got {psi0.shape}")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if not self.nu0 > p - 1:
            raise ValueError(f"nu0 must exceed {p - 1}")
        asym = np.max(np.abs(psi0 - psi0.T))
        if asym > 1e-8 * np.max(np.abs(psi0)) or np.linalg.eigvalsh(psi0)[0] <= 0:
            raise ValueError("psi0 must be symmetric positive definite")

    @property
    def dim(self):
        return self.mu0.shape[0]


def inverse_wishart_sample(psi, nu, rng):
    """Draw from ``InverseWishart(psi, nu)`` via the Bartlett decomposition.

    If ``W ~ Wishart(I, nu)`` and ``psi = C C^T`` then ``C W^{-1} C^T`` has the
    required law; with ``W = A A^T`` this is ``(A^{-1} C^T)^T (A^{-1} C^T)``.
    """
    psi = np.atleast_2d(psi)
    p = psi.shape[0]
    chol = cholesky(psi, "inverse-Wishart scale")
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(nu - np.arange(p)))
    tril = np.tril_indices(p, -1)
    a[tril] = rng.standard_normal(len(tril[0]))
    b = solve_triangular(a, chol.T, lower=True, check_finite=False)
    return symmetrize(b.T @ b)


def niw_sample(params, rng):
    """Draw ``(mean, cov)`` from a normal-inverse-Wishart distribution."""
    cov = inverse_wishart_sample(params.psi0, params.nu0, rng)
    lower = cholesky(cov / params.lambda0, "NIW mean covariance")
    mean = params.mu0 + lower @ rng.standard_normal(params.dim)
    return mean, cov


def niw_update_parts(prior, n, sum_x, scatter_xx):
    """Raw conjugate NIW update ``(mu_n, kappa_n, psi_n, nu_n)`` without a PD check."""
    sum_x = np.atleast_1d(np.asarray(sum_x, dtype=float))
    scatter_xx = np.atleast_2d(np.asarray(scatter_xx, dtype=float))
    kappa_n = prior.lambda0 + n
    dev = sum_x / n - prior.mu0
    psi_n = (
        prior.psi0
        + scatter_xx
        - np.outer(sum_x, sum_x) / n
        + (prior.lambda0 * n / kappa_n) * np.outer(dev, dev)
    )
    return (prior.lambda0 * prior.mu0 + sum_x) / kappa_n, kappa_n, symmetrize(psi_n), prior.nu0 + n


def niw_posterior_update(prior, n, sum_x, scatter_xx):
    """Conjugate NIW update from the normal sufficient statistics.

    ``sum_x`` is the sum of observations and ``scatter_xx`` the sum of outer
    products (not centred).  ``n == 0`` returns the prior unchanged.
    """
    if n < 0:
        raise ValueError("count must be non-negative")
    if n == 0:
        return prior
    mu_n, kappa_n, psi_n, nu_n = niw_update_parts(prior, n, sum_x, scatter_xx)
    if np.linalg.eigvalsh(psi_n)[0] <= 0:
        raise NumericalError("updated NIW scale matrix is not positive definite")
    return NiwParams(mu_n, kappa_n, psi_n, nu_n)
