"""Linear-regression model types, sufficient statistics and the conjugate NIG update.

The sufficient statistic of a data set is ``s = [uniq(X^T X), X^T y, y^T y]``
where ``uniq`` lists the upper triangle of the symmetric ``X^T X`` in
row-major order, i.e. the pairs ``(i, j)`` with ``i <= j``.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import NumericalError, chol_solve, cholesky, symmetrize


@lru_cache(maxsize=None)
def pair_indices(d):
    """Row-major upper-triangle index arrays ``(rows, cols)`` for a ``d x d`` matrix."""
    rows, cols = np.triu_indices(d)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def n_stats(d):
    """Length of the flattened statistics vector, ``d(d+1)/2 + d + 1``."""
    return d * (d + 1) // 2 + d + 1


def dim_from_n_stats(size):
    """Invert :func:`n_stats`."""
    d = int(round((-3 + np.sqrt(1 + 8 * size)) / 2))
    if d < 1 or n_stats(d) != size:
        raise ValueError(f"{size} is not a valid statistics length")
    return d


def unpack_xtx(xtx_uniq, d):
    rows, cols = pair_indices(d)
    xtx = np.empty((d, d))
    xtx[rows, cols] = xtx_uniq
    xtx[cols, rows] = xtx_uniq
    return xtx


def split_vector(vec, d):
    """Split a flat statistics vector into ``(X^T X, X^T y, y^T y)``."""
    m = d * (d + 1) // 2
    return unpack_xtx(vec[:m], d), vec[m:m + d], vec[m + d]


def stats_to_gram(vec, d):
    """The ``(d+1) x (d+1)`` matrix ``B = [X, y]^T [X, y]`` implied by ``vec``."""
    xtx, xty, yty = split_vector(vec, d)
    gram = np.empty((d + 1, d + 1))
    gram[:d, :d] = xtx
    gram[:d, d] = xty
    gram[d, :d] = xty
    gram[d, d] = yty
    return gram


def gram_to_stats(gram):
    d = gram.shape[0] - 1
    rows, cols = pair_indices(d)
    return np.concatenate([gram[rows, cols], gram[:d, d], gram[d, d:]])


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (``n x d``), responses ``y`` and their a-priori bounds.

    ``bias`` records whether column 0 is the constant unit feature.
    """

    covariates: np.ndarray
    responses: np.ndarray
    x_bounds: tuple = (-1.0, 1.0)
    y_bounds: tuple = (-1.0, 1.0)
    bias: bool = True

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        y = np.atleast_1d(np.asarray(self.responses, dtype=float))
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "responses", y)
        if x.ndim != 2 or y.ndim != 1:
            raise ValueError("covariates must be 2-d and responses 1-d")
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"covariates have {x.shape[0]} rows but responses have {y.shape[0]}"
            )
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("a data set needs at least one row and one column")
        if self.bias and not np.all(x[:, 0] == 1.0):
            raise ValueError("bias is enabled but column 0 is not identically 1")

    @classmethod
    def from_raw(cls, x, y, bias=True, **kwargs):
        """Build a data set from covariates without the unit column, prepending it if ``bias``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if bias:
            x = np.column_stack([np.ones(x.shape[0]), x])
        return cls(x, y, bias=bias, **kwargs)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def d(self):
        return self.covariates.shape[1]

    @property
    def x_width(self):
        return self.x_bounds[1] - self.x_bounds[0]

    @property
    def y_width(self):
        return self.y_bounds[1] - self.y_bounds[0]


@dataclass(frozen=True)
class SuffStats:
    xtx_uniq: np.ndarray
    xty: np.ndarray
    yty: float
    n: int

    @property
    def d(self):
        return self.xty.shape[0]

    @property
    def vector(self):
        return np.concatenate([self.xtx_uniq, self.xty, [self.yty]])

    @classmethod
    def from_vector(cls, vec, n, d=None):
        vec = np.asarray(vec, dtype=float)
        d = dim_from_n_stats(vec.shape[0]) if d is None else d
        m = d * (d + 1) // 2
        return cls(vec[:m].copy(), vec[m:m + d].copy(), float(vec[m + d]), n)

    @classmethod
    def zeros(cls, d):
        return cls.from_vector(np.zeros(n_stats(d)), 0, d)

    @property
    def xtx(self):
        return unpack_xtx(self.xtx_uniq, self.d)

    def gram(self):
        return stats_to_gram(self.vector, self.d)

    def __add__(self, other):
        return SuffStats.from_vector(self.vector + other.vector, self.n + other.n, self.d)


def compute_suff_stats(data):
    """Exact sufficient statistics of a :class:`Dataset`."""
    x, y = data.covariates, data.responses
    rows, cols = pair_indices(data.d)
    xtx = x.T @ x
    return SuffStats(xtx[rows, cols], x.T @ y, float(y @ y), data.n)


@dataclass(frozen=True)
class NigParams:
    """Normal-inverse-gamma parameters: ``sigma2 ~ IG(a, b)``, ``theta | sigma2 ~ N(mu, sigma2 lambda^-1)``."""

    mu: np.ndarray
    lam: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if lam.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError(f"lambda must be {mu.shape[0]}x{mu.shape[0]}")
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"a and b must be positive, got a={self.a}, b={self.b}")

    @property
    def d(self):
        return self.mu.shape[0]


@dataclass(frozen=True)
class ParamDraw:
    theta: np.ndarray
    sigma2: float


class NonPositiveScale(NumericalError):
    """The conjugate update produced ``b_n <= 0``; ``b_n`` holds the raw value."""

    def __init__(self, b_n):
        super().__init__(f"posterior scale b_n = {b_n} is not positive")
        self.b_n = b_n


def nig_update_arrays(mu0, lam0, a0, b0, xtx, xty, yty, n):
    """Conjugate NIG update on raw arrays; returns ``(mu_n, lam_n, chol(lam_n), a_n, b_n)``.

    ``b_n`` is returned as computed and may be non-positive for statistics
    that no real data set could have produced.
    """
    lam_n = xtx + lam0
    lower = cholesky(lam_n, "posterior precision Lambda_n")
    lam_mu0 = lam0 @ mu0
    mu_n = chol_solve(lower, xty + lam_mu0)
    a_n = a0 + 0.5 * n
    b_n = b0 + 0.5 * (yty + mu0 @ lam_mu0 - mu_n @ (lam_n @ mu_n))
    return mu_n, lam_n, lower, a_n, b_n


def nig_posterior_update(prior, stats):
    """Posterior NIG parameters after observing ``stats``.

    Raises :class:`NonPositiveScale` when ``b_n <= 0`` and
    :class:`~dpblr._linalg.NumericalError` when ``Lambda_n`` is not positive definite.
    """
    mu_n, lam_n, _, a_n, b_n = nig_update_arrays(
        prior.mu, prior.lam, prior.a, prior.b, stats.xtx, stats.xty, stats.yty, stats.n
    )
    if not b_n > 0:
        raise NonPositiveScale(b_n)
    return NigParams(mu_n, symmetrize(lam_n), a_n, b_n)


def nig_draw_arrays(mu, lam_chol, a, b, rng):
    sigma2 = b / rng.gamma(a)
    z = rng.standard_normal(mu.shape[0])
    theta = mu + np.sqrt(sigma2) * solve_triangular(
        lam_chol.T, z, lower=False, check_finite=False
    )
    return theta, sigma2


def nig_sample(params, rng):
    """One ``(theta, sigma2)`` draw from ``NIG(mu, lambda, a, b)``."""
    theta, sigma2 = nig_draw_arrays(
        params.mu, cholesky(params.lam, "Lambda"), params.a, params.b, rng
    )
    return ParamDraw(theta, sigma2)


def nig_sample_many(params, count, rng):
    """``count`` i.i.d. NIG draws as ``(theta[count, d], sigma2[count])``."""
    lower = cholesky(params.lam, "Lambda")
    sigma2 = params.b / rng.gamma(params.a, size=count)
    z = rng.standard_normal((count, params.d))
    white = solve_triangular(lower.T, z.T, lower=False, check_finite=False).T
    return params.mu + np.sqrt(sigma2)[:, None] * white, sigma2


@dataclass
class PosteriorSamples:
    """Ordered posterior draws with provenance metadata."""

    theta: np.ndarray
    sigma2: np.ndarray
    meta: dict = field(default_factory=dict)
    latent_stats: np.ndarray = None

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        if self.theta.shape[0] != self.sigma2.shape[0]:
            raise ValueError("theta and sigma2 must have the same number of draws")

    def __len__(self):
        return self.sigma2.shape[0]

    @property
    def d(self):
        return self.theta.shape[1]

    def params(self):
        """Draws as one ``(count, d + 1)`` array with ``sigma2`` as the last column."""
        return np.column_stack([self.theta, self.sigma2])

    def param_names(self):
        return [f"theta_{j}" for j in range(self.d)] + ["sigma2"]
