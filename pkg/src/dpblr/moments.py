"""Covariate moments and the normal approximation to the sufficient statistics.

For one individual ``t(x, y) = [uniq(x x^T), x y, y^2]``.  Given regression
parameters and the second and fourth non-central moments of ``x``, this module
assembles ``mu_t = E[t]`` and ``Sigma_t = Cov[t]`` in the unique-entry layout,
so that ``s ~ N(n mu_t, n Sigma_t)`` is directly comparable with the released
statistics.  Fourth-moment vectors are stored over index multisets
``i <= j <= k <= l`` in lexicographic order.
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement, product

import numpy as np

from ._linalg import floor_eigenvalues, symmetrize
from .model import pair_indices

MOMENT_PSD_FLOOR = 1e-8


@lru_cache(maxsize=None)
def quad_indices(d):
    """``(D, 4)`` array of index multisets ``i <= j <= k <= l``."""
    idx = np.array(list(combinations_with_replacement(range(d), 4)), dtype=int)
    idx.flags.writeable = False
    return idx


@lru_cache(maxsize=None)
def quad_lookup(d):
    """``d x d x d x d`` array mapping any index tuple to its multiset position."""
    pos = {tuple(q): k for k, q in enumerate(quad_indices(d).tolist())}
    table = np.empty((d,) * 4, dtype=int)
    for ijkl in product(range(d), repeat=4):
        table[ijkl] = pos[tuple(sorted(ijkl))]
    table.flags.writeable = False
    return table


def fourth_moment_sums(x):
    """Sums over rows of every degree-4 monomial of the columns of ``x``."""
    x = np.asarray(x, dtype=float)
    q = quad_indices(x.shape[1])
    return np.array([np.sum(x[:, i] * x[:, j] * x[:, k] * x[:, l]) for i, j, k, l in q])


@dataclass(frozen=True)
class CovariateMoments:
    """Second moments ``eta2[i, j] = E[x_i x_j]`` and unique fourth moments ``eta4``."""

    eta2: np.ndarray
    eta4: np.ndarray
    bias: bool = True

    def __post_init__(self):
        eta2 = np.atleast_2d(np.asarray(self.eta2, dtype=float))
        eta4 = np.asarray(self.eta4, dtype=float)
        object.__setattr__(self, "eta2", eta2)
        object.__setattr__(self, "eta4", eta4)
        d = eta2.shape[0]
        if eta2.shape != (d, d):
            raise ValueError("eta2 must be square")
        if eta4.shape != (len(quad_indices(d)),):
            raise ValueError(f"eta4 must have {len(quad_indices(d))} entries for d={d}")

    @property
    def d(self):
        return self.eta2.shape[0]

    def eta4_tensor(self):
        return self.eta4[quad_lookup(self.d)]

    def xi_tensor(self):
        """``xi[i, j, k, l] = Cov(x_i x_j, x_k x_l) = eta_ijkl - eta_ij eta_kl``."""
        return self.eta4_tensor() - np.einsum("ij,kl->ijkl", self.eta2, self.eta2)

    def xi_matrix(self, floor=False):
        """``xi`` restricted to unique index pairs, optionally eigenvalue-floored."""
        rows, cols = pair_indices(self.d)
        mat = self.xi_tensor()[rows, cols][:, rows, cols]
        return floor_eigenvalues(mat) if floor else mat


@dataclass(frozen=True)
class CltParams:
    mu_t: np.ndarray
    sigma_t: np.ndarray


def clt_arrays(theta, sigma2, eta2, eta4_full, xi_pairs, rows, cols):
    """Unfloored ``(mu_t, Sigma_t)`` from raw arrays.

    ``eta4_full`` is the full ``d^4`` fourth-moment tensor and ``xi_pairs`` the
    covariance of the ``x x^T`` block over unique pairs; both stay fixed while
    the parameters change, so callers in a sampler loop precompute them.
    """
    g = eta2 @ theta                      # E[x_i y]
    q = theta @ g                         # sum theta_i theta_j eta_ij
    e4t = eta4_full @ theta               # [i, j, k]
    e4tt = e4t @ theta                    # [i, j]
    e4ttt = e4tt @ theta                  # [i]
    e4tttt = theta @ e4ttt
    e2p = eta2[rows, cols]

    m = rows.shape[0]
    d = theta.shape[0]
    size = m + d + 1
    cov = np.empty((size, size))
    xy = slice(m, m + d)
    yy = m + d

    cov[:m, :m] = xi_pairs
    c_xx_xy = e4t[rows, cols, :] - np.outer(e2p, g)
    cov[:m, xy] = c_xx_xy
    cov[xy, :m] = c_xx_xy.T
    c_xx_yy = e4tt[rows, cols] - e2p * q
    cov[:m, yy] = c_xx_yy
    cov[yy, :m] = c_xx_yy
    cov[xy, xy] = sigma2 * eta2 + e4tt - np.outer(g, g)
    c_xy_yy = e4ttt - g * q + 2.0 * sigma2 * g
    cov[xy, yy] = c_xy_yy
    cov[yy, xy] = c_xy_yy
    cov[yy, yy] = 2.0 * sigma2 * sigma2 + e4tttt - q * q + 4.0 * sigma2 * q

    mu = np.concatenate([e2p, g, [sigma2 + q]])
    return mu, cov


def assemble_clt_params(draw, mom):
    """Mean and covariance of ``t(x, y)`` for one individual.

    The covariance is symmetrized and eigenvalue-floored at ``1e-10 * trace``.
    """
    theta = np.asarray(draw.theta, dtype=float)
    if theta.shape != (mom.d,):
        raise ValueError(f"theta has shape {theta.shape} but moments are {mom.d}-dimensional")
    rows, cols = pair_indices(mom.d)
    mu, cov = clt_arrays(
        theta, float(draw.sigma2), mom.eta2, mom.eta4_tensor(), mom.xi_matrix(), rows, cols
    )
    return CltParams(mu, floor_eigenvalues(cov))


def enforce_bias_consistency(eta2, eta4):
    """Repair moments of a vector whose coordinate 0 is the constant 1.

    Sets ``eta_00 = 1``, projects the implied covariance ``eta2[1:, 1:] - m m^T``
    (``m`` the mean row) onto the PSD cone with eigenvalue floor ``1e-8`` and
    overwrites every fourth moment with at least two bias indices by the
    matching second moment.  Returns new arrays.
    """
    d = eta2.shape[0]
    eta2 = symmetrize(np.array(eta2, dtype=float))
    eta4 = np.array(eta4, dtype=float)
    eta2[0, 0] = 1.0
    if d > 1:
        mean = eta2[0, 1:].copy()
        cov = eta2[1:, 1:] - np.outer(mean, mean)
        w, v = np.linalg.eigh(cov)
        if w[0] < MOMENT_PSD_FLOOR:
            cov = symmetrize((v * np.maximum(w, MOMENT_PSD_FLOOR)) @ v.T)
        eta2[1:, 1:] = cov + np.outer(mean, mean)
    for k, (i, j, a, b) in enumerate(quad_indices(d).tolist()):
        if i == 0 and j == 0:
            eta4[k] = eta2[a, b]
    return eta2, eta4


def moments_from_samples(data):
    """Sample moments of the covariates of a :class:`~dpblr.model.Dataset`."""
    x = data.covariates
    return CovariateMoments(x.T @ x / data.n, fourth_moment_sums(x) / data.n, data.bias)


def monomial_range(d, x_bounds):
    """Range of every degree-4 monomial over the covariate box, bias coordinate fixed at 1.

    Any average of the monomial over records inside the box lies in this range.
    """
    a, b = map(float, x_bounds)
    lo = np.empty(len(quad_indices(d)))
    hi = np.empty_like(lo)
    for k, q in enumerate(quad_indices(d).tolist()):
        low = high = 1.0
        for j in set(q) - {0}:
            m = q.count(j)
            ends = (a ** m, b ** m)
            part = (0.0 if m % 2 == 0 and a <= 0 <= b else min(ends), max(ends))
            cands = [low * part[0], low * part[1], high * part[0], high * part[1]]
            low, high = min(cands), max(cands)
        lo[k], hi[k] = low, high
    return lo, hi


def moments_from_noisy_release(noisy_fourth_sums, n, bias=True, x_bounds=None):
    """Point-estimate moments from released fourth-moment sums.

    With ``x_bounds`` the averages are first clipped into the range each
    monomial can take over the covariate box.  With the unit feature in
    coordinate 0 the second moments are the slice ``eta_00ij``.  The estimate
    is then repaired by :func:`enforce_bias_consistency`.
    """
    if not bias:
        raise ValueError("moments can only be recovered from the fourth-moment release "
                         "when the unit feature is present")
    sums = np.asarray(noisy_fourth_sums, dtype=float)
    d = _dim_from_quads(sums.shape[0])
    eta4 = sums / n
    if x_bounds is not None:
        eta4 = np.clip(eta4, *monomial_range(d, x_bounds))
    eta2 = eta4[quad_lookup(d)[0, 0]]
    eta2, eta4 = enforce_bias_consistency(eta2, eta4)
    return CovariateMoments(eta2, eta4, True)


def _dim_from_quads(size):
    d = 1
    while len(quad_indices(d)) < size:
        d += 1
    if len(quad_indices(d)) != size:
        raise ValueError(f"{size} is not a valid number of fourth-moment entries")
    return d


def mvn_fourth_moments(mean, cov, bias=False):
    """Exact moments of ``x ~ N(mean, cov)`` via the non-central Isserlis expansion.

    With ``bias`` a constant coordinate 1 is prepended (a zero-variance normal).
    """
    m = np.atleast_1d(np.asarray(mean, dtype=float))
    c = np.atleast_2d(np.asarray(cov, dtype=float))
    if bias:
        m = np.concatenate([[1.0], m])
        padded = np.zeros((m.shape[0], m.shape[0]))
        padded[1:, 1:] = c
        c = padded
    q = quad_indices(m.shape[0])
    i, j, k, l = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    eta4 = (
        c[i, j] * c[k, l] + c[i, k] * c[j, l] + c[i, l] * c[j, k]
        + m[i] * m[j] * c[k, l] + m[i] * m[k] * c[j, l] + m[i] * m[l] * c[j, k]
        + m[j] * m[k] * c[i, l] + m[j] * m[l] * c[i, k] + m[k] * m[l] * c[i, j]
        + m[i] * m[j] * m[k] * m[l]
    )
    return CovariateMoments(c + np.outer(m, m), eta4, bias)


def moments_from_prior_mc(prior_sampler, count, rng, bias=True):
    """Monte Carlo moments over ``count`` draws of ``prior_sampler(rng, count)``.

    The sampler returns covariate rows including the unit column when ``bias``.
    """
    if count < 2:
        raise ValueError("need at least two prior draws")
    x = np.asarray(prior_sampler(rng, count), dtype=float)
    eta2 = x.T @ x / count
    eta4 = fourth_moment_sums(x) / count
    if bias:
        eta2, eta4 = enforce_bias_consistency(eta2, eta4)
    return CovariateMoments(eta2, eta4, bias)


def niw_covariate_sampler(niw, bias=True):
    """Sampler of covariate rows under ``(mu, cov) ~ NIW`` and ``x ~ N(mu, cov)``.

    Each row gets its own ``(mu, cov)`` draw, so the rows follow the marginal
    prior of a single individual.
    """
    p = niw.dim
    psi_chol = np.linalg.cholesky(niw.psi0)

    def sample(rng, count):
        a = np.zeros((count, p, p))
        diag = np.arange(p)
        a[:, diag, diag] = np.sqrt(rng.chisquare(niw.nu0 - diag, size=(count, p)))
        tril = np.tril_indices(p, -1)
        a[:, tril[0], tril[1]] = rng.standard_normal((count, len(tril[0])))
        b = np.linalg.solve(a, np.broadcast_to(psi_chol.T, (count, p, p)))
        cov = np.swapaxes(b, 1, 2) @ b
        lower = np.linalg.cholesky(cov)
        mu = niw.mu0 + (lower @ rng.standard_normal((count, p, 1)))[..., 0] / np.sqrt(niw.lambda0)
        x = mu + (lower @ rng.standard_normal((count, p, 1)))[..., 0]
        if bias:
            x = np.column_stack([np.ones(count), x])
        return x

    return sample
