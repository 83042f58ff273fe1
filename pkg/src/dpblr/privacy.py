"""Sensitivity analysis and Laplace-mechanism release of regression statistics.

Everything a release reads from the private data set goes through
:func:`_read_private`, which reports each access to the hooks registered with
:func:`audit_access`.  Tests use this to check that a release touches the
data exactly once and only through a bounded-sensitivity summary.
"""

import contextlib
from dataclasses import dataclass
from math import comb

import numpy as np

from .distributions import laplace_sample
from .model import compute_suff_stats, dim_from_n_stats
from .moments import fourth_moment_sums

_ACCESS_HOOKS = []


@contextlib.contextmanager
def audit_access():
    """Collect the names of private-data summaries computed inside the block."""
    log = []
    _ACCESS_HOOKS.append(log.append)
    try:
        yield log
    finally:
        _ACCESS_HOOKS.remove(log.append)


def _read_private(name, summary, data):
    for hook in _ACCESS_HOOKS:
        hook(name)
    return summary(data)


@dataclass(frozen=True)
class PrivacySpec:
    """Total budget ``epsilon``, a-priori data bounds and the statistics/moments budget split."""

    epsilon: float
    x_bounds: tuple = (-1.0, 1.0)
    y_bounds: tuple = (-1.0, 1.0)
    budget_split: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.x_width > 0 or not self.y_width > 0:
            raise ValueError("bounds must satisfy lower < upper")
        if not 0 < self.budget_split <= 1:
            raise ValueError("budget_split must lie in (0, 1]")

    @property
    def x_width(self):
        return self.x_bounds[1] - self.x_bounds[0]

    @property
    def y_width(self):
        return self.y_bounds[1] - self.y_bounds[0]

    @property
    def epsilon_stats(self):
        return self.epsilon * self.budget_split

    @property
    def epsilon_moments(self):
        # exact complement, so the two parts always add back up to epsilon
        return self.epsilon - self.epsilon_stats


@dataclass(frozen=True)
class NoisyStats:
    """Released statistics ``z`` (same layout as the flattened :class:`SuffStats`)."""

    z: np.ndarray
    scale: float
    n: int
    epsilon: float
    sensitivity: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if not self.scale > 0:
            raise ValueError("noise scale must be positive")

    @property
    def d(self):
        return dim_from_n_stats(self.z.shape[0])


@dataclass(frozen=True)
class NoisyMoments:
    """Released fourth-moment sums in canonical multiset order."""

    sums: np.ndarray
    scale: float
    n: int
    d: int
    epsilon: float
    sensitivity: float
    x_bounds: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "sums", np.asarray(self.sums, dtype=float))
        if self.x_bounds is not None:
            object.__setattr__(self, "x_bounds", tuple(float(v) for v in self.x_bounds))


def suff_stat_sensitivity(d, spec):
    """L1 sensitivity of the unique-entry statistics, ``wx^2 d(d+1)/2 + wx wy d + wy^2``."""
    if d < 1:
        raise ValueError("d must be at least 1")
    wx, wy = spec.x_width, spec.y_width
    return wx * wx * d * (d + 1) / 2 + wx * wy * d + wy * wy


def n_fourth_moments(d):
    """Number of unique entries of a symmetric order-4 tensor in ``d`` dimensions."""
    return comb(d + 3, 4)


def fourth_moment_sensitivity(d, spec):
    if d < 1:
        raise ValueError("d must be at least 1")
    return n_fourth_moments(d) * spec.x_width ** 4


def release_suff_stats(stats, spec, rng):
    """Add Laplace noise with scale ``sensitivity / epsilon_stats`` to each unique statistic."""
    sens = suff_stat_sensitivity(stats.d, spec)
    scale = sens / spec.epsilon_stats
    return NoisyStats(
        laplace_sample(stats.vector, scale, rng), scale, stats.n, spec.epsilon_stats, sens
    )


def release_data_stats(data, spec, rng):
    """Compute the sufficient statistics of ``data`` and release them."""
    stats = _read_private("suff_stats", compute_suff_stats, data)
    return release_suff_stats(stats, spec, rng)


def release_fourth_moments(data, spec, rng):
    """Release noisy sums of every degree-4 covariate monomial.

    The sums (not averages) are perturbed, so the Laplace model is exact on the
    published numbers; dividing by the public ``n`` is post-processing.
    """
    eps_m = spec.epsilon_moments
    if not eps_m > 0:
        raise ValueError("no budget left for the moment release; set budget_split < 1")
    sums = _read_private("fourth_moment_sums", lambda ds: fourth_moment_sums(ds.covariates), data)
    sens = fourth_moment_sensitivity(data.d, spec)
    scale = sens / eps_m
    return NoisyMoments(laplace_sample(sums, scale, rng), scale, data.n, data.d, eps_m, sens,
                        spec.x_bounds)
