"""Calibration, coverage, utility and runtime experiments.

Calibration follows the Cook-style test: parameters and data are drawn from
the generative model each method assumes, and the quantile of the true
parameter under each method's posterior should then be uniform over trials.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ._linalg import NumericalError
from .baselines import IndConfig, run_mcmc_ind, run_naive, run_non_private
from .distributions import NiwParams, make_rng, niw_sample
from .gibbs import GibbsConfig, run_gibbs
from .model import Dataset, NigParams, nig_sample
from .moments import moments_from_prior_mc, niw_covariate_sampler
from .privacy import PrivacySpec, release_data_stats, release_fourth_moments

METHODS = (
    "non-private",
    "naive",
    "gibbs-ss-noisy",
    "gibbs-ss-prior",
    "gibbs-ss-update",
    "mcmc-ind",
)
NOISE_AWARE = ("gibbs-ss-noisy", "gibbs-ss-prior", "gibbs-ss-update", "mcmc-ind")

CALIBRATION_PRIOR = NigParams([0.0, 0.0], np.diag([0.5 / 19, 0.5 / 19]), 20, 0.5)
CALIBRATION_COVARIATE_PRIOR = NiwParams([0.0], 1.0, [[1.0]], 50)
PREDICTIVE_PRIOR = NigParams([1.0, 0.0], np.diag([0.25, 0.25]), 20, 0.5)


def check_methods(methods):
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; valid methods: {', '.join(METHODS)}")
    return tuple(methods)


# --- statistics -----------------------------------------------------------


def ks_statistic(u):
    """Two-sided Kolmogorov-Smirnov distance between the empirical CDF of ``u`` and U(0, 1)."""
    u = np.sort(np.asarray(u, dtype=float).ravel())
    m = u.shape[0]
    if m == 0:
        raise ValueError("KS statistic of an empty sample")
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("quantiles must lie in [0, 1]")
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - u), np.max(u - (i - 1) / m)))


def ks_critical_value(m, alpha):
    """Asymptotic Kolmogorov critical value ``c(alpha) / sqrt(m)``."""
    return math.sqrt(-0.5 * math.log(alpha / 2)) / math.sqrt(m)


def qq_data(u):
    """Sorted quantiles against the uniform plotting positions ``(i - 0.5) / M``."""
    u = np.sort(np.asarray(u, dtype=float))
    m = u.shape[0]
    return u, (np.arange(1, m + 1) - 0.5) / m


def mmd2(p_samples, q_samples, bandwidth=1.0, m=500, rng=None):
    """Unbiased squared MMD with the Gaussian kernel ``exp(-|a - b|^2 / (2 h^2))``.

    The estimator pairs ``p_i`` with ``q_i`` and averages
    ``k(p_i, p_j) + k(q_i, q_j) - k(p_i, q_j) - k(p_j, q_i)`` over ``i != j``.
    Sets larger than ``m`` are subsampled without replacement to a common size.
    """
    p = np.asarray(p_samples, dtype=float)
    q = np.asarray(q_samples, dtype=float)
    p = p[:, None] if p.ndim == 1 else p
    q = q[:, None] if q.ndim == 1 else q
    size = min(m, p.shape[0], q.shape[0])
    if size < 2:
        raise ValueError("MMD needs at least two samples per set")
    if p.shape[0] > size or q.shape[0] > size:
        rng = make_rng(0) if rng is None else rng
        if p.shape[0] > size:
            p = p[rng.choice(p.shape[0], size, replace=False)]
        if q.shape[0] > size:
            q = q[rng.choice(q.shape[0], size, replace=False)]
    g = -0.5 / bandwidth ** 2
    kpp = np.exp(g * cdist(p, p, "sqeuclidean"))
    kqq = np.exp(g * cdist(q, q, "sqeuclidean"))
    kpq = np.exp(g * cdist(p, q, "sqeuclidean"))
    off = np.sum(kpp) - np.trace(kpp) + np.sum(kqq) - np.trace(kqq)
    cross = 2.0 * (np.sum(kpq) - np.trace(kpq))
    return float((off - cross) / (size * (size - 1)))


def coverage(samples, truth, levels):
    """Equal-tailed credible-interval hits per level, one boolean per parameter.

    ``samples`` is :class:`~dpblr.model.PosteriorSamples` or a ``(draws, k)``
    array; ``truth`` a :class:`~dpblr.model.ParamDraw` or length-``k`` vector.
    """
    draws = samples.params() if hasattr(samples, "params") else np.asarray(samples, dtype=float)
    draws = draws[:, None] if draws.ndim == 1 else draws
    if draws.shape[0] < 100:
        raise ValueError(f"coverage needs at least 100 draws, got {draws.shape[0]}")
    if hasattr(truth, "theta"):
        truth = np.append(truth.theta, truth.sigma2)
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    hits = {}
    for level in levels:
        if not 0 <= level <= 1:
            raise ValueError(f"credible level {level} outside [0, 1]")
        lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2], axis=0)
        hits[level] = (lo <= truth) & (truth <= hi)
    return hits


def posterior_quantiles(samples, truth):
    """Fraction of posterior draws at or below the true value, per parameter."""
    truth = np.append(truth.theta, truth.sigma2)
    return np.mean(samples.params() <= truth, axis=0)


def measure_runtime(fn, repetitions=1):
    """Mean process time of ``fn()`` over ``repetitions`` calls."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    total = 0.0
    for _ in range(repetitions):
        start = time.process_time()
        fn()
        total += time.process_time() - start
    return total / repetitions


# --- calibration grid -------------------------------------------------------


@dataclass(frozen=True)
class ExperimentGrid:
    n_values: tuple = (10,)
    epsilons: tuple = (0.1,)
    trials: int = 100
    methods: tuple = METHODS
    prior: NigParams = CALIBRATION_PRIOR
    covariate_prior: NiwParams = CALIBRATION_COVARIATE_PRIOR
    bounds: tuple = (-1.0, 1.0)
    levels: tuple = (0.5, 0.9, 0.95)
    budget_split: float = 0.5
    # None picks 5000 burn-in below n = 1000 and 20000 from there on
    gibbs_burnin: int = None
    gibbs_samples: int = 20000
    ind_burnin: int = 500
    ind_samples: int = 2000
    baseline_samples: int = 2000
    prior_mc_draws: int = 10 ** 6
    mmd_size: int = 500

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("need at least one trial per cell")
        check_methods(self.methods)
        if self.covariate_prior.dim != self.prior.d - 1:
            raise ValueError("covariate prior must cover the d - 1 non-unit covariates")

    def burnin_for(self, n):
        if self.gibbs_burnin is not None:
            return self.gibbs_burnin
        return 20000 if n >= 1000 else 5000


@dataclass
class TrialOutcome:
    method: str
    n: int
    epsilon: float
    seed: int
    quantiles: np.ndarray = None
    hits: dict = field(default_factory=dict)
    runtime: float = float("nan")
    mmd2: np.ndarray = None
    error: str = None

    @property
    def failed(self):
        return self.error is not None


def _trial_seeds(seed, n, epsilon, trials):
    key = [int(seed), int(n), int(round(epsilon * 1e6))]
    return [int(s) for s in np.random.SeedSequence(key).generate_state(trials, np.uint64)]


def prior_moments(grid, seed):
    """Covariate moments of the grid's NIW-normal data prior by Monte Carlo."""
    sampler = niw_covariate_sampler(grid.covariate_prior)
    return moments_from_prior_mc(sampler, grid.prior_mc_draws, make_rng(seed))


def _simulate(grid, n, rng):
    truth = nig_sample(grid.prior, rng)
    mu_x, tau2 = niw_sample(grid.covariate_prior, rng)
    x = rng.multivariate_normal(mu_x, tau2, size=n, method="cholesky")
    covariates = np.column_stack([np.ones(n), x])
    y = covariates @ truth.theta + math.sqrt(truth.sigma2) * rng.standard_normal(n)
    return truth, Dataset(covariates, y, grid.bounds, grid.bounds)


def run_trial(grid, n, epsilon, seed, methods=None, moments=None):
    """One calibration trial of every requested method on a fresh synthetic data set."""
    methods = grid.methods if methods is None else check_methods(methods)
    gen_rng, release_rng, *method_rngs = make_rng(seed).spawn(2 + len(METHODS))
    truth, data = _simulate(grid, n, gen_rng)

    full = PrivacySpec(epsilon, grid.bounds, grid.bounds)
    z = release_data_stats(data, full, release_rng)
    if "gibbs-ss-noisy" in methods:
        split = PrivacySpec(epsilon, grid.bounds, grid.bounds, grid.budget_split)
        z_split = release_data_stats(data, split, release_rng)
        noisy_moments = release_fourth_moments(data, split, release_rng)
    if "gibbs-ss-prior" in methods and moments is None:
        moments = prior_moments(grid, seed)

    def gibbs(variant, release, source, rng):
        config = GibbsConfig(variant, grid.burnin_for(n), grid.gibbs_samples, seed=seed)
        return run_gibbs(release, grid.prior, source, config, rng)

    runners = {
        "non-private": lambda rng: run_non_private(data, grid.prior, grid.baseline_samples, rng),
        "naive": lambda rng: run_naive(z, grid.prior, grid.baseline_samples, rng),
        "gibbs-ss-noisy": lambda rng: gibbs("noisy", z_split, noisy_moments, rng),
        "gibbs-ss-prior": lambda rng: gibbs("prior", z, moments, rng),
        "gibbs-ss-update": lambda rng: gibbs("update", z, grid.covariate_prior, rng),
        "mcmc-ind": lambda rng: run_mcmc_ind(
            z, grid.prior, grid.covariate_prior, n,
            IndConfig(grid.ind_burnin, grid.ind_samples, seed=seed), rng,
        ),
    }
    samples = {}
    outcomes = []
    for name in methods:
        outcome = TrialOutcome(name, n, epsilon, seed)
        try:
            post = runners[name](method_rngs[METHODS.index(name)])
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
            outcomes.append(outcome)
            continue
        samples[name] = post
        outcome.quantiles = posterior_quantiles(post, truth)
        outcome.hits = coverage(post, truth, grid.levels)
        outcome.runtime = post.meta["runtime"]
        outcomes.append(outcome)

    reference = samples.get("non-private")
    if reference is not None:
        mmd_rng = make_rng(seed)
        ref = reference.params()
        for outcome in outcomes:
            if outcome.failed:
                continue
            draws = samples[outcome.method].params()
            per_param = [
                mmd2(draws[:, j], ref[:, j], m=grid.mmd_size, rng=mmd_rng)
                for j in range(draws.shape[1])
            ]
            joint = mmd2(draws, ref, m=grid.mmd_size, rng=mmd_rng)
            outcome.mmd2 = np.array(per_param + [joint])
    return outcomes


def run_calibration_cell(grid, n, epsilon, seed, methods=None, workers=1):
    """All trials of one ``(n, epsilon)`` cell, grouped by method.

    Trials are independent and may run on a process pool; each one derives
    its own seed from ``(seed, n, epsilon)`` so the result does not depend on
    scheduling.
    """
    methods = grid.methods if methods is None else check_methods(methods)
    seeds = _trial_seeds(seed, n, epsilon, grid.trials)
    moments = prior_moments(grid, seed) if "gibbs-ss-prior" in methods else None
    args = [(grid, n, epsilon, s, methods, moments) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            trials = list(pool.map(_run_trial_args, args))
    else:
        trials = [run_trial(*a) for a in args]
    by_method = {m: [] for m in methods}
    for outcomes in trials:
        for outcome in outcomes:
            by_method[outcome.method].append(outcome)
    return by_method


def _run_trial_args(args):
    return run_trial(*args)


@dataclass
class CellSummary:
    method: str
    n: int
    epsilon: float
    param_names: list
    ks: np.ndarray                # per parameter, then pooled
    coverage: dict                # level -> per parameter, then pooled
    mmd2: np.ndarray              # per-parameter marginals, then joint
    runtime: float
    trials: int
    failures: int
    quantiles: np.ndarray         # (trials, parameters) of the successful trials


def summarize(outcomes, param_names):
    """Aggregate one method's trials: KS per parameter and pooled, coverage, MMD, runtime."""
    ok = [o for o in outcomes if not o.failed]
    first = outcomes[0]
    k = len(param_names)
    if not ok:
        nan = np.full(k + 1, np.nan)
        return CellSummary(first.method, first.n, first.epsilon, param_names, nan, {}, nan,
                           float("nan"), len(outcomes), len(outcomes), np.empty((0, k)))
    u = np.array([o.quantiles for o in ok])
    ks = np.array([ks_statistic(u[:, j]) for j in range(k)] + [ks_statistic(u.ravel())])
    cov = {}
    for level in ok[0].hits:
        h = np.array([o.hits[level] for o in ok], dtype=float)
        cov[level] = np.append(h.mean(axis=0), h.mean())
    mmds = [o.mmd2 for o in ok if o.mmd2 is not None]
    mmd = np.mean(mmds, axis=0) if mmds else np.full(k + 1, np.nan)
    runtime = float(np.mean([o.runtime for o in ok]))
    return CellSummary(first.method, first.n, first.epsilon, param_names, ks, cov, mmd,
                       runtime, len(outcomes), len(outcomes) - len(ok), u)


def bootstrap_se(values, reps=1000, rng=None):
    """Bootstrap standard error of the mean of ``values``."""
    values = np.asarray(values, dtype=float)
    rng = make_rng(0) if rng is None else rng
    idx = rng.integers(0, values.shape[0], size=(reps, values.shape[0]))
    return float(np.std(values[idx].mean(axis=1), ddof=1))


def metric_rows(summary):
    """Tidy ``(method, n, epsilon, parameter, metric, value)`` rows for one summary.

    The parameter list ends with ``pooled``: pooled KS over all quantiles,
    coverage averaged over parameters, and the joint MMD.
    """
    params = list(summary.param_names) + ["pooled"]
    metrics = [("ks", summary.ks)]
    metrics += [(f"coverage_{level:g}", v) for level, v in sorted(summary.coverage.items())]
    metrics += [("mmd2", summary.mmd2), ("runtime", np.full(len(params), summary.runtime))]
    metrics += [("failures", np.full(len(params), summary.failures))]
    rows = []
    for metric, values in metrics:
        for p, v in zip(params, values):
            rows.append((summary.method, summary.n, summary.epsilon, p, metric, float(v)))
    return rows


def run_calibration_grid(grid, seed, workers=1):
    """Every cell of the grid; returns a list of :class:`CellSummary`."""
    names = [f"theta_{j}" for j in range(grid.prior.d)] + ["sigma2"]
    out = []
    for n in grid.n_values:
        for eps in grid.epsilons:
            cell = run_calibration_cell(grid, n, eps, seed, workers=workers)
            out.extend(summarize(cell[m], names) for m in grid.methods)
    return out


# --- real-data predictive experiment ----------------------------------------

PREDICTIVE_METHODS = ("non-private", "naive", "gibbs-ss-noisy")


def predictive_hits(samples, x_test, y_test, levels, rng):
    """Posterior-predictive interval hits, ``(tests, levels)``.

    One predictive draw ``y ~ N(theta_k^T x, sigma2_k)`` per posterior draw.
    """
    mean = samples.theta @ x_test.T                      # draws x tests
    pred = mean + np.sqrt(samples.sigma2)[:, None] * rng.standard_normal(mean.shape)
    hits = np.empty((x_test.shape[0], len(levels)), dtype=bool)
    for k, level in enumerate(levels):
        lo, hi = np.quantile(pred, [(1 - level) / 2, (1 + level) / 2], axis=0)
        hits[:, k] = (lo <= y_test) & (y_test <= hi)
    return hits


def run_predictive_experiment(
    data,
    splits=100,
    methods=PREDICTIVE_METHODS,
    rng=None,
    prior=PREDICTIVE_PRIOR,
    epsilon=0.1,
    train_size=36,
    levels=(0.5, 0.9),
    budget_split=0.5,
    gibbs_burnin=5000,
    gibbs_samples=20000,
    baseline_samples=2000,
):
    """Predictive coverage over random train/test splits.

    Returns ``{method: {level: coverage}}`` plus per-method failure counts under
    the key ``"failures"``.
    """
    unknown = [m for m in methods if m not in PREDICTIVE_METHODS]
    if unknown:
        raise ValueError(f"predictive experiment supports {PREDICTIVE_METHODS}, got {unknown}")
    if not 0 < train_size < data.n:
        raise ValueError("train_size must leave at least one test point")
    rng = make_rng(0) if rng is None else rng
    full = PrivacySpec(epsilon, data.x_bounds, data.y_bounds)
    split = PrivacySpec(epsilon, data.x_bounds, data.y_bounds, budget_split)
    hits = {m: [] for m in methods}
    failures = {m: 0 for m in methods}
    for split_rng in rng.spawn(splits):
        order = split_rng.permutation(data.n)
        tr, te = order[:train_size], order[train_size:]
        train = Dataset(data.covariates[tr], data.responses[tr], data.x_bounds, data.y_bounds,
                        data.bias)
        x_test, y_test = data.covariates[te], data.responses[te]
        r_release, r_method, r_pred = split_rng.spawn(3)
        z = release_data_stats(train, full, r_release)
        if "gibbs-ss-noisy" in methods:
            z_split = release_data_stats(train, split, r_release)
            moments = release_fourth_moments(train, split, r_release)
        for name in methods:
            try:
                if name == "non-private":
                    post = run_non_private(train, prior, baseline_samples, r_method)
                elif name == "naive":
                    post = run_naive(z, prior, baseline_samples, r_method)
                else:
                    config = GibbsConfig("noisy", gibbs_burnin, gibbs_samples)
                    post = run_gibbs(z_split, prior, moments, config, r_method)
            except (NumericalError, np.linalg.LinAlgError, ValueError):
                failures[name] += 1
                continue
            hits[name].append(predictive_hits(post, x_test, y_test, levels, r_pred))
    result = {}
    for name in methods:
        h = np.concatenate(hits[name]) if hits[name] else np.empty((0, len(levels)))
        result[name] = {lv: float(h[:, k].mean()) if h.size else float("nan")
                        for k, lv in enumerate(levels)}
    result["failures"] = failures
    return result
