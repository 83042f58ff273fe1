"""Command-line interface: ``release``, ``infer``, ``evaluate`` and ``fetch-data``.

Every subcommand accepts ``--config FILE`` (TOML or JSON).  Keys in the file
use the long option names with dashes replaced by underscores and act as
defaults that explicit flags override.  ``DPBLR_SEED`` sets the default seed.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import urllib.request
from pathlib import Path

from . import io
from .baselines import IndConfig, run_mcmc_ind, run_naive, run_non_private
from .distributions import make_rng
from .evaluation import (
    CALIBRATION_COVARIATE_PRIOR,
    CALIBRATION_PRIOR,
    METHODS,
    PREDICTIVE_METHODS,
    PREDICTIVE_PRIOR,
    ExperimentGrid,
    metric_rows,
    qq_data,
    run_calibration_grid,
    run_predictive_experiment,
)
from .gibbs import GibbsConfig, run_gibbs
from .model import n_stats
from .privacy import PrivacySpec, release_data_stats, release_fourth_moments

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("dpblr")

SEED_ENV = "DPBLR_SEED"
X20_URL = "http://people.sc.fsu.edu/~jburkardt/datasets/regression/x20.txt"
X20_COLUMNS = ("index", "one", "urban", "late_births", "wine", "liquor", "cirrhosis")


class ConfigError(ValueError):
    pass


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".toml":
        with path.open("rb") as fh:
            return tomllib.load(fh)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    raise ConfigError(f"config file must be .toml or .json, got {path.name}")


def default_seed():
    value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"missing {what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _data_args(p):
    p.add_argument("--data", help="CSV with header; last column is the response")
    p.add_argument("--x-bounds", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    p.add_argument("--y-bounds", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    p.add_argument("--scale-to-unit", action="store_true",
                   help="map the declared bounds onto [0, 1] after clipping")
    p.add_argument("--unsafe-data-scaling", action="store_true",
                   help="rescale by observed column ranges (not differentially private)")
    p.add_argument("--no-bias", dest="bias", action="store_false",
                   help="do not prepend the unit feature")


def _load_data(args):
    _require_file(args.data, "data file")
    return io.ingest_csv(args.data, args.x_bounds, args.y_bounds, args.scale_to_unit,
                         args.bias, args.unsafe_data_scaling)


def build_parser():
    parser = argparse.ArgumentParser(prog="dpblr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    p = sub.add_parser("release", help="release noisy sufficient statistics (and moments)")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--budget-split", type=float, default=None,
                   help="fraction of epsilon for the statistics (default 0.5 with --moments-out)")
    p.add_argument("--out", required=False, help="noisy statistics JSON")
    p.add_argument("--moments-out", help="also release noisy fourth moments to this JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_release)
    parser.subcommands["release"] = p

    p = sub.add_parser("infer", help="draw posterior samples with one method")
    p.add_argument("--config")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--release", help="noisy statistics JSON (private methods)")
    p.add_argument("--moments-release", help="noisy moments JSON (gibbs-ss-noisy)")
    p.add_argument("--moments", help="covariate moments JSON (gibbs-ss-prior)")
    p.add_argument("--covariate-prior", help="NIW JSON (gibbs-ss-update, mcmc-ind)")
    p.add_argument("--prior", help="NIG prior JSON")
    _data_args(p)
    p.add_argument("--burnin", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="samples CSV; metadata goes to the .json sidecar")
    p.set_defaults(func=cmd_infer)
    parser.subcommands["infer"] = p

    p = sub.add_parser("evaluate", help="run the calibration or predictive experiment")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("calibration", "predictive"), default="calibration")
    p.add_argument("--n", type=int, nargs="+", default=[10])
    p.add_argument("--epsilon", type=float, nargs="+", default=[0.1])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--full", action="store_true", help="use 300 trials per cell")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--prior", help="NIG prior JSON (default: the experiment's prior)")
    p.add_argument("--covariate-prior", help="NIW JSON for the synthetic covariates")
    p.add_argument("--gibbs-burnin", type=int)
    p.add_argument("--gibbs-samples", type=int, default=20000)
    p.add_argument("--prior-mc-draws", type=int, default=10 ** 6)
    p.add_argument("--splits", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    _data_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="results")
    p.set_defaults(func=cmd_evaluate)
    parser.subcommands["evaluate"] = p

    p = sub.add_parser("fetch-data", help="download the cirrhosis regression data")
    p.add_argument("--config")
    p.add_argument("--url", default=X20_URL)
    p.add_argument("--out", default="data/cirrhosis.csv")
    p.add_argument("--covariate", choices=X20_COLUMNS[2:6], default="wine")
    p.add_argument("--sha256", help="expected checksum of the downloaded file")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_fetch_data)
    parser.subcommands["fetch-data"] = p
    return parser


def parse_args(argv=None):
    """Parse ``argv``, letting a ``--config`` file supply defaults for any option."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        subparser = parser.subcommands[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if getattr(args, "seed", "absent") is None:
        args.seed = default_seed()
    return args


# --- subcommands ---------------------------------------------------------------


def cmd_release(args):
    if args.epsilon is None or args.out is None:
        raise ConfigError("release needs --epsilon and --out")
    split = args.budget_split
    if split is None:
        split = 0.5 if args.moments_out else 1.0
    if args.moments_out and split >= 1.0:
        raise ConfigError("a moment release needs --budget-split below 1")
    data = _load_data(args)
    spec = PrivacySpec(args.epsilon, data.x_bounds, data.y_bounds, split)
    rng = make_rng(args.seed)
    z = release_data_stats(data, spec, rng)
    provenance = {
        "seed": args.seed,
        "epsilon_total": spec.epsilon,
        "epsilon_stats": spec.epsilon_stats,
        "epsilon_moments": spec.epsilon_moments,
        "budget_split": split,
        "x_bounds": list(data.x_bounds),
        "y_bounds": list(data.y_bounds),
        "bias": data.bias,
        "d": data.d,
        "n_stats": n_stats(data.d),
    }
    io.write_json(args.out, io.noisy_stats_to_dict(z, provenance))
    if args.moments_out:
        mom = release_fourth_moments(data, spec, rng)
        io.write_json(args.moments_out, io.noisy_moments_to_dict(mom, provenance))
    return 0


def _load_prior(args, default=None):
    if isinstance(args.prior, dict):
        return io.nig_from_dict(args.prior, strict=False)
    if args.prior is None:
        if default is None:
            raise ConfigError("missing --prior")
        return default
    return io.load(_require_file(args.prior, "prior file"), "nig")


def _load_niw(value):
    if isinstance(value, dict):
        return io.niw_from_dict(value, strict=False)
    return io.load(_require_file(value, "covariate prior (--covariate-prior)"), "niw")


def cmd_infer(args):
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    if args.out is None:
        raise ConfigError("infer needs --out")
    prior = _load_prior(args)
    rng = make_rng(args.seed)
    method = args.method
    if method == "non-private":
        samples = run_non_private(_load_data(args), prior, args.samples or 2000, rng)
    else:
        z = io.load(_require_file(args.release, "release file (--release)"), "noisy-stats")
        if method == "naive":
            samples = run_naive(z, prior, args.samples or 2000, rng)
        elif method == "mcmc-ind":
            niw = _load_niw(args.covariate_prior)
            config = IndConfig(args.burnin if args.burnin is not None else 500,
                               args.samples or 2000, args.thin, seed=args.seed)
            samples = run_mcmc_ind(z, prior, niw, z.n, config, rng)
        else:
            variant = method.rsplit("-", 1)[1]
            if variant == "noisy":
                source = io.load(
                    _require_file(args.moments_release, "moments release (--moments-release)"),
                    "noisy-moments",
                )
            elif variant == "prior":
                source = io.load(_require_file(args.moments, "moments file (--moments)"),
                                 "covariate-moments")
            else:
                source = _load_niw(args.covariate_prior)
            config = GibbsConfig(variant, args.burnin if args.burnin is not None else 5000,
                                 args.samples or 20000, args.thin, seed=args.seed)
            samples = run_gibbs(z, prior, source, config, rng)
    samples.meta.setdefault("seed", args.seed)
    io.write_samples(samples, args.out)
    return 0


def cmd_evaluate(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "predictive":
        data = _load_data(args)
        methods = tuple(args.methods or PREDICTIVE_METHODS)
        result = run_predictive_experiment(
            data, args.splits, methods, make_rng(args.seed), _load_prior(args, PREDICTIVE_PRIOR),
            args.epsilon[0],
            gibbs_burnin=args.gibbs_burnin if args.gibbs_burnin is not None else 5000,
            gibbs_samples=args.gibbs_samples,
        )
        rows = []
        for m in methods:
            for level, value in result[m].items():
                rows.append((m, data.n, args.epsilon[0], "y", f"predictive_coverage_{level:g}", value))
            rows.append((m, data.n, args.epsilon[0], "y", "failures", result["failures"][m]))
        io.write_metrics(rows, out / "metrics.csv")
        return 0

    grid = ExperimentGrid(
        n_values=tuple(args.n),
        epsilons=tuple(args.epsilon),
        trials=300 if args.full else args.trials,
        methods=tuple(args.methods or METHODS),
        prior=_load_prior(args, CALIBRATION_PRIOR),
        covariate_prior=(_load_niw(args.covariate_prior) if args.covariate_prior
                         else CALIBRATION_COVARIATE_PRIOR),
        gibbs_burnin=args.gibbs_burnin,
        gibbs_samples=args.gibbs_samples,
        prior_mc_draws=args.prior_mc_draws,
    )
    summaries = run_calibration_grid(grid, args.seed, args.workers)
    rows = [r for s in summaries for r in metric_rows(s)]
    io.write_metrics(rows, out / "metrics.csv")
    qq_dir = out / "qq"
    qq_dir.mkdir(exist_ok=True)
    for s in summaries:
        if s.failures:
            log.warning("%s n=%d eps=%g: %d of %d trials failed and were excluded",
                        s.method, s.n, s.epsilon, s.failures, s.trials)
        for j, name in enumerate(s.param_names):
            u, grid_u = qq_data(s.quantiles[:, j])
            io.write_qq(u, grid_u, qq_dir / f"{s.method}_n{s.n}_eps{s.epsilon:g}_{name}.csv")
    return 0


def parse_x20(text, covariate="wine"):
    """Extract ``(covariate, cirrhosis)`` rows from the regression-collection text format."""
    col = X20_COLUMNS.index(covariate)
    rows = []
    for line in text.splitlines():
        parts = line.split()
        if not parts or line.lstrip().startswith("#") or len(parts) != len(X20_COLUMNS):
            continue
        try:
            values = [float(v) for v in parts]
        except ValueError:
            continue
        rows.append((values[col], values[-1]))
    if len(rows) != 46:
        raise io.FormatError(f"expected 46 data rows, parsed {len(rows)}")
    return rows


def cmd_fetch_data(args):
    try:
        with urllib.request.urlopen(args.url, timeout=args.timeout) as resp:
            raw = resp.read()
    except OSError as exc:
        raise ConfigError(
            f"could not download {args.url} ({exc}); fetch it manually and convert it with "
            "'dpblr fetch-data --url file:///path/to/x20.txt'"
        ) from None
    digest = hashlib.sha256(raw).hexdigest()
    if args.sha256 and digest != args.sha256.lower():
        raise ConfigError(f"checksum mismatch: expected {args.sha256}, got {digest}")
    rows = parse_x20(raw.decode("utf-8", errors="replace"), args.covariate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        fh.write(f"{args.covariate},cirrhosis\n")
        for x, y in rows:
            fh.write(f"{x!r},{y!r}\n")
    print(f"wrote {len(rows)} rows to {out} (sha256 of source {digest})")
    return 0


def main(argv=None):
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"dpblr: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.FormatError) as exc:
        print(f"dpblr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
