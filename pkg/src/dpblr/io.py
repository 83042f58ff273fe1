"""File formats for releases, priors, moments, samples and metrics.

Every JSON document carries ``format_version`` and a ``kind`` tag.  Floats are
written with Python's shortest round-trip repr, so ``load(dump(x)) == x``
holds exactly.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .distributions import NiwParams
from .model import Dataset, NigParams, PosteriorSamples, n_stats
from .moments import CovariateMoments
from .privacy import NoisyMoments, NoisyStats, n_fourth_moments

FORMAT_VERSION = 1
STATS_LAYOUT = "xtx-upper-row-major/xty/yty"
MOMENTS_LAYOUT = "multiset-lexicographic"

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """A file does not match the expected schema."""


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def write_json(path, doc):
    text = json.dumps(_to_jsonable(doc), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def read_json(path, kind=None):
    doc = json.loads(Path(path).read_text())
    check_header(doc, kind, path)
    return doc


def check_header(doc, kind, source="document"):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format_version {version!r}")
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"{source}: expected a {kind!r} document, found {doc.get('kind')!r}")


def _header(kind):
    return {"format_version": FORMAT_VERSION, "kind": kind}


# --- value types ------------------------------------------------------------


def noisy_stats_to_dict(z, provenance=None):
    d = z.d
    return {
        **_header("noisy-stats"),
        "layout": STATS_LAYOUT,
        "d": d,
        "n_stats": n_stats(d),
        "z": z.z,
        "scale": z.scale,
        "n": z.n,
        "epsilon": z.epsilon,
        "sensitivity": z.sensitivity,
        "provenance": provenance or {},
    }


def noisy_stats_from_dict(doc):
    check_header(doc, "noisy-stats")
    z = NoisyStats(np.array(doc["z"], dtype=float), doc["scale"], doc["n"], doc["epsilon"],
                   doc["sensitivity"])
    if z.d != doc["d"]:
        raise FormatError(f"statistics vector does not match d={doc['d']}")
    return z


def noisy_moments_to_dict(mom, provenance=None):
    return {
        **_header("noisy-moments"),
        "layout": MOMENTS_LAYOUT,
        "d": mom.d,
        "sums": mom.sums,
        "scale": mom.scale,
        "n": mom.n,
        "epsilon": mom.epsilon,
        "sensitivity": mom.sensitivity,
        "x_bounds": None if mom.x_bounds is None else list(mom.x_bounds),
        "provenance": provenance or {},
    }


def noisy_moments_from_dict(doc):
    check_header(doc, "noisy-moments")
    sums = np.array(doc["sums"], dtype=float)
    if sums.shape[0] != n_fourth_moments(doc["d"]):
        raise FormatError(f"moment vector does not match d={doc['d']}")
    return NoisyMoments(sums, doc["scale"], doc["n"], doc["d"], doc["epsilon"], doc["sensitivity"],
                        doc.get("x_bounds"))


def nig_to_dict(p):
    return {**_header("nig"), "mu": p.mu, "lambda": p.lam, "a": p.a, "b": p.b}


def nig_from_dict(doc, strict=True):
    if strict:
        check_header(doc, "nig")
    return NigParams(doc["mu"], doc["lambda"], doc["a"], doc["b"])


def niw_to_dict(p):
    return {**_header("niw"), "mu0": p.mu0, "lambda0": p.lambda0, "psi0": p.psi0, "nu0": p.nu0}


def niw_from_dict(doc, strict=True):
    if strict:
        check_header(doc, "niw")
    return NiwParams(doc["mu0"], doc["lambda0"], doc["psi0"], doc["nu0"])


def moments_to_dict(m):
    return {
        **_header("covariate-moments"),
        "layout": MOMENTS_LAYOUT,
        "d": m.d,
        "bias": m.bias,
        "eta2": m.eta2,
        "eta4": m.eta4,
    }


def moments_from_dict(doc):
    check_header(doc, "covariate-moments")
    return CovariateMoments(doc["eta2"], doc["eta4"], doc["bias"])


_LOADERS = {
    "noisy-stats": noisy_stats_from_dict,
    "noisy-moments": noisy_moments_from_dict,
    "nig": nig_from_dict,
    "niw": niw_from_dict,
    "covariate-moments": moments_from_dict,
}


def load(path, kind):
    """Read a JSON artifact of the given ``kind`` and rebuild the value."""
    return _LOADERS[kind](read_json(path, kind))


# --- posterior samples --------------------------------------------------------


def write_samples(samples, csv_path):
    """Draws to CSV (``iteration, theta_0.., sigma2``) plus a ``.json`` metadata sidecar."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + samples.param_names())
        for i, row in enumerate(samples.params()):
            writer.writerow([i] + [repr(float(v)) for v in row])
    sidecar = {**_header("posterior-samples"), "count": len(samples), "d": samples.d,
               "meta": samples.meta}
    write_json(sidecar_path(csv_path), sidecar)


def sidecar_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def read_samples(csv_path):
    csv_path = Path(csv_path)
    doc = read_json(sidecar_path(csv_path), "posterior-samples")
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r[1:]] for r in reader]
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
    if arr.shape != (doc["count"], doc["d"] + 1):
        raise FormatError(f"{csv_path}: expected {doc['count']} rows of {doc['d'] + 1} values")
    return PosteriorSamples(arr[:, :-1], arr[:, -1], doc["meta"])


# --- tables -------------------------------------------------------------------

METRIC_COLUMNS = ("method", "n", "epsilon", "parameter", "metric", "value")


def write_metrics(rows, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for method, n, eps, param, metric, value in rows:
            writer.writerow([method, n, repr(float(eps)), param, metric, repr(float(value))])


def read_metrics(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != METRIC_COLUMNS:
            raise FormatError(f"{path}: unexpected metrics header")
        return [(m, int(n), float(e), p, k, float(v)) for m, n, e, p, k, v in reader]


def write_qq(u, uniform, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["uniform", "quantile"])
        for a, b in zip(uniform, u):
            writer.writerow([repr(float(a)), repr(float(b))])


# --- data ingestion -------------------------------------------------------------


def ingest_csv(path, x_bounds, y_bounds, scale_to_unit=False, bias=True, unsafe_data_scaling=False):
    """Read a headed CSV whose last column is the response.

    Values are clipped into the a-priori bounds (a warning reports how many
    cells moved).  With ``scale_to_unit`` the bounds are mapped affinely onto
    ``[0, 1]``.  ``unsafe_data_scaling`` instead rescales by the observed
    column minima and maxima, which leaks information about the data and is
    not differentially private.
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        width = len(header)
        if width < 2:
            raise FormatError(f"{path}: need at least one covariate and one response column")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"{path}:{line_no}: expected {width} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: non-numeric value ({exc})") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    arr = np.array(rows)
    x, y = arr[:, :-1], arr[:, -1]
    x_bounds, y_bounds = tuple(map(float, x_bounds)), tuple(map(float, y_bounds))
    if unsafe_data_scaling:
        log.warning("scaling by observed data ranges; the result is not differentially private")
        x_lo, x_hi = x.min(axis=0), x.max(axis=0)
        y_lo, y_hi = y.min(), y.max()
        x = (x - x_lo) / np.where(x_hi > x_lo, x_hi - x_lo, 1.0)
        y = (y - y_lo) / (y_hi - y_lo if y_hi > y_lo else 1.0)
        x_bounds = y_bounds = (0.0, 1.0)
    else:
        clipped = int(np.sum((x < x_bounds[0]) | (x > x_bounds[1])))
        clipped += int(np.sum((y < y_bounds[0]) | (y > y_bounds[1])))
        if clipped:
            log.warning("%s: clipped %d value(s) into the declared bounds", path, clipped)
        x = np.clip(x, *x_bounds)
        y = np.clip(y, *y_bounds)
        if scale_to_unit:
            x = (x - x_bounds[0]) / (x_bounds[1] - x_bounds[0])
            y = (y - y_bounds[0]) / (y_bounds[1] - y_bounds[0])
            x_bounds = y_bounds = (0.0, 1.0)
    if bias and not (x_bounds[0] <= 1.0 <= x_bounds[1]):
        raise ValueError("the unit feature lies outside the covariate bounds")
    return Dataset.from_raw(x, y, bias=bias, x_bounds=x_bounds, y_bounds=y_bounds)
