"""Small dense linear-algebra helpers shared by the samplers."""

import numpy as np
from scipy.linalg import solve_triangular

COV_FLOOR = 1e-10


class NumericalError(ArithmeticError):
    """A matrix that must be positive definite is not, or a solve failed."""


def symmetrize(a):
    return 0.5 * (a + a.T)


def floor_eigenvalues(cov, rel=COV_FLOOR):
    """Symmetrize ``cov`` and raise every eigenvalue to at least ``rel * trace``.

    Returns the input (symmetrized) untouched when it already clears the floor.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    tr = np.trace(cov)
    floor = rel * max(tr, 0.0)
    w, v = np.linalg.eigh(cov)
    if w[0] >= floor and w[0] > 0.0:
        return cov
    floor = max(floor, np.finfo(float).tiny)
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


def cholesky(a, what="matrix"):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def chol_solve(lower, b):
    """Solve ``(L L^T) x = b`` given the lower Cholesky factor ``L``."""
    y = solve_triangular(lower, b, lower=True, check_finite=False)
    return solve_triangular(lower.T, y, lower=False, check_finite=False)


def spd_solve(a, b, what="matrix"):
    return chol_solve(cholesky(a, what), b)
