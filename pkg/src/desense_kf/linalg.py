"""Factor-and-solve helpers shared by the discrete and continuous filters.

No gain is ever formed with an explicit inverse: every "A B⁻¹" is a
right-division solved through a factorization, after a condition check
against `NumericsConfig.condition_threshold`.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as spla

from .config import get_config
from .exceptions import NumericFailure, SingularEquationError, SingularInnovationError
from .logging import debug_log
from .types import FloatArray


def symmetrize(matrix: FloatArray) -> FloatArray:
    return 0.5 * (matrix + matrix.T)


def condition_estimate(matrix: FloatArray) -> float:
    if not np.all(np.isfinite(matrix)):
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = float(np.linalg.cond(matrix))
    # an all-zero matrix gives 0/0
    return cond if np.isfinite(cond) else float("inf")


def solve_spd_right(
    rhs: FloatArray,
    matrix: FloatArray,
    *,
    what: str = "innovation covariance",
    epoch: int | None = None,
    time: float | None = None,
) -> FloatArray:
    """Return rhs · matrix⁻¹ for a symmetric positive definite `matrix`.

    Raises:
        SingularInnovationError: condition estimate above threshold, or the
            Cholesky factorization fails.
    """
    threshold = get_config().numerics.condition_threshold
    cond = condition_estimate(matrix)
    if cond > threshold:
        debug_log(f"{what} rejected, condition {cond:.3e}")
        raise SingularInnovationError(
            f"{what} is numerically singular", condition=cond, epoch=epoch, time=time
        )
    try:
        factor = spla.cho_factor(symmetrize(matrix), lower=True, check_finite=False)
    except spla.LinAlgError as e:
        raise SingularInnovationError(
            f"{what} is not positive definite", condition=cond, epoch=epoch, time=time
        ) from e
    # (rhs M⁻¹)ᵀ = M⁻¹ rhsᵀ since M is symmetric
    return spla.cho_solve(factor, rhs.T, check_finite=False).T


def solve_linear(
    matrix: FloatArray,
    rhs: FloatArray,
    *,
    what: str = "linear system",
    epoch: int | None = None,
) -> FloatArray:
    """Solve matrix · x = rhs by LU factorization.

    Raises:
        SingularEquationError: condition estimate above threshold.
    """
    threshold = get_config().numerics.condition_threshold
    cond = condition_estimate(matrix)
    if cond > threshold:
        debug_log(f"{what} rejected, condition {cond:.3e}")
        raise SingularEquationError(
            f"{what} is numerically singular", condition=cond, epoch=epoch
        )
    lu, piv = spla.lu_factor(matrix, check_finite=False)
    return spla.lu_solve((lu, piv), rhs, check_finite=False)


def ensure_finite(
    *arrays: FloatArray, what: str, epoch: int | None = None, time: float | None = None
) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericFailure(f"non-finite {what}", epoch=epoch, time=time)


def asymmetry_ratio(matrix: FloatArray) -> float:
    """max|P − Pᵀ| relative to max|P| (0 for the zero matrix)."""
    scale = float(np.max(np.abs(matrix), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(matrix - matrix.T))) / scale


def min_eigen_ratio(matrix: FloatArray) -> float:
    """Smallest eigenvalue of the symmetric part over its trace."""
    sym = symmetrize(matrix)
    trace = float(np.trace(sym))
    smallest = float(np.linalg.eigvalsh(sym).min())
    if trace <= 0.0:
        return 0.0 if smallest >= 0.0 else -np.inf
    return smallest / trace


def covariance_is_healthy(matrix: FloatArray) -> bool:
    numerics = get_config().numerics
    return (
        asymmetry_ratio(matrix) <= numerics.symmetry_rtol
        and min_eigen_ratio(matrix) >= -numerics.psd_rtol
    )
