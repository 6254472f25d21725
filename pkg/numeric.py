"""
Dense linear algebra kernel: ridge solves and rank-update inverse maintenance.

Every function is pure: inputs are never written to and the result is a new
float64 array. Singular systems raise SingularError instead of being
regularized away.
"""
import logging

import numpy as np
from scipy import linalg

from lib import InputError, SingularError, as_matrix, as_vector

logger = logging.getLogger(__name__)

# relative pivot size below which a system counts as singular
SINGULAR_TOL = 1e-12


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def ridge_solve(X, Y, gamma: float) -> np.ndarray:
    """
    Minimizer of ||Y - X W||_F^2 + gamma ||W||_F^2, i.e. (X'X + gamma I)^-1 X'Y
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if gamma < 0:
        raise InputError("gamma must be non-negative")

    d = X.shape[1]
    if d == 0:
        return np.zeros((0, Y.shape[1]))

    gram = X.T @ X + gamma * np.eye(d)
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise SingularError("singular normal equations") from err

    pivots = np.diag(factor[0]) ** 2
    scale = max(np.abs(np.diag(gram)).max(), 1.0)
    if pivots.min() < SINGULAR_TOL * scale:
        raise SingularError("singular normal equations")

    return linalg.cho_solve(factor, X.T @ Y, check_finite=False)


def sherman_morrison_update(A_inv, u, v) -> np.ndarray:
    """
    (A + u v')^-1 from A^-1 without inverting anything
    """
    A_inv = as_matrix(A_inv, "A_inv")
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    d = A_inv.shape[0]
    if A_inv.shape != (d, d) or u.shape != (d,) or v.shape != (d,):
        raise InputError(
            f"shape mismatch: A_inv {A_inv.shape}, u {u.shape}, v {v.shape}"
        )

    Au = A_inv @ u
    vA = v @ A_inv
    inner = v @ Au
    denominator = 1.0 + inner
    scale = max(1.0, abs(inner))
    if abs(denominator) < SINGULAR_TOL * scale:
        raise SingularError("rank-one update singular")

    return A_inv - np.outer(Au, vA) / denominator


def woodbury_block_update(A_inv, U, beta: float = 1.0) -> np.ndarray:
    """
    (beta A + U'U)^-1 from a symmetric A^-1, where U holds m update rows.

    Only the m x m capacitance system beta I + U A^-1 U' is factored.
    """
    A_inv = as_matrix(A_inv, "A_inv")
    U = as_matrix(U, "U")
    d = A_inv.shape[0]
    if A_inv.shape != (d, d):
        raise InputError(f"A_inv must be square, got {A_inv.shape}")
    if U.shape[1] != d:
        raise InputError(f"update rows have width {U.shape[1]}, expected {d}")
    if U.shape[0] < 1:
        raise InputError("block update needs at least one row")
    if not 0.0 < beta <= 1.0:
        raise InputError(f"forgetting factor must lie in (0, 1], got {beta}")

    AU = A_inv @ U.T
    capacitance = beta * np.eye(U.shape[0]) + U @ AU
    lu, piv = linalg.lu_factor(capacitance, check_finite=False)
    pivots = np.abs(np.diag(lu))
    scale = max(np.abs(capacitance).max(), 1.0)
    if pivots.min() < SINGULAR_TOL * scale:
        raise SingularError("singular capacitance matrix")

    correction = AU @ linalg.lu_solve((lu, piv), U @ A_inv, check_finite=False)
    return symmetrize((A_inv - correction) / beta)


def ensure_spd(A, name: str = "matrix"):
    """
    Cholesky feasibility check, raises SingularError when A is not SPD
    """
    A = as_matrix(A, name)
    try:
        linalg.cholesky(A, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise SingularError(f"{name} is not positive definite") from err
    logger.debug("%s passed the Cholesky check", name)
