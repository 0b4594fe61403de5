"""
2x2 covariance algebra for the bivariate nested error regression model.

Random effects and unit errors both carry a 2x2 covariance built from two
variances and a correlation. Everything the fitting and prediction code needs
from the 2N_d x 2N_d domain covariance reduces to operations on these blocks.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from app.errors import BnerError

if TYPE_CHECKING:
    from app.models import VarianceComponents


FACTOR_TOL = 1e-12


class CovarianceError(BnerError):
    """Invalid covariance parameters or a failed factorization."""
    pass


def build_cov2(v1: float, v2: float, rho: float) -> np.ndarray:
    """Assemble [[v1, rho*sqrt(v1*v2)], [rho*sqrt(v1*v2), v2]]."""
    if not (np.isfinite(v1) and np.isfinite(v2) and v1 > 0 and v2 > 0):
        raise CovarianceError(f"variances must be positive, got ({v1}, {v2})")
    if not (np.isfinite(rho) and abs(rho) < 1):
        raise CovarianceError(f"correlation must satisfy |rho| < 1, got {rho}")
    c = rho * np.sqrt(v1 * v2)
    return np.array([[v1, c], [c, v2]], dtype=np.float64)


def cov2_derivatives(v1: float, v2: float, rho: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Partial derivatives of build_cov2 with respect to (v1, v2, rho).

    Returns:
        Three symmetric 2x2 matrices, in parameter order.
    """
    s1, s2 = np.sqrt(v1), np.sqrt(v2)
    d_v1 = np.array([[1.0, 0.5 * rho * s2 / s1], [0.5 * rho * s2 / s1, 0.0]])
    d_v2 = np.array([[0.0, 0.5 * rho * s1 / s2], [0.5 * rho * s1 / s2, 1.0]])
    d_rho = np.array([[0.0, s1 * s2], [s1 * s2, 0.0]])
    return d_v1, d_v2, d_rho


def chol2(m: np.ndarray) -> np.ndarray:
    """
    Lower-triangular Cholesky factor of a 2x2 symmetric positive-definite matrix.

    A residual Schur term that is negative by no more than FACTOR_TOL (relative
    to the largest diagonal entry) is treated as zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise CovarianceError(f"expected a 2x2 matrix, got shape {m.shape}")
    a, b, c = m[0, 0], m[0, 1], m[1, 1]
    scale = max(abs(a), abs(c))
    if not np.all(np.isfinite(m)):
        raise CovarianceError("matrix has non-finite entries")
    if abs(b - m[1, 0]) > FACTOR_TOL * max(scale, abs(b)):
        raise CovarianceError("matrix is not symmetric")
    if a <= 0:
        raise CovarianceError(f"matrix is not positive definite (leading entry {a})")
    l11 = np.sqrt(a)
    l21 = b / l11
    schur = c - l21 * l21
    if schur < -FACTOR_TOL * scale:
        raise CovarianceError(f"matrix is not positive definite (Schur term {schur})")
    l22 = np.sqrt(max(schur, 0.0))
    return np.array([[l11, 0.0], [l21, l22]])


def marginal_cov_domain(theta: VarianceComponents, n_d: int) -> np.ndarray:
    """
    Dense 2n_d x 2n_d covariance of one domain's stacked sample responses.

    Units are the outer index and responses the inner one, so the matrix is
    J_n (x) V_u + I_n (x) V_e. Only the tests use it, as an oracle for the
    closed-form paths.
    """
    if n_d < 1:
        raise CovarianceError(f"n_d must be at least 1, got {n_d}")
    v_u = theta.v_u
    v_e = theta.v_e
    return np.kron(np.ones((n_d, n_d)), v_u) + np.kron(np.eye(n_d), v_e)
