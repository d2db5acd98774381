"""Sandwich asymptotic variance and Wald confidence intervals.

The variance of the integrated value estimate has the sandwich form

    sigma2 = u_bar^T Sigma^{-1} Omega Sigma^{-T} u_bar,

where Sigma is the unridged moment matrix of the beta solve and Omega is the
covariance of the per-transition estimating-function contributions.  Two
Omega estimators are provided: a plug-in form that ignores the uncertainty
of the fitted dropout propensity, and a corrected form that removes the
projection of the weighted scores onto the propensity moment space (only
available for parametric hazards with an analytic psi-gradient).
"""

import warnings
from typing import Tuple

import numpy as np
from scipy import stats

from .basis import SieveDesign
from .estimators import BetaEstimate
from .exceptions import ConfigurationError, NumericalError

SOLVE_RIDGE = 1e-8


def bellman_residuals(est: BetaEstimate, design: SieveDesign) -> np.ndarray:
    """Temporal-difference residuals R + gamma U^T beta - xi^T beta.

    Zero on rows whose (reward, next state) pair is unobserved; those rows
    never contribute to weighted residual sums because their weight is zero.
    """
    eps = (
        design.rewards
        + est.gamma * (design.u_next @ est.beta)
        - design.xi @ est.beta
    )
    eps[design.eta == 0] = 0.0
    return eps


def _stabilized_solve(mat: np.ndarray, rhs: np.ndarray, label: str) -> np.ndarray:
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        warnings.warn(f"{label} singular; ridge-stabilized inverse used", stacklevel=3)
        bumped = mat + SOLVE_RIDGE * np.eye(mat.shape[0])
        try:
            return np.linalg.solve(bumped, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"{label} singular even with ridge") from exc


def score_covariance_plugin(
    design: SieveDesign, weights: np.ndarray, residuals: np.ndarray
) -> np.ndarray:
    """Plug-in Omega: (1/nT) sum w^2 eps^2 xi xi^T (PSD by construction)."""
    rows = design.xi * (np.asarray(weights) * residuals)[:, None]
    return rows.T @ rows / design.n_total


def score_covariance_corrected(
    design: SieveDesign,
    weights: np.ndarray,
    residuals: np.ndarray,
    h_rows: np.ndarray,
    m_rows: np.ndarray,
    grad_weight_rows: np.ndarray,
) -> np.ndarray:
    """Omega with the correction for estimated propensity parameters.

    ``h_rows`` are the moment instruments, ``m_rows`` the per-row propensity
    moment contributions, and ``grad_weight_rows`` the psi-gradient of the
    inverse-probability weight; all are zero on rows the hazard model does
    not govern.  The correction matrix solves

        H2 = [ (1/nT) sum xi eps grad_w^T ] [ (1/nT) sum h grad_w^T ]^{-1}

    and Omega = (1/nT) sum (w xi eps - H2 m)(w xi eps - H2 m)^T.
    """
    n_total = design.n_total
    w = np.asarray(weights, dtype=float)
    first = (design.xi * residuals[:, None]).T @ grad_weight_rows / n_total
    inner = h_rows.T @ grad_weight_rows / n_total
    # H2 = first @ inner^{-1}  via  inner^T x = first^T
    h2 = _stabilized_solve(inner.T, first.T, "propensity moment Jacobian").T
    rows = design.xi * (w * residuals)[:, None] - m_rows @ h2.T
    return rows.T @ rows / n_total


def policy_value_variance(
    sigma_matrix: np.ndarray,
    omega: np.ndarray,
    u_bar: np.ndarray,
    ridge: float = 0.0,
) -> float:
    """Sandwich variance u_bar^T Sigma^{-1} Omega Sigma^{-T} u_bar (>= 0).

    ``ridge`` should match the ridge used in the beta solve so the bread of
    the sandwich is the matrix actually inverted by the estimator; 0 gives
    the raw formula.
    """
    bread = sigma_matrix + ridge * np.eye(sigma_matrix.shape[0])
    v = _stabilized_solve(bread.T, u_bar, "sieve moment matrix")
    s2 = float(v @ omega @ v)
    if s2 < -1e-10:
        raise NumericalError(f"negative variance {s2}")
    return max(s2, 0.0)


def confidence_interval(
    v_hat: float, sigma2: float, n: int, T: int, alpha: float
) -> Tuple[float, float, float]:
    """Two-sided Wald interval; returns (lo, hi, se) with se = sigma/sqrt(nT)."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError("alpha must lie in (0, 1]")
    if sigma2 < 0.0:
        raise NumericalError("variance must be non-negative")
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    se = float(np.sqrt(sigma2 / (n * T)))
    return v_hat - z * se, v_hat + z * se, se
