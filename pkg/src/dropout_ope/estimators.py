"""Linear sieve estimators of the Q-function and integrated policy value.

Both estimators solve the same weighted linear estimating equation

    [ (1/nT) sum_t w_t xi_t (xi_t - gamma U_{t+1})^T + ridge I ] beta
        = (1/nT) sum_t w_t xi_t R_{t+1}

with w = eta (complete-case) or w = inverse-probability weights.  The
unridged moment matrix is kept for the sandwich variance.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .basis import SieveDesign, action_block_features, policy_weighted_features
from .exceptions import ConfigurationError, EstimationError

DEFAULT_RIDGE = 1e-5

KIND_CC = "cc"
KIND_IPW = "ipw"


@dataclass
class BetaEstimate:
    """Fitted Q-function coefficients plus the pieces inference needs."""

    beta: np.ndarray
    sigma_matrix: np.ndarray   # unridged (1/nT) sum w xi (xi - gamma U)^T
    moment_vector: np.ndarray  # (1/nT) sum w xi R
    ridge: float
    kind: str
    weights_used: np.ndarray
    gamma: float


def estimate_beta(
    design: SieveDesign,
    gamma: float,
    kind: str = KIND_CC,
    weights: Optional[np.ndarray] = None,
    ridge: float = DEFAULT_RIDGE,
) -> BetaEstimate:
    """Solve the weighted estimating equation for the coefficient vector.

    ``kind='cc'`` uses the response indicator as weight; ``kind='ipw'``
    requires an explicit weight vector (inverse observation probabilities,
    zero on unobserved rows).
    """
    if kind == KIND_CC:
        w = design.eta.astype(float) if weights is None else np.asarray(weights, float)
    elif kind == KIND_IPW:
        if weights is None:
            raise ConfigurationError("ipw estimation requires a weight vector")
        w = np.asarray(weights, dtype=float)
    else:
        raise ConfigurationError(f"unknown estimator kind {kind!r}")
    if w.shape[0] != len(design):
        raise ConfigurationError("weight vector length mismatch")

    n_total = design.n_total
    xi_w = design.xi * w[:, None]
    sigma = xi_w.T @ (design.xi - gamma * design.u_next) / n_total
    moment = xi_w.T @ design.rewards / n_total
    lhs = sigma + ridge * np.eye(sigma.shape[0])
    try:
        beta = np.linalg.solve(lhs, moment)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"moment matrix singular even with ridge: {exc}") from exc
    return BetaEstimate(
        beta=beta,
        sigma_matrix=sigma,
        moment_vector=moment,
        ridge=ridge,
        kind=kind,
        weights_used=w,
        gamma=gamma,
    )


def q_value(est: BetaEstimate, basis, s, a) -> np.ndarray | float:
    """Q(s, a) = xi(s, a)^T beta; scalar for a single state."""
    s_arr = np.atleast_2d(np.asarray(s, dtype=float))
    a_arr = np.broadcast_to(np.asarray(a, dtype=np.int64).reshape(-1), (s_arr.shape[0],))
    phi = basis(s_arr)
    n_actions = est.beta.shape[0] // phi.shape[1]
    xi = action_block_features(phi, a_arr, n_actions)
    vals = xi @ est.beta
    return float(vals[0]) if np.isscalar(a) and np.asarray(s).ndim == 1 else vals


def state_value(est: BetaEstimate, basis, s, policy) -> np.ndarray | float:
    """V(s) = U_pi(s)^T beta = sum_a pi(a|s) Q(s, a)."""
    s_arr = np.atleast_2d(np.asarray(s, dtype=float))
    phi = basis(s_arr)
    probs = policy(s_arr)
    u = policy_weighted_features(phi, probs)
    vals = u @ est.beta
    return float(vals[0]) if np.asarray(s).ndim == 1 else vals


def reference_feature_average(
    basis, policy, ref_states: np.ndarray
) -> np.ndarray:
    """Average of U_pi(s) over the reference sample (used for value and SE)."""
    phi = basis(ref_states)
    probs = policy(ref_states)
    return policy_weighted_features(phi, probs).mean(axis=0)


def integrated_value(
    est: BetaEstimate,
    basis,
    policy,
    ref_states: np.ndarray,
) -> Tuple[float, np.ndarray]:
    """Integrated value over the reference sample.

    Returns ``(v_hat, u_bar)`` where ``u_bar`` is the averaged feature vector,
    reused by the variance so the value and its SE share one reference sample.
    """
    u_bar = reference_feature_average(basis, policy, ref_states)
    return float(u_bar @ est.beta), u_bar


@dataclass
class ValueReport:
    """Point estimate, standard error and two-sided CI for one estimator."""

    v_hat: float
    se: float
    ci: Tuple[float, float]
    n: int
    T: int
    alpha: float
    kind: str

    def to_dict(self) -> dict:
        return {
            "v_hat": self.v_hat,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "n": self.n,
            "T": self.T,
            "alpha": self.alpha,
            "kind": self.kind,
        }
