"""Dropout hazard models and inverse-probability observation weights.

Three fitting routes:

* ignorable dropout: logistic regression of the dropout indicator on
  observed covariates (maximum likelihood, Newton iterations);
* nonignorable, known parametric form: two-step GMM on shadow-variable
  moment conditions  E[{eta/(1-lambda(psi)) - 1} h(S, A, Z)] = 0;
* nonignorable, exponential tilting: lambda = 1/(1 + exp[g(U) + psi^T V])
  with the baseline log observation-odds g profiled by a Gaussian kernel
  estimator and psi solved by GMM on discretized-shadow bin indicators.

All fits operate on the at-risk transitions, i.e. rows past the no-dropout
warm-up whose (S_t, A_t) is observed.
"""

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .data import TransitionTable
from .exceptions import (
    ConfigurationError,
    DegenerateDataError,
    EstimationError,
)

EXP_CLIP = 60.0
WEIGHT_FLOOR = 0.01
COV_RIDGE = 1e-8
BANDWIDTH_SCALE = 7.5
FD_STEP = 1e-5


def _cexp(x: np.ndarray) -> np.ndarray:
    """exp with the argument clipped to keep the optimizer in finite territory."""
    return np.exp(np.clip(x, -EXP_CLIP, EXP_CLIP))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + _cexp(-x))


# ---------------------------------------------------------------------------
# feature extractors (simulation defaults; all replaceable per model)

def mnar_hazard_features(table: TransitionTable) -> np.ndarray:
    """Hazard index features (1, S1_t, R_{t+1}); NaN where the reward is unobserved."""
    return np.column_stack(
        [np.ones(len(table)), table.s[:, 0], table.r_next]
    )


def mar_hazard_features(table: TransitionTable) -> np.ndarray:
    """Hazard index features (1, S1_t, R_t); fully observed on at-risk rows."""
    return np.column_stack(
        [np.ones(len(table)), table.s[:, 0], table.r_prev]
    )


def default_moment_instruments(table: TransitionTable) -> np.ndarray:
    """Instruments h(S_t, A_t, Z_t) = (1, S1_t, Z_t) with shadow Z = S2."""
    return np.column_stack(
        [np.ones(len(table)), table.s[:, 0], table.s[:, 1]]
    )


def default_shadow(table: TransitionTable) -> np.ndarray:
    """Shadow variable Z_t = S2_t."""
    return table.s[:, 1]


def default_tilt_covariate(table: TransitionTable) -> np.ndarray:
    """Non-shadow covariate the tilting baseline g depends on (S1_t)."""
    return table.s[:, 0]


def default_tilt_outcome(table: TransitionTable) -> np.ndarray:
    """Outcome features V_{t+1} entering the tilting index (R_{t+1})."""
    return table.r_next.reshape(-1, 1)


# ---------------------------------------------------------------------------
# parametric hazard model


@dataclass
class ParametricDropoutModel:
    """Hazard lambda = 1/(1 + exp(psi^T x)) with an explicit feature map."""

    psi: np.ndarray
    kind: str  # 'mar' or 'mnar'
    feature_map: Callable[[TransitionTable], np.ndarray] = field(repr=False, default=None)

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        if self.feature_map is None:
            self.feature_map = (
                mnar_hazard_features if self.kind == "mnar" else mar_hazard_features
            )

    def linear_index(self, table: TransitionTable) -> np.ndarray:
        return self.feature_map(table) @ self.psi

    def hazard(self, table: TransitionTable) -> np.ndarray:
        """Fitted lambda on every row: 0 on warm-up rows (no dropout possible),
        NaN where the hazard features are unobservable."""
        lam = np.zeros(len(table))
        at_risk = table.at_risk
        idx = self.linear_index(table)
        lam[at_risk] = 1.0 - _sigmoid(idx[at_risk])
        return lam

    def to_json(self) -> str:
        return json.dumps(
            {"family": "parametric", "kind": self.kind, "psi": self.psi.tolist()},
            sort_keys=True,
        )

    def score_pieces(self, table: TransitionTable):
        """Arrays used by the corrected sandwich variance.

        Returns ``(h, m, grad_w)`` aligned with the table rows: moment
        instruments, per-row moment contributions and the psi-gradient of the
        inverse-probability weight.  All are zero off the at-risk set.
        """
        n = len(table)
        h_full = default_moment_instruments(table)
        x_full = self.feature_map(table)
        idx = x_full @ self.psi
        at_risk = table.at_risk
        obs = table.observed
        h = np.where(at_risk[:, None], h_full, 0.0)
        m = np.zeros((n, h_full.shape[1]))
        grad_w = np.zeros((n, self.psi.shape[0]))
        on = at_risk & obs
        off = at_risk & ~obs
        e = _cexp(-idx[on])
        m[on] = h_full[on] * e[:, None]
        m[off] = -h_full[off]
        grad_w[on] = -x_full[on] * e[:, None]
        return h, m, grad_w


def fit_mar_logistic(
    table: TransitionTable,
    feature_map: Callable[[TransitionTable], np.ndarray] = mar_hazard_features,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> ParametricDropoutModel:
    """Maximum-likelihood logistic fit of the dropout probability under MAR.

    The dropout indicator ``1 - eta_{t+1}`` is regressed on the observed
    features of the at-risk rows.  The returned psi uses the hazard
    parameterization lambda = 1/(1 + exp(psi^T x)).
    """
    at_risk = table.at_risk
    x = feature_map(table)[at_risk]
    y = 1.0 - table.eta_next[at_risk].astype(float)
    if y.sum() == 0 or y.sum() == y.shape[0]:
        raise EstimationError("dropout indicator is constant: cannot fit hazard")
    n, q = x.shape
    b = np.zeros(q)
    for _ in range(max_iter):
        p = _sigmoid(x @ b)
        grad = x.T @ (y - p) / n
        if np.max(np.abs(grad)) < tol:
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        hess = (x * w[:, None]).T @ x / n
        try:
            b = b + np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"logistic Hessian singular: {exc}") from exc
        if np.max(np.abs(b)) > 1e3:
            raise EstimationError("logistic fit diverged (possible separation)")
    else:
        raise EstimationError(
            "logistic fit did not converge", residual=float(np.max(np.abs(grad)))
        )
    # dropout logit uses +b; the hazard parameterization flips the sign
    return ParametricDropoutModel(psi=-b, kind="mar", feature_map=feature_map)


def _default_starts(q: int) -> np.ndarray:
    starts = [np.zeros(q), np.full(q, 0.5), np.full(q, -0.5)]
    e1 = np.zeros(q)
    e1[0] = 2.0
    starts.extend([e1, -e1])
    return np.asarray(starts)


def _two_step_weight(m_rows: np.ndarray) -> np.ndarray:
    """Inverse (ridge-stabilized) empirical covariance of the moment rows."""
    centered = m_rows - m_rows.mean(axis=0)
    cov = centered.T @ centered / m_rows.shape[0]
    cov = cov + COV_RIDGE * np.eye(cov.shape[0])
    try:
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        warnings.warn("moment covariance singular; identity weight kept", stacklevel=2)
        return np.eye(cov.shape[0])


def fit_parametric_gmm(
    table: TransitionTable,
    feature_map: Callable[[TransitionTable], np.ndarray] = mnar_hazard_features,
    instrument_map: Callable[[TransitionTable], np.ndarray] = default_moment_instruments,
    starts: Optional[np.ndarray] = None,
    kind: str = "mnar",
) -> ParametricDropoutModel:
    """Two-step GMM for a parametric nonignorable hazard.

    Step 1 minimizes the moment quadratic with identity weighting from
    several deterministic starts (L-BFGS with analytic gradients); step 2
    re-weights by the inverse moment covariance.  In the just-identified
    case the solution is polished by Newton steps on the moment vector and
    must satisfy ``max |m_bar| < 1e-6``.
    """
    at_risk = table.at_risk
    x = feature_map(table)[at_risk]
    h = instrument_map(table)[at_risk]
    eta = table.eta_next[at_risk].astype(float)
    n, q_psi = x.shape
    q_h = h.shape[1]
    if q_h < q_psi:
        raise ConfigurationError("need at least dim(psi) moment conditions")
    if eta.min() == 1.0:
        raise EstimationError(
            "no dropout events: hazard scale is not identified"
        )

    obs = eta == 1.0
    x_obs = x[obs]
    h_obs = h[obs]
    m_miss = -h[~obs].sum(axis=0) / n  # constant part from dropped rows

    def moment_mean(psi: np.ndarray) -> np.ndarray:
        e = _cexp(-(x_obs @ psi))
        return h_obs.T @ e / n + m_miss

    def moment_jacobian(psi: np.ndarray) -> np.ndarray:
        e = _cexp(-(x_obs @ psi))
        return -(h_obs * e[:, None]).T @ x_obs / n

    def objective(psi: np.ndarray, w: np.ndarray):
        m = moment_mean(psi)
        jac = moment_jacobian(psi)
        return float(m @ w @ m), 2.0 * jac.T @ (w @ m)

    if starts is None:
        starts = _default_starts(q_psi)

    def minimize_all(w: np.ndarray, extra: Sequence[np.ndarray] = ()):
        best = None
        for s0 in list(starts) + list(extra):
            res = optimize.minimize(
                objective,
                np.asarray(s0, dtype=float),
                args=(w,),
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": 500, "ftol": 1e-18, "gtol": 1e-12},
            )
            if best is None or res.fun < best.fun:
                best = res
        return best

    step1 = minimize_all(np.eye(q_h))
    m_rows_1 = _per_row_moments(x, h, eta, step1.x)
    w2 = _two_step_weight(m_rows_1)
    step2 = minimize_all(w2, extra=[step1.x])
    psi = step2.x

    if q_h == q_psi:
        # just-identified: polish to the exact root of the moment equations
        for _ in range(25):
            m = moment_mean(psi)
            if np.max(np.abs(m)) < 1e-10:
                break
            try:
                psi = psi - np.linalg.solve(moment_jacobian(psi), m)
            except np.linalg.LinAlgError:
                break
        resid = float(np.max(np.abs(moment_mean(psi))))
        if resid >= 1e-6:
            raise EstimationError(
                "GMM did not reach the moment root from any start", residual=resid
            )
    return ParametricDropoutModel(psi=psi, kind=kind, feature_map=feature_map)


def _per_row_moments(x, h, eta, psi) -> np.ndarray:
    obs = eta == 1.0
    rows = np.empty(h.shape)
    rows[obs] = h[obs] * _cexp(-(x[obs] @ psi))[:, None]
    rows[~obs] = -h[~obs]
    return rows


# ---------------------------------------------------------------------------
# shadow discretization


def discretize_shadow(values: np.ndarray, n_bins: int = 4):
    """Quantile bins for a continuous shadow variable.

    Returns ``(indices, edges)``; interior bins are left-closed/right-open.
    """
    values = np.asarray(values, dtype=float)
    if np.unique(values).size < n_bins:
        raise DegenerateDataError("too few distinct shadow values to bin")
    probs = np.arange(1, n_bins) / n_bins
    edges = np.quantile(values, probs)
    if np.unique(edges).size < n_bins - 1:
        raise DegenerateDataError("shadow quantile edges are tied")
    return assign_shadow_bins(values, edges), edges


def assign_shadow_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Deterministic bin assignment by interval membership against stored edges."""
    return np.searchsorted(np.asarray(edges, dtype=float), values, side="right")


# ---------------------------------------------------------------------------
# semiparametric exponential tilting


@dataclass
class TiltingDropoutModel:
    """lambda = 1/(1 + exp[g(U) + psi^T V]) with g tabulated on a grid.

    The profiled baseline ``g`` is stored as a dense (u, g(u)) grid with a
    linear-interpolation contract so fitted models can be serialized and
    replayed exactly.
    """

    psi: np.ndarray
    grid_u: np.ndarray
    grid_g: np.ndarray
    bin_edges: np.ndarray
    bandwidths: np.ndarray
    covariate_map: Callable[[TransitionTable], np.ndarray] = field(
        repr=False, default=None
    )
    outcome_map: Callable[[TransitionTable], np.ndarray] = field(
        repr=False, default=None
    )

    def __post_init__(self):
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        if self.covariate_map is None:
            self.covariate_map = default_tilt_covariate
        if self.outcome_map is None:
            self.outcome_map = default_tilt_outcome

    def baseline_log_odds(self, u: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(u, dtype=float), self.grid_u, self.grid_g)

    def hazard(self, table: TransitionTable) -> np.ndarray:
        """Fitted lambda per row: 0 on warm-up rows, NaN where V is unobserved."""
        lam = np.full(len(table), np.nan)
        lam[~table.at_risk] = 0.0
        rows = table.at_risk & table.observed
        u = self.covariate_map(table)[rows]
        v = self.outcome_map(table)[rows]
        idx = self.baseline_log_odds(u) + v @ self.psi
        lam[rows] = 1.0 - _sigmoid(idx)
        return lam

    def to_json(self) -> str:
        return json.dumps(
            {
                "family": "tilting",
                "psi": self.psi.tolist(),
                "bin_edges": self.bin_edges.tolist(),
                "bandwidths": self.bandwidths.tolist(),
                "grid_u": self.grid_u.tolist(),
                "grid_g": self.grid_g.tolist(),
                "interpolation": "linear",
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TiltingDropoutModel":
        payload = json.loads(text)
        if payload.get("family") != "tilting":
            raise ConfigurationError("not a tilting model payload")
        return cls(
            psi=np.asarray(payload["psi"]),
            grid_u=np.asarray(payload["grid_u"]),
            grid_g=np.asarray(payload["grid_g"]),
            bin_edges=np.asarray(payload["bin_edges"]),
            bandwidths=np.asarray(payload["bandwidths"]),
        )


def per_point_bandwidths(
    u: np.ndarray, bins: np.ndarray, n_bins: int, scale: float = BANDWIDTH_SCALE
) -> np.ndarray:
    """Per-bin Gaussian bandwidths h_l = scale * sd_l * n_l^{-1/3}."""
    bw = np.empty(n_bins)
    for l in range(n_bins):
        mask = bins == l
        n_l = int(mask.sum())
        if n_l < 2:
            raise DegenerateDataError(f"shadow bin {l} has fewer than 2 points")
        sd = float(np.std(u[mask], ddof=1))
        if sd <= 0:
            raise DegenerateDataError(f"shadow bin {l} has zero spread in U")
        bw[l] = scale * sd * n_l ** (-1.0 / 3.0)
    return bw


def _kernel_matrix(query: np.ndarray, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Gaussian kernel weights K[j, i] = exp(-(q_j - u_i)^2 / 2 h_i^2) / h_i."""
    z = (query[:, None] - u[None, :]) / h[None, :]
    return np.exp(-0.5 * np.square(z)) / h[None, :]


def profile_log_odds(
    u: np.ndarray,
    v: np.ndarray,
    eta: np.ndarray,
    psi: np.ndarray,
    bandwidths: np.ndarray,
    query: np.ndarray,
    kernel: Optional[np.ndarray] = None,
    denominator: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Kernel-profiled baseline log observation-odds g at the query points.

    Solves the local version of the observation-odds balance:

        exp(g(q)) = sum_i eta_i exp(-psi^T V_i) K_h(q - U_i)
                    / sum_i (1 - eta_i) K_h(q - U_i)

    with per-point bandwidths.  Query points with no dropout mass nearby get
    g = +inf (hazard 0) with a warning, matching the weight-floor contract.
    """
    u = np.asarray(u, dtype=float)
    eta = np.asarray(eta, dtype=float)
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    v2 = np.asarray(v, dtype=float).reshape(u.shape[0], -1)
    if kernel is None:
        kernel = _kernel_matrix(np.asarray(query, dtype=float), u, bandwidths)
    if denominator is None:
        denominator = kernel @ (1.0 - eta)
    tilt = np.where(eta == 1.0, np.where(np.isnan(v2 @ psi), 0.0, -(v2 @ psi)), -np.inf)
    shift = np.max(tilt[np.isfinite(tilt)]) if np.any(np.isfinite(tilt)) else 0.0
    numer = kernel @ (eta * _cexp(tilt - shift))
    with np.errstate(divide="ignore"):
        g = shift + np.log(numer) - np.log(denominator)
    empty = denominator <= 0.0
    if np.any(empty):
        warnings.warn(
            f"{int(empty.sum())} query points have no dropout mass nearby; "
            "hazard floored at 0 there",
            stacklevel=2,
        )
        g[empty] = np.inf
    return g


def fit_semiparametric(
    table: TransitionTable,
    shadow_map: Callable[[TransitionTable], np.ndarray] = default_shadow,
    covariate_map: Callable[[TransitionTable], np.ndarray] = default_tilt_covariate,
    outcome_map: Callable[[TransitionTable], np.ndarray] = default_tilt_outcome,
    n_bins: int = 4,
    bandwidth_scale: float = BANDWIDTH_SCALE,
    n_grid: int = 401,
    starts: Optional[np.ndarray] = None,
) -> TiltingDropoutModel:
    """Fit the exponential-tilting hazard by profiled GMM.

    The shadow variable is discretized into quantile bins; the first
    ``n_bins - 1`` bin indicators form the estimating equations for psi,
    each evaluation re-profiling g by the kernel formula.  Minimization uses
    L-BFGS with central finite differences from several starts, followed by
    a second GMM step with inverse-covariance weighting.
    """
    at_risk = table.at_risk
    z = shadow_map(table)[at_risk]
    u = covariate_map(table)[at_risk]
    v = outcome_map(table)[at_risk]
    eta = table.eta_next[at_risk].astype(float)
    if eta.min() == 1.0:
        raise EstimationError("no dropout events: hazard scale is not identified")
    if n_bins < 2:
        raise EstimationError(
            "a single shadow bin yields no identifying equations"
        )
    bins, edges = discretize_shadow(z, n_bins)
    bw = per_point_bandwidths(u, bins, n_bins, bandwidth_scale)
    h_points = bw[bins]

    grid = np.linspace(float(u.min()), float(u.max()), n_grid)
    kernel = _kernel_matrix(grid, u, h_points)
    denom = kernel @ (1.0 - eta)
    indicators = np.column_stack([(bins == l) for l in range(n_bins - 1)]).astype(float)

    v2 = v.reshape(u.shape[0], -1)
    q_psi = v2.shape[1]
    obs = eta == 1.0

    def g_on_grid(psi: np.ndarray) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return profile_log_odds(
                u, v2, eta, psi, h_points, grid, kernel=kernel, denominator=denom
            )

    def moment_rows(psi: np.ndarray) -> np.ndarray:
        g_grid = g_on_grid(psi)
        idx = np.interp(u[obs], grid, g_grid) + v2[obs] @ psi
        resid = np.full(u.shape[0], -1.0)
        resid[obs] = _cexp(-idx)
        return indicators * resid[:, None]

    def moment_mean(psi: np.ndarray) -> np.ndarray:
        return moment_rows(psi).mean(axis=0)

    def objective(psi: np.ndarray, w: np.ndarray) -> float:
        m = moment_mean(psi)
        return float(m @ w @ m)

    def fd_gradient(psi: np.ndarray, w: np.ndarray) -> np.ndarray:
        grad = np.empty(q_psi)
        for j in range(q_psi):
            step = np.zeros(q_psi)
            step[j] = FD_STEP
            grad[j] = (objective(psi + step, w) - objective(psi - step, w)) / (
                2.0 * FD_STEP
            )
        return grad

    if starts is None:
        starts = _default_starts(q_psi)

    def minimize_all(w: np.ndarray, extra: Sequence[np.ndarray] = ()):
        best = None
        for s0 in list(starts) + list(extra):
            res = optimize.minimize(
                objective,
                np.asarray(s0, dtype=float).reshape(q_psi),
                args=(w,),
                jac=fd_gradient,
                method="L-BFGS-B",
                options={"maxiter": 200, "ftol": 1e-18, "gtol": 1e-12},
            )
            if best is None or res.fun < best.fun:
                best = res
        return best

    step1 = minimize_all(np.eye(n_bins - 1))
    w2 = _two_step_weight(moment_rows(step1.x))
    step2 = minimize_all(w2, extra=[step1.x])

    return TiltingDropoutModel(
        psi=step2.x,
        grid_u=grid,
        grid_g=g_on_grid(step2.x),
        bin_edges=edges,
        bandwidths=bw,
        covariate_map=covariate_map,
        outcome_map=outcome_map,
    )


# ---------------------------------------------------------------------------
# observation weights


def observation_weights(
    table: TransitionTable,
    model=None,
    floor: float = WEIGHT_FLOOR,
) -> np.ndarray:
    """Inverse-probability weights eta / max(1 - lambda_hat, floor).

    ``model=None`` means no dropout model (complete data): the weight equals
    the response indicator.  Unobserved rows always get weight 0, and the
    floor caps the weights at 1/floor.
    """
    eta = table.eta_next.astype(float)
    if model is None:
        return eta
    lam = model.hazard(table)
    keep = np.where(np.isnan(lam), 0.0, 1.0 - lam)
    return np.where(eta == 1.0, 1.0 / np.maximum(keep, floor), 0.0)
