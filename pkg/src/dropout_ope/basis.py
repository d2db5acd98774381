"""Scaled-state B-spline sieve basis and per-transition design assembly.

States are affinely scaled onto [0, 1] per dimension (clamped outside the
training range), expanded in clamped cubic B-splines evaluated with the
Cox-de Boor recursion, and combined across dimensions either as a tensor
product (default, L = bases_per_dim**d) or additively (L = d * bases_per_dim,
for higher-dimensional states).
"""

import json
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import TransitionTable
from .exceptions import (
    BasisConstructionError,
    DegenerateDataError,
    ShapeError,
)


@dataclass(frozen=True)
class StateScaler:
    """Per-dimension affine map of the training range onto [0, 1], clamped."""

    lo: np.ndarray
    hi: np.ndarray

    def transform(self, states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=float))
        if x.shape[1] != self.lo.shape[0]:
            raise ShapeError(
                f"expected {self.lo.shape[0]}-dimensional states, got {x.shape[1]}"
            )
        z = (x - self.lo) / (self.hi - self.lo)
        return np.clip(z, 0.0, 1.0)


def fit_scaler(states: np.ndarray) -> StateScaler:
    """Fit the [0, 1] scaler to training states (min -> 0, max -> 1)."""
    x = np.atleast_2d(np.asarray(states, dtype=float))
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    if np.any(hi - lo <= 0):
        bad = int(np.argmax(hi - lo <= 0))
        raise DegenerateDataError(f"state dimension {bad} is constant")
    return StateScaler(lo=lo, hi=hi)


@dataclass(frozen=True)
class SplineSpec:
    degree: int = 3
    bases_per_dim: int = 6
    tensor_product: bool = True

    def __post_init__(self):
        if self.degree < 0:
            raise BasisConstructionError("degree must be >= 0")
        if self.bases_per_dim < self.degree + 1:
            raise BasisConstructionError(
                "bases_per_dim must be at least degree + 1"
            )


def cox_de_boor_design(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """B-spline design matrix by the Cox-de Boor recursion.

    ``knots`` is the full (clamped) non-decreasing knot vector; the number of
    basis functions is ``len(knots) - degree - 1``.  Terms with zero knot
    span are treated as zero.  Evaluation points are clamped to the knot
    range and the right boundary is included in the last non-empty span.
    """
    t = np.asarray(knots, dtype=float)
    x = np.clip(np.asarray(x, dtype=float).reshape(-1), t[0], t[-1])
    n_basis = len(t) - degree - 1
    if n_basis < 1:
        raise BasisConstructionError("knot vector too short for requested degree")

    b = np.zeros((x.shape[0], len(t) - 1))
    nonempty = np.nonzero(t[:-1] < t[1:])[0]
    if nonempty.size == 0:
        raise BasisConstructionError("all knot spans are empty")
    for i in nonempty:
        b[:, i] = (x >= t[i]) & (x < t[i + 1])
    b[x == t[-1], nonempty[-1]] = 1.0

    for k in range(1, degree + 1):
        nb = len(t) - 1 - k
        new = np.zeros((x.shape[0], nb))
        for i in range(nb):
            d1 = t[i + k] - t[i]
            if d1 > 0.0:
                new[:, i] += (x - t[i]) / d1 * b[:, i]
            d2 = t[i + k + 1] - t[i + 1]
            if d2 > 0.0:
                new[:, i] += (t[i + k + 1] - x) / d2 * b[:, i + 1]
        b = new
    return b[:, :n_basis]


def quantile_knot_vector(
    values: np.ndarray, n_basis: int, degree: int
) -> np.ndarray:
    """Clamped knot vector on [0, 1] with interior knots at equispaced quantiles.

    The boundary knot is repeated to full multiplicity (degree + 1) so the
    basis is a partition of unity on the whole interval and never
    extrapolates.  Tied interior knots are deduplicated with a warning; if
    none survive while some were requested, construction fails.
    """
    n_interior = n_basis - degree - 1
    interior = np.empty(0)
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(np.asarray(values, dtype=float), probs)
        interior = np.unique(interior)
        interior = interior[(interior > 0.0) & (interior < 1.0)]
        if interior.size < n_interior:
            warnings.warn(
                f"deduplicated interior knots: kept {interior.size} of "
                f"{n_interior} requested",
                stacklevel=2,
            )
        if interior.size == 0:
            raise BasisConstructionError(
                "no valid interior knots survive deduplication"
            )
    return np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )


class BSplineBasis:
    """Fitted basis: scaler + per-dimension knot vectors + combination rule.

    Instances are immutable after construction and safe for concurrent
    evaluation.  Calling the basis on raw states returns the (N, L) feature
    matrix.
    """

    def __init__(self, scaler: StateScaler, knots: Sequence[np.ndarray], spec: SplineSpec):
        self.scaler = scaler
        self.knots = [np.asarray(k, dtype=float) for k in knots]
        self.spec = spec
        self._dim_sizes = [len(k) - spec.degree - 1 for k in self.knots]
        if spec.tensor_product:
            self.n_features = int(np.prod(self._dim_sizes))
        else:
            self.n_features = int(np.sum(self._dim_sizes))

    @property
    def state_dim(self) -> int:
        return len(self.knots)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        z = self.scaler.transform(states)
        if z.shape[1] != self.state_dim:
            raise ShapeError("state dimension mismatch")
        per_dim = [
            cox_de_boor_design(z[:, j], self.knots[j], self.spec.degree)
            for j in range(self.state_dim)
        ]
        if not self.spec.tensor_product:
            return np.concatenate(per_dim, axis=1)
        out = per_dim[0]
        for mat in per_dim[1:]:
            out = np.einsum("ni,nj->nij", out, mat).reshape(out.shape[0], -1)
        return out

    def to_json(self) -> str:
        """Serialize the spec (degree, knots, scaler) for exact replay."""
        payload = {
            "degree": self.spec.degree,
            "bases_per_dim": self.spec.bases_per_dim,
            "tensor_product": self.spec.tensor_product,
            "boundary_multiplicity": self.spec.degree + 1,
            "knots": [k.tolist() for k in self.knots],
            "scaler_lo": self.scaler.lo.tolist(),
            "scaler_hi": self.scaler.hi.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BSplineBasis":
        payload = json.loads(text)
        spec = SplineSpec(
            degree=payload["degree"],
            bases_per_dim=payload["bases_per_dim"],
            tensor_product=payload["tensor_product"],
        )
        scaler = StateScaler(
            lo=np.asarray(payload["scaler_lo"], dtype=float),
            hi=np.asarray(payload["scaler_hi"], dtype=float),
        )
        return cls(scaler, [np.asarray(k) for k in payload["knots"]], spec)


def build_basis(
    states: np.ndarray, spec: SplineSpec = SplineSpec(), scaler: StateScaler | None = None
) -> BSplineBasis:
    """Fit scaler and quantile knots on training states and build the basis."""
    x = np.atleast_2d(np.asarray(states, dtype=float))
    if scaler is None:
        scaler = fit_scaler(x)
    z = scaler.transform(x)
    knots = [
        quantile_knot_vector(z[:, j], spec.bases_per_dim, spec.degree)
        for j in range(z.shape[1])
    ]
    return BSplineBasis(scaler, knots, spec)


class IndicatorBasis:
    """Exact one-hot basis over integer-coded states (for tabular oracles)."""

    def __init__(self, n_states: int):
        self.n_states = int(n_states)
        self.n_features = self.n_states

    def __call__(self, states: np.ndarray) -> np.ndarray:
        idx = np.asarray(states, dtype=float).reshape(-1).astype(np.int64)
        if np.any((idx < 0) | (idx >= self.n_states)):
            raise ShapeError("state index outside indicator range")
        out = np.zeros((idx.shape[0], self.n_states))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out


@dataclass
class SieveDesign:
    """Per-transition feature system consumed by the value estimators.

    ``xi`` holds the block one-hot features of (S_t, A_t); ``u_next`` the
    policy-weighted features of S_{t+1} (zero rows where unobserved);
    ``rewards`` R_{t+1} (zero where unobserved); ``eta`` the response
    indicator of the (reward, next state) pair.
    """

    xi: np.ndarray
    u_next: np.ndarray
    rewards: np.ndarray
    eta: np.ndarray
    n_trajectories: int
    horizon: int
    n_actions: int
    n_basis: int

    def __len__(self) -> int:
        return self.xi.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_trajectories * self.horizon


def action_block_features(
    phi: np.ndarray, actions: np.ndarray, n_actions: int
) -> np.ndarray:
    """Scatter basis rows into per-action blocks: xi(s, a)."""
    n, L = phi.shape
    out = np.zeros((n, n_actions * L))
    for a in range(n_actions):
        mask = actions == a
        out[mask, a * L : (a + 1) * L] = phi[mask]
    return out


def policy_weighted_features(
    phi: np.ndarray, probs: np.ndarray
) -> np.ndarray:
    """Stack basis rows weighted by action probabilities: U_pi(s)."""
    n, L = phi.shape
    n_actions = probs.shape[1]
    out = np.empty((n, n_actions * L))
    for a in range(n_actions):
        out[:, a * L : (a + 1) * L] = phi * probs[:, a : a + 1]
    return out


def assemble_design(
    table: TransitionTable,
    basis: Callable[[np.ndarray], np.ndarray],
    policy: Callable[[np.ndarray], np.ndarray],
    n_actions: int = 2,
) -> SieveDesign:
    """Build the estimator design from a transition table.

    Row order follows the table (trajectory-major, time-minor), so the
    assembly is permutation-equivariant in the transitions.
    """
    if len(table) == 0:
        raise DegenerateDataError("empty transition table")
    if np.any((table.a < 0) | (table.a >= n_actions)):
        raise ShapeError("action outside range")
    phi_s = basis(table.s)
    xi = action_block_features(phi_s, table.a, n_actions)
    n_rows, L = phi_s.shape
    u_next = np.zeros((n_rows, n_actions * L))
    rewards = np.zeros(n_rows)
    obs = table.observed
    if np.any(obs):
        phi_next = basis(table.s_next[obs])
        probs = policy(table.s_next[obs])
        u_next[obs] = policy_weighted_features(phi_next, probs)
        rewards[obs] = table.r_next[obs]
    return SieveDesign(
        xi=xi,
        u_next=u_next,
        rewards=rewards,
        eta=table.eta_next.astype(np.int64),
        n_trajectories=table.n_trajectories,
        horizon=table.horizon,
        n_actions=n_actions,
        n_basis=L,
    )
