"""Synthetic 2-D linear MDP with monotone dropout.

The environment: states are 2-vectors, actions binary.  Dynamics

    S1' = (2A - 1) * S1 + e1,      e1 ~ N(0, 0.25)
    S2' = (1 - 2A) * S2 + e2,      e2 ~ N(0, 0.25)
    R   = 2*S1' + S2' + 0.5*S2 - 0.25*(2A - 1) + e3,   e3 ~ N(0, 1e-4)

with initial states drawn from the standard bivariate normal and a
Bernoulli(0.5) behavior policy.  Dropout is monotone: a trajectory that
drops out right after action ``A_t`` has its ``(R_{t+1}, S_{t+1})``
unobserved and terminates.  The first two response indicators are always 1
(no-dropout warm-up), so the hazard applies to ``eta_{t+1}`` for ``t >= 1``.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, StateError
from .rng import (
    STAGE_DYNAMICS,
    STAGE_DROPOUT,
    STAGE_MONTE_CARLO,
    STAGE_REFERENCE,
    substream,
)

STATE_DIM = 2
N_ACTIONS = 2

#: First time index at which the dropout hazard applies (eta_0 = eta_1 = 1).
DROPOUT_START = 1

# Hazard coefficients psi = (intercept, coef on S1_t, coef on reward).
PSI_SETTING_1 = (2.0, 0.08, -0.15)
PSI_SETTING_2 = (2.0, 0.15, -0.3)


@dataclass(frozen=True)
class DropoutSpec:
    """Monotone dropout hazard ``lambda = 1 / (1 + exp(psi @ x))``.

    ``kind='mnar'`` uses features x = (1, S1_t, R_{t+1}); the hazard depends
    on the next (possibly unobserved) reward.  ``kind='mar'`` uses
    x = (1, S1_t, R_t), the reward already observed at time t.
    """

    kind: str
    psi: tuple = PSI_SETTING_2

    def __post_init__(self):
        if self.kind not in ("mar", "mnar"):
            raise ConfigurationError(f"unknown dropout kind {self.kind!r}")
        if len(self.psi) != 3:
            raise ConfigurationError("psi must have 3 components")


@dataclass(frozen=True)
class EnvConfig:
    """Simulation configuration.

    ``transition_scale`` is the magnitude of the state-transition coefficient:
    1.0 gives the marginally non-contracting dynamics exactly as displayed in
    the problem statement; 0.75 gives the stationary variant the published
    simulation results correspond to (see the experiment defaults).
    """

    n: int
    T: int
    gamma: float = 0.9
    seed: int = 0
    dropout: Optional[DropoutSpec] = None
    transition_scale: float = 1.0

    def validate(self):
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if self.T < 2:
            raise ConfigurationError("T must be >= 2")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if self.transition_scale <= 0.0:
            raise ConfigurationError("transition_scale must be positive")
        return self


class Transition:
    """One observed tuple (S_t, A_t, R_{t+1}, S_{t+1}).

    When ``observed`` is False the reward and next state exist internally
    (for simulation diagnostics) but are gated: attribute access raises, so
    no estimator can read them by accident.
    """

    __slots__ = ("s", "a", "observed", "_r", "_s_next")

    def __init__(self, s, a, r, s_next, observed=True):
        self.s = np.asarray(s, dtype=float)
        self.a = int(a)
        self.observed = bool(observed)
        self._r = float(r)
        self._s_next = np.asarray(s_next, dtype=float)

    @property
    def r(self) -> float:
        if not self.observed:
            raise StateError("reward is unobserved for this transition")
        return self._r

    @property
    def s_next(self) -> np.ndarray:
        if not self.observed:
            raise StateError("next state is unobserved for this transition")
        return self._s_next

    def __repr__(self):
        tail = f"r={self._r:.4g}" if self.observed else "unobserved"
        return f"Transition(a={self.a}, {tail})"


@dataclass
class Trajectory:
    """Transitions of one unit plus its dropout time C (C = T if complete)."""

    transitions: List[Transition]
    dropout_time: int

    @property
    def complete(self) -> bool:
        return all(tr.observed for tr in self.transitions)

    def validate_monotone(self) -> bool:
        """True iff missingness is monotone: only the last row may be unobserved."""
        flags = [tr.observed for tr in self.transitions]
        seen_missing = False
        for f in flags:
            if seen_missing:
                return False
            if not f:
                seen_missing = True
        return True


def target_policy(states: np.ndarray) -> np.ndarray:
    """Deterministic evaluation policy: action 1 iff s1 + s2 > 0 (strict).

    Returns an (N, 2) array of action probabilities; the boundary
    s1 + s2 = 0 maps to action 0 so the policy is deterministic everywhere.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    take_one = (states[:, 0] + states[:, 1] > 0).astype(float)
    return np.column_stack([1.0 - take_one, take_one])


def _draw_trajectory_noise(seed: int, index: int, T: int):
    g = substream(seed, STAGE_DYNAMICS, index)
    s0 = g.normal(size=STATE_DIM)
    u_action = g.random(T)
    eps = g.normal(0.0, 0.5, size=(T, STATE_DIM))
    eps_r = g.normal(0.0, 1e-2, size=T)
    return s0, u_action, eps, eps_r


def _simulate_arrays(config: EnvConfig):
    """Simulate complete data as arrays: states (n,T+1,2), actions, rewards."""
    n, T = config.n, config.T
    s0 = np.empty((n, STATE_DIM))
    u_action = np.empty((n, T))
    eps = np.empty((n, T, STATE_DIM))
    eps_r = np.empty((n, T))
    for i in range(n):
        s0[i], u_action[i], eps[i], eps_r[i] = _draw_trajectory_noise(
            config.seed, i, T
        )
    states = np.empty((n, T + 1, STATE_DIM))
    states[:, 0] = s0
    actions = (u_action < 0.5).astype(np.int64)
    rewards = np.empty((n, T))
    rho = config.transition_scale
    for t in range(T):
        a = actions[:, t]
        sign = 2.0 * a - 1.0
        s1 = rho * sign * states[:, t, 0] + eps[:, t, 0]
        s2 = -rho * sign * states[:, t, 1] + eps[:, t, 1]
        states[:, t + 1, 0] = s1
        states[:, t + 1, 1] = s2
        rewards[:, t] = 2.0 * s1 + s2 + 0.5 * states[:, t, 1] - 0.25 * sign + eps_r[:, t]
    return states, actions, rewards


def _wrap_trajectories(states, actions, rewards, dropout_times):
    n, T = actions.shape
    out = []
    for i in range(n):
        c = int(dropout_times[i])
        n_rows = T if c >= T else c + 1
        rows = [
            Transition(
                states[i, t],
                actions[i, t],
                rewards[i, t],
                states[i, t + 1],
                observed=(t < c or c >= T),
            )
            for t in range(n_rows)
        ]
        out.append(Trajectory(rows, dropout_time=min(c, T)))
    return out


def generate_complete(config: EnvConfig) -> List[Trajectory]:
    """Generate ``config.n`` fully observed trajectories of length ``config.T``.

    Identical config (including seed) yields bit-identical data; trajectory i
    owns stream ``(seed, STAGE_DYNAMICS, i)`` so its draws do not depend on n.
    """
    config.validate()
    states, actions, rewards = _simulate_arrays(config)
    return _wrap_trajectories(states, actions, rewards, np.full(config.n, config.T))


def dropout_hazard(spec: DropoutSpec, s1_t, reward) -> np.ndarray:
    """Hazard ``1 / (1 + exp(psi0 + psi1*s1 + psi2*r))`` for given features.

    ``reward`` is R_{t+1} under MNAR and R_t under MAR; the caller supplies
    whichever the spec prescribes.
    """
    p0, p1, p2 = spec.psi
    idx = p0 + p1 * np.asarray(s1_t, dtype=float) + p2 * np.asarray(reward, dtype=float)
    return 1.0 / (1.0 + np.exp(idx))


def apply_dropout(
    trajectories: Sequence[Trajectory],
    spec: Optional[DropoutSpec],
    seed: int,
) -> List[Trajectory]:
    """Apply monotone dropout to complete trajectories.

    For t >= DROPOUT_START the indicator eta_{t+1} is Bernoulli(1 - lambda_t);
    the first failure truncates the trajectory, keeping the drop-step row with
    its reward/next state flagged unobserved.  ``spec=None`` is the identity.
    """
    if spec is None:
        return list(trajectories)
    if not all(tr.complete for tr in trajectories):
        raise StateError("dropout has already been applied to these trajectories")

    n = len(trajectories)
    T = len(trajectories[0].transitions)
    states = np.stack([[r.s for r in tr.transitions] + [tr.transitions[-1].s_next]
                       for tr in trajectories])
    actions = np.array([[r.a for r in tr.transitions] for tr in trajectories])
    rewards = np.array([[r.r for r in tr.transitions] for tr in trajectories])

    hazards = np.zeros((n, T))
    for t in range(DROPOUT_START, T):
        if spec.kind == "mnar":
            hazards[:, t] = dropout_hazard(spec, states[:, t, 0], rewards[:, t])
        else:
            hazards[:, t] = dropout_hazard(spec, states[:, t, 0], rewards[:, t - 1])

    u = np.empty((n, T))
    for i in range(n):
        u[i] = substream(seed, STAGE_DROPOUT, i).random(T)
    drops = u < hazards
    dropout_times = np.where(drops.any(axis=1), drops.argmax(axis=1), T)
    return _wrap_trajectories(states, actions, rewards, dropout_times)


def _rollout_batch(policy, gamma, horizon, seed, batch_index, size, transition_scale):
    """Discounted returns of one batch of rollouts (its own stream)."""
    g = substream(seed, STAGE_MONTE_CARLO, batch_index)
    s = g.normal(size=(size, STATE_DIM))
    total = np.zeros(size)
    disc = 1.0
    for _ in range(horizon):
        probs = policy(s)
        u = g.random(size)
        a = (u >= probs[:, 0]).astype(np.int64)
        eps = g.normal(0.0, 0.5, size=(size, STATE_DIM))
        eps_r = g.normal(0.0, 1e-2, size=size)
        sign = 2.0 * a - 1.0
        s1 = transition_scale * sign * s[:, 0] + eps[:, 0]
        s2 = -transition_scale * sign * s[:, 1] + eps[:, 1]
        r = 2.0 * s1 + s2 + 0.5 * s[:, 1] - 0.25 * sign + eps_r
        total += disc * r
        disc *= gamma
        s = np.column_stack([s1, s2])
    return total


MC_BATCH = 10_000


def monte_carlo_truth(
    policy: Callable[[np.ndarray], np.ndarray],
    gamma: float,
    n_rollouts: int = 100_000,
    horizon: int = 200,
    seed: int = 0,
    transition_scale: float = 1.0,
    return_se: bool = False,
):
    """Monte Carlo estimate of the integrated policy value over S0 ~ N(0, I).

    Rollouts are processed in fixed batches of ``MC_BATCH``, each batch with
    its own stream, so the estimate is invariant to how batches are reduced
    and the first batches are reproducible when ``n_rollouts`` grows.
    """
    if n_rollouts < 1:
        raise ConfigurationError("n_rollouts must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError("gamma must lie in [0, 1)")
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    total = 0.0
    total_sq = 0.0
    done = 0
    b = 0
    while done < n_rollouts:
        size = min(MC_BATCH, n_rollouts - done)
        returns = _rollout_batch(
            policy, gamma, horizon, seed, b, size, transition_scale
        )
        total += returns.sum()
        total_sq += np.square(returns).sum()
        done += size
        b += 1
    value = total / n_rollouts
    if not return_se:
        return value
    var = max(total_sq / n_rollouts - value**2, 0.0)
    return value, float(np.sqrt(var / n_rollouts))


REFERENCE_BATCH = 5_000


def sample_reference_states(seed: int, n: int) -> np.ndarray:
    """Sample n states from the reference distribution (standard normal).

    Batched streams: the first k*REFERENCE_BATCH states are identical for any
    larger n, so half/full reference averages share a common prefix.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    chunks = []
    done = 0
    b = 0
    while done < n:
        size = min(REFERENCE_BATCH, n - done)
        g = substream(seed, STAGE_REFERENCE, b)
        chunks.append(g.normal(size=(size, STATE_DIM)))
        done += size
        b += 1
    return np.concatenate(chunks, axis=0)
