"""Small tabular MDP with an exact Q-function solve.

Used as an oracle: with an indicator basis (one feature per state) the sieve
estimators must reproduce the directly solved Q up to numerical tolerance.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from .env import Trajectory, Transition
from .exceptions import ConfigurationError, NumericalError
from .rng import STAGE_DYNAMICS, substream


@dataclass(frozen=True)
class TabularOracleEnv:
    """Finite MDP: transition tensor P[s, a, s'], reward table r[s, a]."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ConfigurationError("transition must be (S, A, S), reward (S, A)")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        row_sums = p.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > 1e-12:
            raise ConfigurationError("each transition row must sum to 1 within 1e-12")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def oracle_q(env: TabularOracleEnv, policy_table: np.ndarray) -> np.ndarray:
    """Exact Q^pi via direct linear solve of Q = r + gamma * P * Pi * Q.

    ``policy_table`` is an (S, A) matrix of action probabilities.  Returns an
    (S, A) table.  Raises NumericalError if the linear system is singular.
    """
    p, r, gamma = env.transition, env.reward, env.gamma
    n_s, n_a = env.n_states, env.n_actions
    pi = np.asarray(policy_table, dtype=float)
    if pi.shape != (n_s, n_a):
        raise ConfigurationError("policy table must be (S, A)")
    # M[(s,a), (s',a')] = P[s, a, s'] * pi[s', a']
    m = np.einsum("kas,sb->kasb", p, pi).reshape(n_s * n_a, n_s * n_a)
    lhs = np.eye(n_s * n_a) - gamma * m
    try:
        q = np.linalg.solve(lhs, r.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Bellman system is singular: {exc}") from exc
    return q.reshape(n_s, n_a)


def tabular_policy(policy_table: np.ndarray):
    """Wrap an (S, A) probability table as a batch policy over index states."""
    table = np.asarray(policy_table, dtype=float)

    def policy(states: np.ndarray) -> np.ndarray:
        idx = np.asarray(states, dtype=float).reshape(-1).astype(np.int64)
        return table[idx]

    return policy


def simulate_tabular(
    env: TabularOracleEnv,
    n: int,
    T: int,
    seed: int = 0,
    behavior: np.ndarray | None = None,
) -> List[Trajectory]:
    """Sample complete trajectories; states are stored as length-1 vectors.

    ``behavior`` defaults to uniform over actions.
    """
    if behavior is None:
        behavior = np.full((env.n_states, env.n_actions), 1.0 / env.n_actions)
    behavior = np.asarray(behavior, dtype=float)
    cum_b = np.cumsum(behavior, axis=1)
    cum_p = np.cumsum(env.transition, axis=2)
    out = []
    for i in range(n):
        g = substream(seed, STAGE_DYNAMICS, i)
        s = int(g.integers(env.n_states))
        rows = []
        for _ in range(T):
            a = int(np.searchsorted(cum_b[s], g.random(), side="right"))
            s_next = int(np.searchsorted(cum_p[s, a], g.random(), side="right"))
            rows.append(Transition([float(s)], a, env.reward[s, a], [float(s_next)]))
            s = s_next
        out.append(Trajectory(rows, dropout_time=T))
    return out
