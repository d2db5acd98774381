"""Flat transition table and dataset persistence.

Estimators and propensity fits work on a column-oriented view of the
trajectories: one row per transition with an observed (S_t, A_t).  Rows whose
(R_{t+1}, S_{t+1}) are unobserved carry ``eta_next = 0`` and NaN payloads;
those payload cells must never enter an estimator sum.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .env import DROPOUT_START, DropoutSpec, EnvConfig, Trajectory, Transition
from .exceptions import ConfigurationError


@dataclass
class TransitionTable:
    """Column view of a trajectory dataset.

    ``r_prev`` holds R_t (the reward observed on arrival at time t); it is
    NaN at t = 0 and is what ignorable dropout models may condition on.
    """

    traj: np.ndarray        # trajectory index, int
    t: np.ndarray           # time index of the transition, int
    s: np.ndarray           # (N, d) state S_t
    a: np.ndarray           # action A_t, int
    eta_next: np.ndarray    # 1 if (R_{t+1}, S_{t+1}) observed
    r_next: np.ndarray      # R_{t+1}, NaN when unobserved
    s_next: np.ndarray      # (N, d) S_{t+1}, NaN rows when unobserved
    r_prev: np.ndarray      # R_t, NaN at t = 0
    n_trajectories: int
    horizon: int

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def n_total(self) -> int:
        """Denominator n*T used by all empirical averages."""
        return self.n_trajectories * self.horizon

    @property
    def at_risk(self) -> np.ndarray:
        """Rows governed by the dropout hazard (past the no-dropout warm-up)."""
        return self.t >= DROPOUT_START

    @property
    def observed(self) -> np.ndarray:
        return self.eta_next == 1


def flatten_trajectories(
    trajectories: Sequence[Trajectory], horizon: Optional[int] = None
) -> TransitionTable:
    """Stack trajectories into a TransitionTable (trajectory-major, time-minor).

    ``horizon`` is the designed T used in the n*T normalization; it defaults
    to the longest trajectory present, which matches T whenever at least one
    unit survived to the end.
    """
    if len(trajectories) == 0:
        raise ConfigurationError("empty dataset")
    if horizon is None:
        horizon = max(len(tr.transitions) for tr in trajectories)
    d = trajectories[0].transitions[0].s.shape[0]
    traj, t_idx, s, a, eta, r_next, s_next, r_prev = [], [], [], [], [], [], [], []
    for i, tr in enumerate(trajectories):
        prev_reward = np.nan
        for t, row in enumerate(tr.transitions):
            traj.append(i)
            t_idx.append(t)
            s.append(row.s)
            a.append(row.a)
            if row.observed:
                eta.append(1)
                r_next.append(row.r)
                s_next.append(row.s_next)
            else:
                eta.append(0)
                r_next.append(np.nan)
                s_next.append(np.full(d, np.nan))
            r_prev.append(prev_reward)
            prev_reward = row.r if row.observed else np.nan
    return TransitionTable(
        traj=np.asarray(traj, dtype=np.int64),
        t=np.asarray(t_idx, dtype=np.int64),
        s=np.asarray(s, dtype=float),
        a=np.asarray(a, dtype=np.int64),
        eta_next=np.asarray(eta, dtype=np.int64),
        r_next=np.asarray(r_next, dtype=float),
        s_next=np.asarray(s_next, dtype=float),
        r_prev=np.asarray(r_prev, dtype=float),
        n_trajectories=len(trajectories),
        horizon=horizon,
    )


def save_dataset(
    trajectories: Sequence[Trajectory],
    path: str | Path,
    config: Optional[EnvConfig] = None,
) -> None:
    """Write one CSV row per transition plus a JSON sidecar with the config.

    Columns: traj_id, t, s1..sd, a, r, s1_next..sd_next, eta_next.  Missing
    fields are written as empty cells.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = trajectories[0].transitions[0].s.shape[0]
    s_cols = [f"s{k + 1}" for k in range(d)]
    sn_cols = [f"s{k + 1}_next" for k in range(d)]
    header = ["traj_id", "t", *s_cols, "a", "r", *sn_cols, "eta_next"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, tr in enumerate(trajectories):
            for t, row in enumerate(tr.transitions):
                if row.observed:
                    r_val = repr(row.r)
                    sn_vals = [repr(x) for x in row.s_next]
                    eta = 1
                else:
                    r_val = ""
                    sn_vals = [""] * d
                    eta = 0
                writer.writerow(
                    [i, t, *[repr(x) for x in row.s], row.a, r_val, *sn_vals, eta]
                )
    sidecar = {"state_dim": d, "n_trajectories": len(trajectories)}
    if config is not None:
        sidecar["env"] = {
            "n": config.n,
            "T": config.T,
            "gamma": config.gamma,
            "seed": config.seed,
        }
        if config.dropout is not None:
            sidecar["dropout"] = {
                "kind": config.dropout.kind,
                "psi": list(config.dropout.psi),
            }
        else:
            sidecar["dropout"] = None
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_dataset(path: str | Path) -> tuple[List[Trajectory], dict]:
    """Read a dataset CSV (+ sidecar if present); inverse of :func:`save_dataset`."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for c in header if c.startswith("s") and not c.endswith("_next"))
        by_traj: dict[int, list] = {}
        for rec in reader:
            i = int(rec[0])
            s = [float(x) for x in rec[2 : 2 + d]]
            a = int(rec[2 + d])
            r_raw = rec[3 + d]
            sn_raw = rec[4 + d : 4 + 2 * d]
            eta = int(rec[4 + 2 * d])
            if eta == 1:
                row = Transition(s, a, float(r_raw), [float(x) for x in sn_raw])
            else:
                row = Transition(s, a, np.nan, [np.nan] * d, observed=False)
            by_traj.setdefault(i, []).append((int(rec[1]), row))
    trajectories = []
    for i in sorted(by_traj):
        rows = [row for _, row in sorted(by_traj[i], key=lambda x: x[0])]
        if rows[-1].observed:
            c = len(rows)
        else:
            c = len(rows) - 1
        trajectories.append(Trajectory(rows, dropout_time=c))
    return trajectories, sidecar
