"""Exact tabular references: value iteration on deterministic sparse-reward
MDPs, the value-monotonicity check along greedy trajectories, and the
discounted value identity between reward-free timesteps.

Deterministic dynamics make the discounted identity exact, so these serve
as machine-precision oracles for the learned value function and for the
replanning rule's premise: along an optimal trajectory toward the goal the
state value never decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maze import MazeSpec, bfs_distance_field

__all__ = [
    "TabularMdp",
    "value_iteration",
    "greedy_trajectory",
    "check_monotone",
    "exact_relation_check",
    "maze_to_mdp",
    "random_connected_maze",
    "oracle_value_by_cell",
]


@dataclass(frozen=True)
class TabularMdp:
    """Deterministic MDP with 0/1 rewards granted only on entering a goal.

    transitions[s, a] is the successor state; terminal states are absorbing
    with zero reward.
    """

    transitions: np.ndarray  # (S, A) int
    rewards: np.ndarray  # (S, A) float, values in {0, 1}
    gamma: float
    terminal: np.ndarray  # (S,) bool

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.int64)
        r = np.asarray(self.rewards, dtype=np.float64)
        term = np.asarray(self.terminal, dtype=bool)
        object.__setattr__(self, "transitions", t)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "terminal", term)
        if t.shape != r.shape:
            raise ValueError(f"transitions {t.shape} vs rewards {r.shape}")
        if not np.isin(r, (0.0, 1.0)).all():
            raise ValueError("rewards must be 0 or 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        entering_goal = term[t]
        if np.any((r == 1.0) & ~entering_goal):
            raise ValueError("reward 1 on a transition not entering a terminal")
        if np.any(r[term, :] != 0.0) or np.any(t[term, :] != np.arange(len(term))[term, None]):
            raise ValueError("terminal states must be absorbing with zero reward")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_sweeps: int = 1_000_000) -> np.ndarray:
    """Iterate V(s) <- max_a [r(s, a) + gamma * V(s')] to sup-norm < tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        backed_up = mdp.rewards + mdp.gamma * v[mdp.transitions]
        new_v = backed_up.max(axis=1)
        new_v[mdp.terminal] = 0.0
        delta = float(np.max(np.abs(new_v - v)))
        v = new_v
        if delta < tol:
            return v
    raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")


def greedy_trajectory(mdp: TabularMdp, v: np.ndarray, start: int) -> list[int]:
    """Follow argmax_a [r + gamma * V(s')] until a terminal or a revisit."""
    states = [start]
    s = start
    seen = {start}
    for _ in range(mdp.n_states + 1):
        if mdp.terminal[s]:
            break
        scores = mdp.rewards[s] + mdp.gamma * v[mdp.transitions[s]]
        s = int(mdp.transitions[s, int(np.argmax(scores))])
        states.append(s)
        if s in seen:  # cycle: state cannot reach the goal
            break
        seen.add(s)
    return states


def check_monotone(mdp: TabularMdp, v: np.ndarray) -> list[tuple[int, int, float, float]]:
    """Violations of V(s_k) <= V(s_{k+1}) along every greedy trajectory.

    Pairs whose successor is terminal are the episode boundary and are not
    compared.  An empty list is the expected outcome on any deterministic
    sparse-reward instance.
    """
    violations = []
    for start in range(mdp.n_states):
        if mdp.terminal[start]:
            continue
        traj = greedy_trajectory(mdp, v, start)
        for k in range(len(traj) - 1):
            nxt = traj[k + 1]
            if mdp.terminal[nxt]:
                break
            if v[traj[k]] > v[nxt] + 1e-12:
                violations.append((start, k, float(v[traj[k]]), float(v[nxt])))
    return violations


def exact_relation_check(
    mdp: TabularMdp,
    v: np.ndarray,
    trajectory: list[int],
    i: int,
    j: int,
) -> float:
    """|V(s_i) - gamma^(j-i) * V(s_j)| along a reward-free optimal stretch."""
    if not (0 <= i <= j < len(trajectory)):
        raise IndexError(f"need 0 <= i <= j < len(trajectory), got {i}, {j}")
    # reward 1 is granted only on entering a terminal, so a reward-free
    # stretch is exactly one with no terminal after position i
    if any(mdp.terminal[s] for s in trajectory[i + 1 : j + 1]):
        raise ValueError(f"reward collected between steps {i} and {j}")
    return float(abs(v[trajectory[i]] - mdp.gamma ** (j - i) * v[trajectory[j]]))


# ---------------------------------------------------------------------------
# maze discretization / fuzz instances
# ---------------------------------------------------------------------------

_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def maze_to_mdp(spec: MazeSpec, gamma: float) -> tuple[TabularMdp, list[tuple[int, int]]]:
    """Cell-level MDP of a maze: 4 moves, blocked moves stay put, reward 1
    on entering the goal cell, goal absorbing.  Returns (mdp, cell order)."""
    cells = spec.open_cells()
    index = {c: k for k, c in enumerate(cells)}
    n = len(cells)
    transitions = np.zeros((n, 4), dtype=np.int64)
    rewards = np.zeros((n, 4))
    terminal = np.zeros(n, dtype=bool)
    goal = index[spec.goal_cell]
    terminal[goal] = True
    for k, (r, c) in enumerate(cells):
        if terminal[k]:
            transitions[k, :] = k
            continue
        for a, (dr, dc) in enumerate(_MOVES):
            nr, nc = r + dr, c + dc
            if 0 <= nr < spec.rows and 0 <= nc < spec.cols and not spec.walls[nr, nc]:
                nk = index[(nr, nc)]
            else:
                nk = k
            transitions[k, a] = nk
            rewards[k, a] = 1.0 if nk == goal else 0.0
    return TabularMdp(transitions=transitions, rewards=rewards, gamma=gamma, terminal=terminal), cells


def random_connected_maze(
    rng: np.random.Generator,
    rows: int = 5,
    cols: int = 5,
    wall_prob: float = 0.25,
) -> MazeSpec:
    """Rejection-sample a maze whose open cells are mutually reachable."""
    while True:
        walls = rng.random((rows, cols)) < wall_prob
        open_cells = np.argwhere(~walls)
        if len(open_cells) < 2:
            continue
        goal = tuple(open_cells[int(rng.integers(len(open_cells)))])
        starts = tuple(tuple(c) for c in open_cells if tuple(c) != goal)
        if not starts:
            continue
        try:
            return MazeSpec(walls=walls, goal_cell=goal, start_cells=starts)
        except ValueError:
            continue


def oracle_value_by_cell(spec: MazeSpec, gamma: float = 0.9) -> dict[tuple[int, int], float]:
    """Exact optimal value per open cell; equals gamma**bfs_distance."""
    mdp, cells = maze_to_mdp(spec, gamma)
    v = value_iteration(mdp)
    return {cell: float(v[k]) for k, cell in enumerate(cells)}
