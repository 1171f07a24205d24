"""Sparse-reward continuous point maze and offline dataset generation.

The maze is a grid of open/wall cells.  A point mass moves under clipped
2-D forces with semi-implicit Euler physics and axis-separated wall
collisions; reward is 1 exactly when the goal disk is reached, else 0.
A BFS waypoint planner plus PD tracking controller generates offline
trajectories, optionally corrupted with Gaussian action noise so the data
contains suboptimal segments.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng

__all__ = [
    "MazeSpec",
    "EnvState",
    "Trajectory",
    "OfflineDataset",
    "Segments",
    "five_by_five",
    "nine_by_nine_corridor",
    "corridor",
    "MAZE_VARIANTS",
    "step",
    "sample_start",
    "goal_center",
    "cell_center",
    "bfs_distance_field",
    "waypoint_planner",
    "generate_dataset",
    "slice_segments",
    "save_dataset",
    "load_dataset",
    "normalize_obs",
    "denormalize_pos",
]

Cell = tuple[int, int]  # (row, col)

_MAGIC = b"DIARDS1\x00"
_VERSION = 1


@dataclass(frozen=True)
class MazeSpec:
    """Immutable maze description: geometry, physics, and samplers."""

    walls: np.ndarray  # bool (rows, cols); True = wall
    goal_cell: Cell
    start_cells: tuple[Cell, ...]
    cell_size: float = 1.0
    goal_radius: float = 0.35
    max_episode_steps: int = 150
    dt: float = 0.1
    friction: float = 0.05
    v_max: float = 2.0

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "goal_cell", tuple(self.goal_cell))
        object.__setattr__(
            self, "start_cells", tuple(tuple(c) for c in self.start_cells)
        )
        if not (~walls).any():
            raise ValueError("maze has no open cells")
        if walls[self.goal_cell]:
            raise ValueError(f"goal cell {self.goal_cell} is a wall")
        for c in self.start_cells:
            if walls[c]:
                raise ValueError(f"start cell {c} is a wall")
        reachable = _reachable_from(walls, self.goal_cell)
        open_cells = {(r, c) for r, c in zip(*np.nonzero(~walls))}
        if reachable != open_cells:
            stranded = sorted(open_cells - reachable)
            raise ValueError(f"open cells unreachable from goal: {stranded}")

    @property
    def rows(self) -> int:
        return self.walls.shape[0]

    @property
    def cols(self) -> int:
        return self.walls.shape[1]

    def open_cells(self) -> list[Cell]:
        return [(int(r), int(c)) for r, c in np.argwhere(~self.walls)]

    def to_bytes(self) -> bytes:
        """Canonical binary encoding (also the dataset/checkpoint block)."""
        parts = [struct.pack("<II", self.rows, self.cols)]
        parts.append(np.packbits(self.walls.reshape(-1)).tobytes())
        parts.append(struct.pack("<II", *self.goal_cell))
        parts.append(
            struct.pack(
                "<5d",
                self.cell_size,
                self.goal_radius,
                self.dt,
                self.friction,
                self.v_max,
            )
        )
        parts.append(struct.pack("<I", self.max_episode_steps))
        parts.append(struct.pack("<I", len(self.start_cells)))
        for r, c in self.start_cells:
            parts.append(struct.pack("<II", r, c))
        return b"".join(parts)

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _reachable_from(walls: np.ndarray, origin: Cell) -> set[Cell]:
    rows, cols = walls.shape
    seen = {origin}
    queue = deque([origin])
    while queue:
        r, c = queue.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < rows and 0 <= nc < cols and not walls[nr, nc]:
                if (nr, nc) not in seen:
                    seen.add((nr, nc))
                    queue.append((nr, nc))
    return seen


def _spec_from_grid(grid: list[str], goal: Cell, **kwargs) -> MazeSpec:
    walls = np.array([[ch == "#" for ch in row] for row in grid])
    starts = [
        (r, c)
        for r in range(walls.shape[0])
        for c in range(walls.shape[1])
        if not walls[r, c] and (r, c) != goal
    ]
    return MazeSpec(walls=walls, goal_cell=goal, start_cells=tuple(starts), **kwargs)


def five_by_five() -> MazeSpec:
    """5x5 maze with a central bar; two routes around it."""
    grid = [
        ".....",
        ".....",
        ".###.",
        ".....",
        ".....",
    ]
    return _spec_from_grid(grid, goal=(0, 2), max_episode_steps=150)


def nine_by_nine_corridor() -> MazeSpec:
    """9x9 serpentine: long corridors force multi-skill horizons."""
    grid = [
        ".........",
        ".........",
        "#######..",
        ".........",
        ".........",
        "..#######",
        ".........",
        ".........",
        ".........",
    ]
    return _spec_from_grid(grid, goal=(0, 0), max_episode_steps=400)


def corridor(length: int = 3) -> MazeSpec:
    """1xN corridor; goal at the right end.  Used by small oracles."""
    grid = ["." * length]
    return _spec_from_grid(grid, goal=(0, length - 1), max_episode_steps=60)


MAZE_VARIANTS = {
    "five_by_five": five_by_five,
    "nine_by_nine_corridor": nine_by_nine_corridor,
}


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvState:
    pos: np.ndarray  # (2,) x, y in length units
    vel: np.ndarray  # (2,) length per time unit

    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])


def cell_center(spec: MazeSpec, cell: Cell) -> np.ndarray:
    r, c = cell
    return np.array([(c + 0.5) * spec.cell_size, (r + 0.5) * spec.cell_size])


def goal_center(spec: MazeSpec) -> np.ndarray:
    return cell_center(spec, spec.goal_cell)


def _blocked(spec: MazeSpec, x: float, y: float) -> bool:
    c = int(np.floor(x / spec.cell_size))
    r = int(np.floor(y / spec.cell_size))
    if not (0 <= r < spec.rows and 0 <= c < spec.cols):
        return True
    return bool(spec.walls[r, c])


def step(spec: MazeSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    """One physics step.  Forces are clipped to [-1, 1] per component.

    Semi-implicit Euler with axis-separated collision: a move that lands the
    point in a blocked cell along one axis is cancelled and that velocity
    component zeroed, so the point slides along walls.
    """
    force = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = state.vel * (1.0 - spec.friction) + force * spec.dt
    speed = float(np.hypot(*vel))
    if speed > spec.v_max:
        vel = vel * (spec.v_max / speed)
    x, y = state.pos
    nx = x + vel[0] * spec.dt
    if _blocked(spec, nx, y):
        nx = x
        vel = np.array([0.0, vel[1]])
    ny = y + vel[1] * spec.dt
    if _blocked(spec, nx, ny):
        ny = y
        vel = np.array([vel[0], 0.0])
    new = EnvState(pos=np.array([nx, ny]), vel=vel)
    reached = float(np.hypot(*(new.pos - goal_center(spec)))) <= spec.goal_radius
    return new, (1.0 if reached else 0.0), reached


def sample_start(spec: MazeSpec, rng: np.random.Generator) -> EnvState:
    """Random start cell with uniform jitter inside it, zero velocity."""
    cell = spec.start_cells[int(rng.integers(len(spec.start_cells)))]
    jitter = rng.uniform(-0.3, 0.3, size=2) * spec.cell_size
    return EnvState(pos=cell_center(spec, cell) + jitter, vel=np.zeros(2))


# ---------------------------------------------------------------------------
# planning / dataset generation
# ---------------------------------------------------------------------------


def bfs_distance_field(spec: MazeSpec, goal: Cell | None = None) -> np.ndarray:
    """Cell-steps-to-goal over open cells; walls get -1."""
    goal = spec.goal_cell if goal is None else tuple(goal)
    dist = np.full(spec.walls.shape, -1, dtype=np.int64)
    dist[goal] = 0
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if (
                0 <= nr < spec.rows
                and 0 <= nc < spec.cols
                and not spec.walls[nr, nc]
                and dist[nr, nc] < 0
            ):
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


def cell_path(
    spec: MazeSpec,
    start: Cell,
    goal: Cell,
    rng: np.random.Generator | None = None,
) -> list[Cell]:
    """A shortest cell path start -> goal; ties broken randomly when an
    rng is supplied (so the dataset mixes equivalent routes)."""
    dist = bfs_distance_field(spec, goal)
    if dist[tuple(start)] < 0:
        raise AssertionError(f"start {start} cannot reach goal {goal}")
    path = [tuple(start)]
    r, c = start
    while (r, c) != tuple(goal):
        options = [
            (nr, nc)
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
            if 0 <= nr < spec.rows
            and 0 <= nc < spec.cols
            and dist[nr, nc] == dist[r, c] - 1
        ]
        pick = options[0] if rng is None else options[int(rng.integers(len(options)))]
        r, c = pick
        path.append(pick)
    return path


@dataclass
class Trajectory:
    states: np.ndarray  # (L+1, 4)
    actions: np.ndarray  # (L, 2)
    rewards: np.ndarray  # (L,)
    success: bool

    def __len__(self) -> int:
        return self.actions.shape[0]


_KP = 1.4
_KD = 0.9
_WAYPOINT_RADIUS = 0.4


def _track_waypoints(
    spec: MazeSpec,
    start: EnvState,
    path: list[Cell],
    rng: np.random.Generator | None,
    noise_level: float,
) -> Trajectory:
    waypoints = [cell_center(spec, c) for c in path[1:]]
    if not waypoints:
        waypoints = [cell_center(spec, path[-1])]
    ends_at_goal = tuple(path[-1]) == spec.goal_cell
    state = start
    states = [state.obs()]
    actions, rewards = [], []
    wp = 0
    for _ in range(spec.max_episode_steps):
        while (
            wp < len(waypoints) - 1
            and float(np.hypot(*(waypoints[wp] - state.pos)))
            < _WAYPOINT_RADIUS * spec.cell_size
        ):
            wp += 1
        if (
            not ends_at_goal
            and wp == len(waypoints) - 1
            and float(np.hypot(*(waypoints[wp] - state.pos))) <= spec.goal_radius
        ):
            break  # endpoint away from the reward goal: arrived, stop
        force = _KP * (waypoints[wp] - state.pos) - _KD * state.vel
        if noise_level > 0.0 and rng is not None:
            force = force + rng.normal(0.0, noise_level, size=2)
        force = np.clip(force, -1.0, 1.0)
        state, reward, done = step(spec, state, force)
        states.append(state.obs())
        actions.append(force)
        rewards.append(reward)
        if done:
            break
    return Trajectory(
        states=np.array(states),
        actions=np.array(actions),
        rewards=np.array(rewards),
        success=bool(rewards and rewards[-1] == 1.0),
    )


def waypoint_planner(
    spec: MazeSpec,
    start: Cell,
    goal: Cell,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Noiseless planned action sequence from start cell to goal cell.

    Replaying the returned actions through ``step`` from the start cell's
    center reaches the goal within the episode limit.
    """
    path = cell_path(spec, start, goal, rng)
    init = EnvState(pos=cell_center(spec, tuple(start)), vel=np.zeros(2))
    traj = _track_waypoints(spec, init, path, None, 0.0)
    final = traj.states[-1, :2]
    at_target = float(np.hypot(*(final - cell_center(spec, tuple(goal))))) <= spec.goal_radius
    # a rollout intercepted by the absorbing reward goal terminated validly
    assert at_target or traj.success, f"planner failed to reach {goal} from {start}"
    return traj.actions


@dataclass
class OfflineDataset:
    trajectories: list[Trajectory]
    spec: MazeSpec
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def success_fraction(self) -> float:
        if not self.trajectories:
            return 0.0
        return float(np.mean([t.success for t in self.trajectories]))


def generate_dataset(
    spec: MazeSpec,
    n_episodes: int,
    noise_level: float,
    seed: int,
    detour_prob: float = 0.3,
    wander_prob: float = 0.4,
) -> OfflineDataset:
    """Planner rollouts from random starts, with Gaussian action noise
    injected so the data includes suboptimal segments.

    Episode mix: direct runs to the goal; with probability ``detour_prob``
    a run routes through a random intermediate cell first; with probability
    ``wander_prob`` the episode only visits two random waypoints and never
    heads for the goal (reward stays 0).  The mix makes the data multimodal
    and forces stitching: reaching the goal from many regions requires
    composing sub-segments of meandering trajectories, and the marginal
    (averaged) action field is not goal-directed.

    Deterministic given the seed: episode i draws from the (seed, i) stream.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if detour_prob + wander_prob > 1.0:
        raise ValueError("detour_prob + wander_prob must be <= 1")
    open_cells = [c for c in spec.open_cells() if c != spec.goal_cell]
    trajectories = []
    for ep in range(n_episodes):
        rng = make_rng(seed, ep)
        state = sample_start(spec, rng)
        start_cell = (
            int(state.pos[1] // spec.cell_size),
            int(state.pos[0] // spec.cell_size),
        )
        kind = rng.random()
        if kind < wander_prob:
            via1 = open_cells[int(rng.integers(len(open_cells)))]
            via2 = open_cells[int(rng.integers(len(open_cells)))]
            path = cell_path(spec, start_cell, via1, rng)
            path = path + cell_path(spec, via1, via2, rng)[1:]
        elif kind < wander_prob + detour_prob:
            via = open_cells[int(rng.integers(len(open_cells)))]
            path = cell_path(spec, start_cell, via, rng)
            path = path + cell_path(spec, via, spec.goal_cell, rng)[1:]
        else:
            path = cell_path(spec, start_cell, spec.goal_cell, rng)
        trajectories.append(_track_waypoints(spec, state, path, rng, noise_level))
    ds = OfflineDataset(trajectories=trajectories, spec=spec)
    ds.metadata = {
        "spec_hash": spec.hash(),
        "seed": int(seed),
        "n_episodes": int(n_episodes),
        "noise_level": float(noise_level),
        "detour_prob": float(detour_prob),
        "wander_prob": float(wander_prob),
        "success_fraction": ds.success_fraction(),
    }
    return ds


# ---------------------------------------------------------------------------
# segment slicing
# ---------------------------------------------------------------------------


@dataclass
class Segments:
    """All H-step windows (stride 1) from a dataset, shuffled by seed.

    states: (N, H+1, obs); actions: (N, H, act); rewards: (N, H).
    No window crosses a terminal because trajectories end at terminals.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    horizon: int
    skipped_trajectories: int

    def __len__(self) -> int:
        return self.states.shape[0]


def slice_segments(ds: OfflineDataset, horizon: int, seed: int = 0) -> Segments:
    states, actions, rewards = [], [], []
    skipped = 0
    for traj in ds.trajectories:
        n_states = traj.states.shape[0]
        if n_states < horizon + 1:
            skipped += 1
            continue
        for t in range(n_states - horizon):
            states.append(traj.states[t : t + horizon + 1])
            actions.append(traj.actions[t : t + horizon])
            rewards.append(traj.rewards[t : t + horizon])
    if not states:
        raise ValueError(f"no trajectory long enough for horizon {horizon}")
    order = make_rng(seed, len(states)).permutation(len(states))
    return Segments(
        states=np.array(states)[order],
        actions=np.array(actions)[order],
        rewards=np.array(rewards)[order],
        horizon=horizon,
        skipped_trajectories=skipped,
    )


# ---------------------------------------------------------------------------
# observation scaling
# ---------------------------------------------------------------------------


def normalize_obs(spec: MazeSpec, obs: np.ndarray) -> np.ndarray:
    """Affine map to roughly [-1, 1]: positions about the maze center,
    velocities by v_max.  Derived from the spec alone (no data stats)."""
    obs = np.asarray(obs, dtype=np.float64)
    center = np.array([spec.cols / 2.0, spec.rows / 2.0]) * spec.cell_size
    half = max(spec.cols, spec.rows) * spec.cell_size / 2.0
    out = obs.copy()
    out[..., 0:2] = (obs[..., 0:2] - center) / half
    out[..., 2:4] = obs[..., 2:4] / spec.v_max
    return out


def denormalize_pos(spec: MazeSpec, pos_norm: np.ndarray) -> np.ndarray:
    center = np.array([spec.cols / 2.0, spec.rows / 2.0]) * spec.cell_size
    half = max(spec.cols, spec.rows) * spec.cell_size / 2.0
    return np.asarray(pos_norm) * half + center


# ---------------------------------------------------------------------------
# binary dataset format
# ---------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    """Bad magic, version, or a truncated dataset file."""


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DatasetFormatError(
                f"truncated file: wanted {n} bytes at offset {self.off}, "
                f"have {len(self.blob) - self.off}"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.raw(struct.calcsize("<" + fmt)))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * count), dtype="<f8").astype(np.float64)


def _read_spec(r: _Reader) -> MazeSpec:
    rows, cols = r.unpack("II")
    nbits = rows * cols
    packed = np.frombuffer(r.raw((nbits + 7) // 8), dtype=np.uint8)
    walls = np.unpackbits(packed)[:nbits].reshape(rows, cols).astype(bool)
    goal = r.unpack("II")
    cell_size, goal_radius, dt, friction, v_max = r.unpack("5d")
    (max_steps,) = r.unpack("I")
    (n_starts,) = r.unpack("I")
    starts = tuple(r.unpack("II") for _ in range(n_starts))
    return MazeSpec(
        walls=walls,
        goal_cell=goal,
        start_cells=starts,
        cell_size=cell_size,
        goal_radius=goal_radius,
        max_episode_steps=max_steps,
        dt=dt,
        friction=friction,
        v_max=v_max,
    )


def save_dataset(ds: OfflineDataset, path) -> None:
    path = Path(path)
    parts = [_MAGIC, struct.pack("<I", _VERSION), ds.spec.to_bytes()]
    parts.append(struct.pack("<I", len(ds.trajectories)))
    for traj in ds.trajectories:
        length = traj.actions.shape[0]
        parts.append(struct.pack("<IB", length, 1 if traj.success else 0))
        parts.append(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(traj.actions, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(traj.rewards, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(ds.metadata, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> OfflineDataset:
    path = Path(path)
    r = _Reader(path.read_bytes())
    magic = r.raw(len(_MAGIC))
    if magic != _MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    (version,) = r.unpack("I")
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    spec = _read_spec(r)
    (n_eps,) = r.unpack("I")
    trajectories = []
    for _ in range(n_eps):
        length, success = r.unpack("IB")
        states = r.f64((length + 1) * 4).reshape(length + 1, 4)
        actions = r.f64(length * 2).reshape(length, 2)
        rewards = r.f64(length)
        trajectories.append(
            Trajectory(
                states=states,
                actions=actions,
                rewards=rewards,
                success=bool(success),
            )
        )
    if r.off != len(r.blob):
        raise DatasetFormatError(f"{len(r.blob) - r.off} trailing bytes")
    metadata = {}
    sidecar = path.with_name(path.name + ".meta.json")
    if sidecar.exists():
        metadata = json.loads(sidecar.read_text())
    return OfflineDataset(trajectories=trajectories, spec=spec, metadata=metadata)
