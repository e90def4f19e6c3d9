"""Deterministic finite MDPs, grid builders, dataset collection and brute-force oracles."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from dispo.errors import CheckpointError, ConfigurationError, ContractError

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

WALL, FREE, START, GOAL, MID = "#", ".", "S", "G", "M"
LAYOUT_CHARS = frozenset({WALL, FREE, START, GOAL, MID})

DATASET_FORMAT = "dispo-dataset"
DATASET_VERSION = 1

Cell = tuple[int, int]


def effective_horizon(gamma: float, tol: float = 1e-6) -> int:
    """Number of steps after which the discounted tail drops below ``tol``."""
    if not 0.0 < gamma < 1.0:
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    if not 0.0 < tol <= 1.0:
        raise ContractError(f"horizon tolerance must lie in (0, 1], got {tol}")
    return max(1, math.ceil(math.log(tol) / math.log(gamma)))


@dataclass(frozen=True)
class GridInfo:
    height: int
    width: int
    cells: tuple[Cell, ...]
    marks: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def state_of(self, cell: Cell) -> int:
        try:
            return self.cells.index(tuple(cell))
        except ValueError:
            raise ConfigurationError(f"cell {cell} is not a free cell of the grid") from None

    def cell_of(self, state: int) -> Cell:
        return self.cells[state]


@dataclass(frozen=True, eq=False)
class DeterministicMDP:
    """Finite MDP with a total deterministic transition table ``transition[s, a]``.

    Terminal states must be absorbing: every action maps them onto themselves.
    ``coords`` is the continuous observation handed to function approximators;
    when absent the one-hot state id is used instead.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    initial_states: tuple[int, ...]
    initial_weights: tuple[float, ...]
    terminal_states: frozenset[int]
    gamma: float
    coords: np.ndarray | None = None
    grid: GridInfo | None = None
    name: str = "mdp"

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ConfigurationError("n_states and n_actions must be positive")
        table = np.array(self.transition, dtype=np.int64)
        if table.shape != (self.n_states, self.n_actions):
            raise ConfigurationError(
                f"transition table has shape {table.shape}, expected {(self.n_states, self.n_actions)}"
            )
        if table.min() < 0 or table.max() >= self.n_states:
            raise ConfigurationError("transition table references unknown states")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if not self.initial_states:
            raise ConfigurationError("at least one initial state is required")
        if len(self.initial_weights) != len(self.initial_states):
            raise ConfigurationError("initial weights must match initial states")
        if any(w < 0 for w in self.initial_weights) or not math.isclose(sum(self.initial_weights), 1.0):
            raise ConfigurationError("initial weights must be nonnegative and sum to 1")
        for s in self.initial_states:
            if not 0 <= s < self.n_states:
                raise ConfigurationError(f"initial state {s} out of range")
        for t in self.terminal_states:
            if not 0 <= t < self.n_states:
                raise ConfigurationError(f"terminal state {t} out of range")
            if np.any(table[t] != t):
                raise ConfigurationError(f"terminal state {t} is not absorbing")
        table.setflags(write=False)
        object.__setattr__(self, "transition", table)
        object.__setattr__(self, "terminal_states", frozenset(int(t) for t in self.terminal_states))
        if self.coords is not None:
            coords = np.array(self.coords, dtype=np.float64)
            if coords.ndim != 2 or coords.shape[0] != self.n_states:
                raise ConfigurationError("coords must have one row per state")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)

    def step(self, s: int, a: int) -> int:
        return int(self.transition[s, a])

    def is_terminal(self, s: int) -> bool:
        return s in self.terminal_states

    @property
    def embedding(self) -> np.ndarray:
        """Per-state continuous observation, shape ``(n_states, k)``."""
        if self.coords is not None:
            return self.coords
        return np.eye(self.n_states)

    @property
    def start_state(self) -> int:
        return self.initial_states[0]

    def sample_initial(self, rng: np.random.Generator) -> int:
        idx = rng.choice(len(self.initial_states), p=np.asarray(self.initial_weights))
        return int(self.initial_states[idx])


@dataclass(frozen=True)
class RewardTable:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(values)) or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
            raise ConfigurationError("rewards must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def __call__(self, s: int) -> float:
        return float(self.values[s])

    def check(self, mdp: DeterministicMDP) -> "RewardTable":
        if len(self.values) != mdp.n_states:
            raise ContractError(f"reward table has {len(self.values)} entries, MDP has {mdp.n_states} states")
        return self

    @classmethod
    def zeros(cls, n_states: int) -> "RewardTable":
        return cls(np.zeros(n_states))


class Transition(NamedTuple):
    s: int
    a: int
    s_next: int


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.states:
            raise ContractError("trajectory must contain at least one state")
        if len(self.actions) not in (len(self.states) - 1, len(self.states)):
            raise ContractError("actions must be one shorter than, or as long as, states")

    def is_consistent(self, mdp: DeterministicMDP) -> bool:
        return all(mdp.step(s, a) == s2 for s, a, s2 in zip(self.states, self.actions, self.states[1:]))


BEHAVIOR_KINDS = ("uniform-random", "epsilon-waypoint", "scripted-phase")


@dataclass(frozen=True)
class BehaviorPolicySpec:
    """Parameters of a data-collecting behavior policy.

    ``routes`` are waypoint sequences followed by shortest-path moves; with
    probability ``epsilon`` a uniformly random action is taken instead.
    ``epsilon-waypoint`` episodes start from the MDP's initial distribution,
    ``scripted-phase`` episodes start at ``phase_starts[i]`` for route ``i``.
    Both end once the final waypoint of the route is reached.
    """

    kind: str = "uniform-random"
    epsilon: float = 0.0
    routes: tuple[tuple[int, ...], ...] = ()
    route_weights: tuple[float, ...] | None = None
    phase_starts: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ConfigurationError(f"unknown behavior kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("epsilon must lie in [0, 1]")
        routes = tuple(tuple(int(x) for x in r) for r in self.routes)
        object.__setattr__(self, "routes", routes)
        object.__setattr__(self, "phase_starts", tuple(int(x) for x in self.phase_starts))
        if self.kind != "uniform-random":
            if not routes or any(len(r) == 0 for r in routes):
                raise ConfigurationError(f"{self.kind} needs at least one nonempty route")
        if self.kind == "scripted-phase" and len(self.phase_starts) != len(routes):
            raise ConfigurationError("scripted-phase needs one start state per route")
        if self.route_weights is not None:
            weights = tuple(float(w) for w in self.route_weights)
            if len(weights) != len(routes) or any(w < 0 for w in weights) or sum(weights) <= 0:
                raise ConfigurationError("route weights must be nonnegative, one per route")
            object.__setattr__(self, "route_weights", weights)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "routes": [list(r) for r in self.routes],
            "route_weights": None if self.route_weights is None else list(self.route_weights),
            "phase_starts": list(self.phase_starts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorPolicySpec":
        return cls(
            kind=d["kind"],
            epsilon=d.get("epsilon", 0.0),
            routes=tuple(tuple(r) for r in d.get("routes", ())),
            route_weights=None if d.get("route_weights") is None else tuple(d["route_weights"]),
            phase_starts=tuple(d.get("phase_starts", ())),
        )


def distances_to(mdp: DeterministicMDP, target: int) -> np.ndarray:
    """Shortest-path step counts from every state to ``target`` (inf if unreachable)."""
    preds: list[list[int]] = [[] for _ in range(mdp.n_states)]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            preds[mdp.step(s, a)].append(s)
    dist = np.full(mdp.n_states, np.inf)
    dist[target] = 0
    queue = deque([target])
    while queue:
        u = queue.popleft()
        for p in preds[u]:
            if dist[p] == np.inf:
                dist[p] = dist[u] + 1
                queue.append(p)
    return dist


def reachable(mdp: DeterministicMDP, sources: Iterable[int], blocked: Iterable[int] = ()) -> set[int]:
    """States reachable from ``sources`` without entering ``blocked`` states."""
    blocked = set(blocked)
    seen = {s for s in sources if s not in blocked}
    queue = deque(seen)
    while queue:
        u = queue.popleft()
        for a in range(mdp.n_actions):
            v = mdp.step(u, a)
            if v not in seen and v not in blocked:
                seen.add(v)
                queue.append(v)
    return seen


class BehaviorPolicy:
    """Executable form of a :class:`BehaviorPolicySpec`; holds per-episode route progress."""

    def __init__(self, mdp: DeterministicMDP, spec: BehaviorPolicySpec):
        self.mdp = mdp
        self.spec = spec
        self._dist: dict[int, np.ndarray] = {}
        for route in spec.routes:
            for w in route:
                if not 0 <= w < mdp.n_states:
                    raise ConfigurationError(f"waypoint {w} out of range")
                if w not in self._dist:
                    self._dist[w] = distances_to(mdp, w)
        self._route: tuple[int, ...] = ()
        self._idx = 0

    def begin_episode(self, rng: np.random.Generator) -> int:
        spec = self.spec
        if spec.kind == "uniform-random":
            self._route, self._idx = (), 0
            return self.mdp.sample_initial(rng)
        p = None
        if spec.route_weights is not None:
            p = np.asarray(spec.route_weights) / sum(spec.route_weights)
        k = int(rng.choice(len(spec.routes), p=p))
        self._route, self._idx = spec.routes[k], 0
        start = spec.phase_starts[k] if spec.kind == "scripted-phase" else self.mdp.sample_initial(rng)
        self._advance(start)
        return start

    def _advance(self, s: int) -> None:
        while self._idx < len(self._route) and self._route[self._idx] == s:
            self._idx += 1

    def observe(self, s: int) -> None:
        self._advance(s)

    @property
    def route_finished(self) -> bool:
        return bool(self._route) and self._idx >= len(self._route)

    def act(self, s: int, rng: np.random.Generator) -> int:
        n_actions = self.mdp.n_actions
        if self.spec.kind == "uniform-random" or rng.random() < self.spec.epsilon:
            return int(rng.integers(n_actions))
        if self._idx >= len(self._route):
            return 0
        dist = self._dist[self._route[self._idx]]
        nxt = dist[self.mdp.transition[s]]
        if not np.isfinite(nxt.min()):
            return int(rng.integers(n_actions))
        return int(np.argmin(nxt))


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Bag of ``(s, a, s')`` tuples with optional reward labels in [0, 1].

    Episode ids keep trajectory boundaries for Monte Carlo baselines.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    n_states: int
    n_actions: int
    gamma: float
    source_seed: int = 0
    rewards: np.ndarray | None = None
    episode: np.ndarray | None = None
    behavior: BehaviorPolicySpec | None = None

    def __post_init__(self):
        arrays = {}
        for name in ("s", "a", "s_next"):
            arr = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
            arrays[name] = arr
        n = len(arrays["s"])
        if len(arrays["a"]) != n or len(arrays["s_next"]) != n:
            raise ContractError("s, a and s_next must have equal length")
        if n and (arrays["s"].min() < 0 or arrays["s"].max() >= self.n_states
                  or arrays["s_next"].min() < 0 or arrays["s_next"].max() >= self.n_states):
            raise ContractError("dataset references states outside the MDP")
        if n and (arrays["a"].min() < 0 or arrays["a"].max() >= self.n_actions):
            raise ContractError("dataset references actions outside the MDP")
        episode = np.zeros(n, dtype=np.int64) if self.episode is None else np.array(self.episode, dtype=np.int64)
        if len(episode) != n:
            raise ContractError("episode ids must match the number of transitions")
        arrays["episode"] = episode
        if self.rewards is not None:
            rewards = np.array(self.rewards, dtype=np.float64).reshape(-1)
            if len(rewards) != n:
                raise ContractError("rewards must have the same length as transitions")
            if n and (rewards.min() < 0.0 or rewards.max() > 1.0):
                raise ContractError("rewards must lie in [0, 1]")
            arrays["rewards"] = rewards
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.s)

    def __iter__(self) -> Iterator[Transition]:
        for s, a, s2 in zip(self.s, self.a, self.s_next):
            yield Transition(int(s), int(a), int(s2))

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    def unique_triples(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct ``(s, a, s')`` rows and their counts, sorted lexicographically."""
        if len(self) == 0:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        rows = np.stack([self.s, self.a, self.s_next], axis=1)
        return np.unique(rows, axis=0, return_counts=True)

    def relabel(self, reward: RewardTable) -> "TransitionDataset":
        """Attach state rewards ``r(s)`` to every transition."""
        return self._replace(rewards=reward.values[self.s])

    def take(self, idx: np.ndarray) -> "TransitionDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TransitionDataset(
            s=self.s[idx], a=self.a[idx], s_next=self.s_next[idx],
            n_states=self.n_states, n_actions=self.n_actions, gamma=self.gamma,
            source_seed=self.source_seed,
            rewards=None if self.rewards is None else self.rewards[idx],
            episode=self.episode[idx], behavior=self.behavior,
        )

    def subsample(self, n: int, rng: np.random.Generator) -> "TransitionDataset":
        if n >= len(self):
            return self
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))

    def episodes(self) -> list[np.ndarray]:
        """Index arrays of each episode, in dataset order."""
        if len(self) == 0:
            return []
        cuts = np.flatnonzero(np.diff(self.episode)) + 1
        return np.split(np.arange(len(self)), cuts)

    def _replace(self, **changes) -> "TransitionDataset":
        fields = dict(
            s=self.s, a=self.a, s_next=self.s_next, n_states=self.n_states,
            n_actions=self.n_actions, gamma=self.gamma, source_seed=self.source_seed,
            rewards=self.rewards, episode=self.episode, behavior=self.behavior,
        )
        fields.update(changes)
        return TransitionDataset(**fields)


def parse_layout(layout: str) -> list[str]:
    rows = [row.rstrip("\r") for row in layout.strip("\n").split("\n")]
    rows = [row for row in rows if row.strip() != ""]
    if not rows:
        raise ConfigurationError("layout is empty")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigurationError("layout is not rectangular")
    bad = {ch for r in rows for ch in r} - LAYOUT_CHARS
    if bad:
        raise ConfigurationError(f"layout contains unknown characters {sorted(bad)}")
    return rows


def load_layout(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def build_grid_maze(layout: str, gamma: float, name: str = "grid") -> DeterministicMDP:
    """Four-action grid world; bumping into a wall or the border is a self-transition.

    States are the non-wall cells in row-major order. ``G`` cells are absorbing.
    """
    rows = parse_layout(layout)
    h, w = len(rows), len(rows[0])
    cells = tuple((r, c) for r in range(h) for c in range(w) if rows[r][c] != WALL)
    if not cells:
        raise ConfigurationError("layout has no free cells")
    index = {cell: i for i, cell in enumerate(cells)}
    marks: dict[str, list[int]] = {START: [], GOAL: [], MID: []}
    for i, (r, c) in enumerate(cells):
        if rows[r][c] in marks:
            marks[rows[r][c]].append(i)
    if not marks[START]:
        raise ConfigurationError("layout has no start cell 'S'")
    terminals = set(marks[GOAL])
    table = np.zeros((len(cells), 4), dtype=np.int64)
    for i, (r, c) in enumerate(cells):
        for a, (dr, dc) in enumerate(MOVES):
            nxt = (r + dr, c + dc)
            table[i, a] = i if i in terminals else index.get(nxt, i)
    coords = np.array(
        [(r / max(h - 1, 1), c / max(w - 1, 1)) for r, c in cells], dtype=np.float64
    )
    starts = tuple(marks[START])
    grid = GridInfo(h, w, cells, {k: tuple(v) for k, v in marks.items()})
    return DeterministicMDP(
        n_states=len(cells), n_actions=4, transition=table, initial_states=starts,
        initial_weights=tuple([1.0 / len(starts)] * len(starts)), terminal_states=frozenset(terminals),
        gamma=gamma, coords=coords, grid=grid, name=name,
    )


def _with_marks(mdp: DeterministicMDP, **marks: Sequence[int]) -> DeterministicMDP:
    grid = mdp.grid
    new_marks = dict(grid.marks)
    new_marks.update({k: tuple(v) for k, v in marks.items()})
    object.__setattr__(mdp, "grid", GridInfo(grid.height, grid.width, grid.cells, new_marks))
    return mdp


def build_stitch_grid(
    layout: str,
    gamma: float,
    mid: Cell | None = None,
    distractors: Sequence[Cell] = (),
) -> DeterministicMDP:
    """Grid where the goal can only be reached through the mid waypoint.

    The mid cell is the ``M`` character, or ``mid`` when given (``mid`` may
    coincide with the start, making the first phase empty). ``distractors``
    are dead-end cells visited by part of the first-phase data.
    """
    mdp = build_grid_maze(layout, gamma, name="stitch")
    grid = mdp.grid
    start = grid.marks[START][0]
    goals = grid.marks[GOAL]
    if not goals:
        raise ConfigurationError("stitch layout needs a goal cell 'G'")
    goal = goals[0]
    if mid is not None:
        mid_state = grid.state_of(mid)
    elif grid.marks[MID]:
        mid_state = grid.marks[MID][0]
    else:
        raise ConfigurationError("stitch layout needs a mid cell 'M'")
    from_start = reachable(mdp, [start])
    if mid_state not in from_start:
        raise ConfigurationError("mid cell is unreachable from the start")
    if goal not in reachable(mdp, [mid_state]):
        raise ConfigurationError("goal cell is unreachable from the mid cell")
    if mid_state != start and goal in reachable(mdp, [start], blocked=[mid_state]):
        raise ConfigurationError("goal is reachable without passing the mid cell")
    dead_ends = [grid.state_of(c) for c in distractors]
    for d in dead_ends:
        if d not in from_start:
            raise ConfigurationError(f"distractor cell {grid.cell_of(d)} is unreachable")
    return _with_marks(mdp, M=(mid_state,), D=tuple(dead_ends))


@dataclass(frozen=True)
class PreferenceSpec:
    """Two disjoint corridors joining start and goal, each rewarded by one task."""

    layout: str
    up_corridor: tuple[Cell, ...]
    right_corridor: tuple[Cell, ...]
    path_reward: float = 0.5
    goal_reward: float = 1.0


def ring_preference_spec(size: int = 5) -> PreferenceSpec:
    """Square ring: start bottom-left, goal top-right, an up/top and a bottom/right corridor."""
    if size < 3:
        raise ConfigurationError("ring size must be at least 3")
    n = size + 2
    rows = [["#"] * n for _ in range(n)]
    for i in range(1, n - 1):
        rows[1][i] = rows[n - 2][i] = rows[i][1] = rows[i][n - 2] = "."
    rows[n - 2][1] = START
    rows[1][n - 2] = GOAL
    layout = "\n".join("".join(r) for r in rows)
    up = tuple((r, 1) for r in range(n - 3, 0, -1)) + tuple((1, c) for c in range(2, n - 2))
    right = tuple((n - 2, c) for c in range(2, n - 1)) + tuple((r, n - 2) for r in range(n - 3, 1, -1))
    return PreferenceSpec(layout, up, right)


def _is_path(mdp: DeterministicMDP, states: Sequence[int]) -> bool:
    return all(b in mdp.transition[a] for a, b in zip(states, states[1:]))


def build_preference_maze(
    spec: PreferenceSpec, gamma: float
) -> tuple[DeterministicMDP, RewardTable, RewardTable]:
    """Maze plus ``(r_up, r_right)``: each rewards one corridor and, equally, the goal."""
    mdp = build_grid_maze(spec.layout, gamma, name="preference")
    grid = mdp.grid
    if not grid.marks[GOAL]:
        raise ConfigurationError("preference layout needs a goal cell 'G'")
    start, goal = grid.marks[START][0], grid.marks[GOAL][0]
    up = [grid.state_of(c) for c in spec.up_corridor]
    right = [grid.state_of(c) for c in spec.right_corridor]
    if not up or not right:
        raise ConfigurationError("both corridors must be nonempty")
    if set(up) & set(right):
        raise ConfigurationError("corridors are not disjoint")
    for corridor in (up, right):
        if start in corridor or goal in corridor:
            raise ConfigurationError("corridors must exclude the start and goal cells")
        if not _is_path(mdp, [start, *corridor, goal]):
            raise ConfigurationError("each corridor must be a connected path from start to goal")
    r_up = np.zeros(mdp.n_states)
    r_right = np.zeros(mdp.n_states)
    r_up[up] = spec.path_reward
    r_right[right] = spec.path_reward
    r_up[goal] = r_right[goal] = spec.goal_reward
    mdp = _with_marks(mdp, U=tuple(up), R=tuple(right))
    return mdp, RewardTable(r_up), RewardTable(r_right)


def random_dag_mdp(
    n_states: int, n_actions: int, rng: np.random.Generator, gamma: float,
    window: int = 3, n_terminal: int = 1,
) -> DeterministicMDP:
    """Random deterministic MDP whose only cycles are absorbing terminal self-loops.

    Every non-terminal state ``i`` moves to a state in ``(i, i + window]``; the
    last ``n_terminal`` states are absorbing.
    """
    n_terminal = max(1, min(n_terminal, n_states))
    table = np.zeros((n_states, n_actions), dtype=np.int64)
    first_terminal = n_states - n_terminal
    for s in range(n_states):
        if s >= first_terminal:
            table[s] = s
        else:
            hi = min(n_states - 1, s + window)
            table[s] = rng.integers(s + 1, hi + 1, size=n_actions)
    return DeterministicMDP(
        n_states=n_states, n_actions=n_actions, transition=table, initial_states=(0,),
        initial_weights=(1.0,), terminal_states=frozenset(range(first_terminal, n_states)),
        gamma=gamma, name="random-dag",
    )


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, gamma: float) -> DeterministicMDP:
    """Random deterministic MDP with arbitrary (cyclic) transitions and no terminals."""
    table = rng.integers(0, n_states, size=(n_states, n_actions))
    return DeterministicMDP(
        n_states=n_states, n_actions=n_actions, transition=table, initial_states=(0,),
        initial_weights=(1.0,), terminal_states=frozenset(), gamma=gamma, name="random",
    )


def full_coverage_dataset(mdp: DeterministicMDP, seed: int = 0) -> TransitionDataset:
    """Every ``(s, a, T(s, a))`` exactly once."""
    s, a = np.divmod(np.arange(mdp.n_states * mdp.n_actions), mdp.n_actions)
    return TransitionDataset(
        s=s, a=a, s_next=mdp.transition[s, a], n_states=mdp.n_states, n_actions=mdp.n_actions,
        gamma=mdp.gamma, source_seed=seed, episode=np.arange(len(s)),
    )


def collect_dataset(
    mdp: DeterministicMDP,
    policy: BehaviorPolicySpec,
    n_transitions: int,
    episode_cap: int,
    seed: int,
) -> TransitionDataset:
    """Roll out the behavior policy until exactly ``n_transitions`` tuples are stored.

    An episode stops at ``episode_cap`` transitions, at the end of its route, or
    on entering a terminal state; in the latter case one absorbing self-transition
    of the terminal is recorded so downstream backups see the absorption.
    """
    if n_transitions <= 0:
        raise ContractError("n_transitions must be positive")
    if episode_cap <= 0:
        raise ContractError("episode_cap must be positive")
    rng = np.random.default_rng(seed)
    behavior = BehaviorPolicy(mdp, policy)
    out_s, out_a, out_n, out_e = [], [], [], []
    ep = 0
    empty_run = 0
    while len(out_s) < n_transitions:
        s = behavior.begin_episode(rng)
        steps = 0
        while steps < episode_cap and len(out_s) < n_transitions:
            if behavior.route_finished and not mdp.is_terminal(s):
                break
            a = behavior.act(s, rng)
            s2 = mdp.step(s, a)
            out_s.append(s), out_a.append(a), out_n.append(s2), out_e.append(ep)
            steps += 1
            if mdp.is_terminal(s) and s2 == s:
                break
            behavior.observe(s2)
            s = s2
        empty_run = empty_run + 1 if steps == 0 else 0
        if empty_run > 10_000:
            raise ContractError("behavior policy keeps producing empty episodes")
        if steps:
            ep += 1
    return TransitionDataset(
        s=out_s, a=out_a, s_next=out_n, n_states=mdp.n_states, n_actions=mdp.n_actions,
        gamma=mdp.gamma, source_seed=seed, episode=out_e, behavior=policy,
    )


def _feature_table(phi) -> np.ndarray:
    table = getattr(phi, "table", phi)
    return np.asarray(table, dtype=np.float64)


def discounted_feature_sum(traj: Trajectory, phi, gamma: float, horizon_tol: float = 1e-6) -> np.ndarray:
    """``sum_t gamma^t phi(s_t)`` over the effective horizon, holding the last state absorbing."""
    table = _feature_table(phi)
    horizon = effective_horizon(gamma, horizon_tol)
    states = np.asarray(traj.states[:horizon], dtype=np.int64)
    discounts = gamma ** np.arange(len(states))
    psi = discounts @ table[states]
    if len(states) < horizon:
        # geometric tail of the absorbing final state
        tail = gamma ** len(states) * (1.0 - gamma ** (horizon - len(states))) / (1.0 - gamma)
        psi = psi + tail * table[states[-1]]
    return psi


def value_iteration(mdp: DeterministicMDP, reward: RewardTable, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values ``V(s) = r(s) + gamma max_a V(T(s, a))`` and the greedy policy.

    Ties in the greedy policy go to the lowest action id.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    r = reward.check(mdp).values
    v = np.zeros(mdp.n_states)
    while True:
        v_new = r + mdp.gamma * v[mdp.transition].max(axis=1)
        residual = np.max(np.abs(v_new - v))
        v = v_new
        if residual <= tol:
            break
    policy = np.argmax(v[mdp.transition], axis=1)
    return v, policy


def rollout(
    mdp: DeterministicMDP,
    policy: Callable[[int], int],
    reward: RewardTable,
    horizon: int,
    start: int | None = None,
) -> tuple[Trajectory, float]:
    """Execute ``horizon`` actions from ``start``; return the trajectory and its discounted return.

    The return sums ``gamma^(t-1) r(s_t)`` over all ``horizon + 1`` visited states.
    """
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    r = reward.check(mdp).values
    s = mdp.start_state if start is None else int(start)
    states, actions = [s], []
    for _ in range(horizon):
        a = int(policy(s))
        s = mdp.step(s, a)
        actions.append(a)
        states.append(s)
    discounts = mdp.gamma ** np.arange(len(states))
    ret = float(discounts @ r[np.asarray(states)])
    return Trajectory(tuple(states), tuple(actions)), ret


def save_dataset(path: str | Path, ds: TransitionDataset) -> None:
    """Line-delimited text: a JSON header, then ``s a s' episode [reward]`` per line."""
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "n_states": ds.n_states, "n_actions": ds.n_actions, "gamma": ds.gamma,
        "seed": ds.source_seed, "n_transitions": len(ds), "has_rewards": ds.rewards is not None,
        "behavior": None if ds.behavior is None else ds.behavior.to_dict(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ds)):
        row = f"{ds.s[i]} {ds.a[i]} {ds.s_next[i]} {ds.episode[i]}"
        if ds.rewards is not None:
            row += f" {float(ds.rewards[i])!r}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> TransitionDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: missing or malformed dataset header") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise CheckpointError(f"{path}: unsupported dataset format/version")
    body = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(body) != header["n_transitions"]:
        raise CheckpointError(f"{path}: expected {header['n_transitions']} records, found {len(body)}")
    has_rewards = header["has_rewards"]
    width = 5 if has_rewards else 4
    if any(len(row) != width for row in body):
        raise CheckpointError(f"{path}: malformed record")
    cols = list(zip(*body)) if body else [()] * width
    behavior = header.get("behavior")
    return TransitionDataset(
        s=[int(x) for x in cols[0]], a=[int(x) for x in cols[1]], s_next=[int(x) for x in cols[2]],
        episode=[int(x) for x in cols[3]], rewards=[float(x) for x in cols[4]] if has_rewards else None,
        n_states=header["n_states"], n_actions=header["n_actions"], gamma=header["gamma"],
        source_seed=header["seed"], behavior=None if behavior is None else BehaviorPolicySpec.from_dict(behavior),
    )
