"""Built-in grid environments with their tasks, default behavior policies and path metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from dispo.errors import ConfigurationError
from dispo.mdp import (
    BehaviorPolicySpec,
    DeterministicMDP,
    RewardTable,
    build_grid_maze,
    build_preference_maze,
    build_stitch_grid,
    load_layout,
    ring_preference_spec,
)

ENV_NAMES = ("corridor", "maze", "stitch", "preference", "grid")
STITCH_DISTRACTOR = (1, 1)
MAZE_WAYPOINTS = ((1, 4), (3, 4))


def builtin_layout(name: str) -> str:
    return resources.files("dispo.layouts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


@dataclass
class EnvBundle:
    """An MDP plus named reward tasks and the defaults experiments use with it."""

    name: str
    mdp: DeterministicMDP
    tasks: dict[str, RewardTable]
    behavior: BehaviorPolicySpec
    feature_kind: str
    # task -> corridor state set whose occupancy is reported
    corridors: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def goal(self) -> int | None:
        goals = self.mdp.grid.marks.get("G", ()) if self.mdp.grid else ()
        return goals[0] if goals else None


def goal_reward(mdp: DeterministicMDP) -> RewardTable:
    r = np.zeros(mdp.n_states)
    r[list(mdp.terminal_states)] = 1.0
    return RewardTable(r)


def build_env(name: str, gamma: float, layout: str | Path | None = None, epsilon: float = 0.1) -> EnvBundle:
    """Construct a built-in environment (``layout`` overrides the shipped grid where it applies)."""
    text = load_layout(layout) if layout is not None else None
    if name == "corridor":
        mdp = build_grid_maze(text or builtin_layout("corridor"), gamma, name="corridor")
        return EnvBundle(name, mdp, {"goal": goal_reward(mdp)}, BehaviorPolicySpec("uniform-random"), "one-hot")
    if name == "grid":
        if text is None:
            raise ConfigurationError("env 'grid' needs a layout path")
        mdp = build_grid_maze(text, gamma, name="grid")
        return EnvBundle(name, mdp, {"goal": goal_reward(mdp)}, BehaviorPolicySpec("uniform-random"), "one-hot")
    if name == "maze":
        mdp = build_grid_maze(text or builtin_layout("maze"), gamma, name="maze")
        g = mdp.grid
        goal = g.marks["G"][0]
        routes = tuple((g.state_of(w), goal) for w in MAZE_WAYPOINTS if w in g.cells)
        if not routes:
            routes = ((goal,),)
        behavior = BehaviorPolicySpec("epsilon-waypoint", epsilon=epsilon, routes=routes)
        return EnvBundle(name, mdp, {"goal": goal_reward(mdp)}, behavior, "one-hot")
    if name == "stitch":
        distractors = (STITCH_DISTRACTOR,) if text is None else ()
        mdp = build_stitch_grid(text or builtin_layout("stitch"), gamma, distractors=distractors)
        g = mdp.grid
        start, mid, goal = g.marks["S"][0], g.marks["M"][0], g.marks["G"][0]
        routes, starts = [(mid,), (goal,)], [start, mid]
        for d in g.marks.get("D", ()):
            routes.append((d,))
            starts.append(start)
        behavior = BehaviorPolicySpec("scripted-phase", epsilon=epsilon, routes=tuple(routes), phase_starts=tuple(starts))
        return EnvBundle(name, mdp, {"goal": goal_reward(mdp)}, behavior, "reward-as-feature")
    if name == "preference":
        spec = ring_preference_spec()
        if text is not None:
            raise ConfigurationError("the preference environment uses its built-in ring layout")
        mdp, r_up, r_right = build_preference_maze(spec, gamma)
        g = mdp.grid
        goal = g.marks["G"][0]
        up, right = g.marks["U"], g.marks["R"]
        # corner waypoints force the route through one corridor
        routes = ((up[len(up) // 2], goal), (right[len(right) // 2], goal))
        behavior = BehaviorPolicySpec("epsilon-waypoint", epsilon=epsilon, routes=routes)
        return EnvBundle(name, mdp, {"up": r_up, "right": r_right}, behavior, "one-hot",
                         corridors={"up": tuple(up), "right": tuple(right)})
    raise ConfigurationError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def corridor_occupancy(states, target: tuple[int, ...], other: tuple[int, ...]) -> float:
    """Share of corridor visits that fall in ``target`` (0.0 for a path touching neither)."""
    t = sum(1 for s in states if s in target)
    o = sum(1 for s in states if s in other)
    return 0.0 if t + o == 0 else t / (t + o)
