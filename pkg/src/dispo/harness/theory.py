"""Empirical checks of the optimality and goodness guarantees on small exact MDPs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from dispo.errors import ContractError
from dispo.features import make_one_hot
from dispo.mdp import (
    BehaviorPolicy,
    BehaviorPolicySpec,
    DeterministicMDP,
    RewardTable,
    TransitionDataset,
    effective_horizon,
    full_coverage_dataset,
    random_dag_mdp,
    rollout,
    value_iteration,
)
from dispo.outcome import default_merge_tol, particle_fixed_point
from dispo.planner import DispoModels, DispoPolicy, PlannerConfig, fit_reward_weights
from dispo.readout import fit_tabular_readout

log = logging.getLogger(__name__)

CHECK_ATOM_CAP = 1024
DEFAULT_GOODNESS_CAP = 256


@dataclass(frozen=True)
class OptimalityVerdict:
    index: int
    n_states: int
    n_actions: int
    optimal: float
    achieved: float
    gap: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def count_paths(mdp: DeterministicMDP, s: int) -> int:
    """Distinct state sequences from ``s`` to absorption in an acyclic MDP (terminal loops excepted)."""
    memo: dict[int, int] = {}
    order = sorted(range(mdp.n_states), reverse=True)
    for u in order:
        if mdp.is_terminal(u):
            memo[u] = 1
            continue
        succ = set(int(t) for t in mdp.transition[u])
        if any(t <= u for t in succ):
            raise ContractError("count_paths needs a DAG with increasing transitions")
        memo[u] = sum(memo[t] for t in succ)
    return memo[s]


def check_mdp_optimality(mdp: DeterministicMDP, reward: RewardTable, dataset: TransitionDataset,
                         index: int = 0, atom_cap: int = CHECK_ATOM_CAP, horizon_tol: float = 1e-6) -> OptimalityVerdict:
    """Particle model + exact planner on ``dataset`` against the value-iteration optimum from the start state.

    The returned gap is ``optimal - achieved``; the check passes when it is at most
    ``gamma^H / (1 - gamma) + merge_tol * d / (1 - gamma)``.
    """
    gamma = mdp.gamma
    phi = make_one_hot(mdp.n_states, gamma)
    model = particle_fixed_point(dataset, phi, gamma, tol=min(1e-9, horizon_tol), atom_cap=atom_cap)
    readout = fit_tabular_readout(dataset, model, phi, gamma)
    config = PlannerConfig(mode="exact-particle", ridge_lambda=0.0)
    weights = fit_reward_weights(dataset.relabel(reward), phi, ridge_lambda=0.0)
    policy = DispoPolicy(DispoModels(phi=phi, outcome=model, readout=readout,
                                     terminal_states=mdp.terminal_states), weights, config)
    horizon = effective_horizon(gamma, horizon_tol)
    _, achieved = rollout(mdp, policy, reward, horizon, start=mdp.start_state)
    v, _ = value_iteration(mdp, reward, tol=1e-12)
    optimal = float(v[mdp.start_state])
    tolerance = gamma ** horizon / (1.0 - gamma) + model.merge_tol * phi.dim / (1.0 - gamma)
    gap = optimal - achieved
    return OptimalityVerdict(index, mdp.n_states, mdp.n_actions, optimal, float(achieved), float(gap),
                             float(tolerance), bool(gap <= tolerance))


def _random_instance(rng: np.random.Generator, size_bounds, gamma: float, atom_cap: int,
                     max_tries: int = 200) -> tuple[DeterministicMDP, RewardTable]:
    (lo, hi), max_actions = size_bounds
    for _ in range(max_tries):
        n = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(2, max_actions + 1)) if max_actions >= 2 else 1
        mdp = random_dag_mdp(n, k, rng, gamma, window=3, n_terminal=int(rng.integers(1, 3)))
        if count_paths(mdp, mdp.start_state) <= atom_cap:
            return mdp, RewardTable(rng.random(n))
    raise ContractError("could not draw an MDP within the atom cap; lower the size bounds")


def delete_optimal_edge(mdp: DeterministicMDP, reward: RewardTable, dataset: TransitionDataset) -> TransitionDataset:
    """Drop every start-state transition into the optimal successor."""
    v, pi = value_iteration(mdp, reward, tol=1e-12)
    s0 = mdp.start_state
    best = mdp.step(s0, int(pi[s0]))
    keep = ~((dataset.s == s0) & (dataset.s_next == best))
    return dataset.take(np.flatnonzero(keep))


def _control_gap(mdp: DeterministicMDP, reward: RewardTable) -> float:
    """Optimal start value minus the best value reachable without the optimal first edge."""
    v, pi = value_iteration(mdp, reward, tol=1e-12)
    s0 = mdp.start_state
    best = mdp.step(s0, int(pi[s0]))
    others = [v[t] for t in set(int(t) for t in mdp.transition[s0]) if t != best]
    if not others:
        return 0.0
    return float(mdp.gamma * (v[best] - max(others)))


def check_full_coverage_optimality(n_mdps: int = 20, size_bounds=((4, 16), 4), seed: int = 0, gamma: float = 0.95,
                                   negative_control: bool = False, atom_cap: int = CHECK_ATOM_CAP) -> list[OptimalityVerdict]:
    """Optimality of particle DiSPO on random acyclic MDPs with full-coverage data.

    ``size_bounds = ((min_states, max_states), max_actions)``. Instances whose
    number of distinct paths exceeds ``atom_cap`` are redrawn so no atom is ever
    evicted. With ``negative_control`` the optimal first edge is removed from
    the data and only instances where that costs more than the tolerance are
    kept; those verdicts are expected to fail.
    """
    (lo, hi), max_actions = size_bounds
    if lo < 1 or hi < lo or hi > 50 or not 1 <= max_actions <= 4:
        raise ContractError("size bounds must satisfy 1 <= min <= max <= 50 states and 1..4 actions")
    rng = np.random.default_rng(seed)
    verdicts = []
    while len(verdicts) < n_mdps:
        mdp, reward = _random_instance(rng, size_bounds, gamma, atom_cap)
        data = full_coverage_dataset(mdp, seed)
        if negative_control:
            tol = gamma ** effective_horizon(gamma) / (1.0 - gamma) + default_merge_tol(gamma) * mdp.n_states / (1.0 - gamma)
            if _control_gap(mdp, reward) <= 2.0 * tol:
                continue
            data = delete_optimal_edge(mdp, reward, data)
        verdicts.append(check_mdp_optimality(mdp, reward, data, index=len(verdicts), atom_cap=atom_cap))
        log.info("mdp %d: %s", len(verdicts) - 1, verdicts[-1])
    return verdicts


@dataclass(frozen=True)
class GoodnessReport:
    """Per-state estimates of ``P_behavior[return > policy value]`` with binomial intervals."""

    states: tuple[int, ...]
    delta: tuple[float, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    sigma: tuple[float, ...]
    n_rollouts: int
    min_atom_weight: float | None = None

    @property
    def max_delta(self) -> float:
        return float(max(self.delta))

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.delta))

    def bound(self) -> float | None:
        """``min_atom_weight + 3 sigma`` at the worst state, if an atom weight was supplied."""
        if self.min_atom_weight is None:
            return None
        j = int(np.argmax(self.delta))
        return self.min_atom_weight + 3.0 * self.sigma[j]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(max_delta=self.max_delta, mean_delta=self.mean_delta, bound=self.bound())
        return d


def behavior_returns(mdp: DeterministicMDP, spec: BehaviorPolicySpec, reward: RewardTable, start: int,
                     n: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``n`` behavior rollouts of ``horizon`` actions from ``start``."""
    r = reward.check(mdp).values
    if spec.kind == "uniform-random":
        s = np.full(n, start, dtype=np.int64)
        ret = np.full(n, r[start])
        disc = 1.0
        for _ in range(horizon):
            s = mdp.transition[s, rng.integers(mdp.n_actions, size=n)]
            disc *= mdp.gamma
            ret += disc * r[s]
        return ret
    policy = BehaviorPolicy(mdp, spec)
    out = np.empty(n)
    for i in range(n):
        policy.begin_episode(rng)
        policy.observe(start)
        _, out[i] = rollout(mdp, lambda x: policy.act(x, rng), reward, horizon, start=start)
    return out


def check_goodness(mdp: DeterministicMDP, dataset: TransitionDataset, policy: Callable[[int], int],
                   n_rollouts: int = 10_000, seed: int = 0, reward: RewardTable | None = None,
                   horizon: int | None = None, policy_rollouts: int = 1, min_atom_weight: float | None = None,
                   margin: float = 1e-9) -> GoodnessReport:
    """Monte Carlo ``delta(s) = P[behavior return from s > V_policy(s) + margin]`` at each visited state.

    The visited states are those on the policy's own rollout from the start
    state. ``V_policy`` averages ``policy_rollouts`` rollouts (1 suffices for a
    deterministic policy). Intervals are Clopper-Pearson at 95%.
    """
    if dataset.behavior is None:
        raise ContractError("dataset does not record its behavior policy")
    if reward is None:
        raise ContractError("a reward table is needed to define returns")
    if n_rollouts < 1:
        raise ContractError("n_rollouts must be positive")
    horizon = effective_horizon(mdp.gamma) if horizon is None else horizon
    rng = np.random.default_rng(seed)

    def value(s: int) -> float:
        vals = []
        for _ in range(policy_rollouts):
            if hasattr(policy, "reset"):
                policy.reset()
            vals.append(rollout(mdp, policy, reward, horizon, start=s)[1])
        return float(np.mean(vals))

    if hasattr(policy, "reset"):
        policy.reset()
    traj, _ = rollout(mdp, policy, reward, horizon, start=mdp.start_state)
    visited = tuple(dict.fromkeys(int(s) for s in traj.states))
    deltas, lo, hi, sig = [], [], [], []
    for s in visited:
        v = value(s)
        ret = behavior_returns(mdp, dataset.behavior, reward, s, n_rollouts, horizon, rng)
        k = int(np.sum(ret > v + margin))
        p = k / n_rollouts
        ci = binomtest(k, n_rollouts).proportion_ci(confidence_level=0.95)
        deltas.append(p), lo.append(float(ci.low)), hi.append(float(ci.high))
        sig.append(float(np.sqrt(max(p * (1 - p), 1.0 / n_rollouts) / n_rollouts)))
    return GoodnessReport(visited, tuple(deltas), tuple(lo), tuple(hi), tuple(sig), n_rollouts, min_atom_weight)


def behavior_callable(mdp: DeterministicMDP, spec: BehaviorPolicySpec, rng: np.random.Generator):
    """The behavior policy as a stateful callable, restarting its route on ``reset``."""
    policy = BehaviorPolicy(mdp, spec)

    class _Wrapped:
        def reset(self):
            policy.begin_episode(rng)

        def __call__(self, s: int) -> int:
            policy.observe(s)
            return policy.act(s, rng)

    w = _Wrapped()
    w.reset()
    return w


def goodness_suite(seed: int = 0, n_states: int = 10, n_actions: int = 3, gamma: float = 0.9,
                   n_transitions: int = 3000, n_rollouts: int = 10_000, policy: str = "dispo") -> GoodnessReport:
    """Goodness estimate on a random acyclic MDP with uniform-random behavior data.

    ``policy="dispo"`` evaluates the particle model with the exact planner;
    ``policy="behavior"`` evaluates the behavior policy itself as a reference.
    """
    from dispo.mdp import collect_dataset

    rng = np.random.default_rng(seed)
    mdp, reward = _random_instance(rng, ((n_states, n_states), n_actions), gamma, DEFAULT_GOODNESS_CAP)
    spec = BehaviorPolicySpec("uniform-random")
    data = collect_dataset(mdp, spec, n_transitions, n_states + 2, seed)
    phi = make_one_hot(mdp.n_states, gamma)
    model = particle_fixed_point(data, phi, gamma, atom_cap=DEFAULT_GOODNESS_CAP)
    if policy == "dispo":
        readout = fit_tabular_readout(data, model, phi, gamma)
        weights = fit_reward_weights(data.relabel(reward), phi, ridge_lambda=0.0)
        models = DispoModels(phi=phi, outcome=model, readout=readout, terminal_states=mdp.terminal_states)
        pol = DispoPolicy(models, weights, PlannerConfig(mode="exact-particle", ridge_lambda=0.0))
        policy_rollouts = 1
    elif policy == "behavior":
        pol = behavior_callable(mdp, spec, np.random.default_rng(seed + 1))
        policy_rollouts = 200
    else:
        raise ContractError(f"unknown policy {policy!r}")
    horizon = effective_horizon(gamma)
    report = check_goodness(mdp, data, pol, n_rollouts, seed, reward=reward, horizon=horizon,
                            policy_rollouts=policy_rollouts)
    min_w = min(model.min_weight(s) for s in report.states)
    return GoodnessReport(report.states, report.delta, report.ci_low, report.ci_high, report.sigma,
                          report.n_rollouts, min_w)
