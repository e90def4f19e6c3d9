"""Shared small MDPs and datasets."""

from __future__ import annotations

import numpy as np
import pytest

from dispo.features import make_one_hot
from dispo.mdp import DeterministicMDP, TransitionDataset


def chain_mdp(gamma: float = 0.5) -> DeterministicMDP:
    """s0 -> s1 -> s2 with s2 absorbing; a single action."""
    return DeterministicMDP(
        n_states=3, n_actions=1, transition=np.array([[1], [2], [2]]), initial_states=(0,),
        initial_weights=(1.0,), terminal_states=frozenset({2}), gamma=gamma, name="chain",
    )


def chain_dataset(mdp: DeterministicMDP) -> TransitionDataset:
    return TransitionDataset(s=[0, 1, 2], a=[0, 0, 0], s_next=[1, 2, 2], n_states=3, n_actions=1,
                             gamma=mdp.gamma, episode=[0, 0, 0])


def y_junction(gamma: float = 0.5, left: int = 3, right: int = 1):
    """State 0 branches to absorbing 1 (action 0) or absorbing 2 (action 1).

    ``left``/``right`` are the number of times each branch appears in the data.
    """
    mdp = DeterministicMDP(
        n_states=3, n_actions=2, transition=np.array([[1, 2], [1, 1], [2, 2]]), initial_states=(0,),
        initial_weights=(1.0,), terminal_states=frozenset({1, 2}), gamma=gamma, name="y",
    )
    s = [0] * left + [0] * right + [1, 2]
    a = [0] * left + [1] * right + [0, 0]
    s2 = [1] * left + [2] * right + [1, 2]
    ds = TransitionDataset(s=s, a=a, s_next=s2, n_states=3, n_actions=2, gamma=gamma,
                           episode=list(range(len(s))))
    return mdp, ds


@pytest.fixture
def chain():
    mdp = chain_mdp()
    return mdp, chain_dataset(mdp), make_one_hot(3, mdp.gamma)


@pytest.fixture
def yj():
    mdp, ds = y_junction()
    return mdp, ds, make_one_hot(3, mdp.gamma)
