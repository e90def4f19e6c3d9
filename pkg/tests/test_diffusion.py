import math

import numpy as np
import pytest

from dispo.errors import ContractError, UntrainedModelError
from dispo.features import make_one_hot
from dispo.nn import LrSchedule, OptimizerState
from dispo.outcome import (
    DiffusionConfig, DiffusionOutcomeModel, bootstrap_targets, ddim_sample, diffusion_train_step, sample_outcomes,
    train_on_dataset,
)
from dispo.outcome.diffusion import encode_states, linear_beta_schedule, time_embedding

SMALL = DiffusionConfig(hidden=(32, 64), cond_hidden=32, time_dim=8, state_freqs=1, ema_decay=0.99)
LOW, HIGH = np.array([0.2, 0.2]), np.array([0.8, 0.8])
SINGLE = np.array([0.5, 0.5])


def energy_distance(x, y):
    def mean_dist(a, b):
        return np.mean(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2))
    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


@pytest.fixture(scope="module")
def trained():
    """State 0 has the single outcome (0.5, 0.5); state 1 is an even mix of (0.2, 0.2) and (0.8, 0.8)."""
    model = DiffusionOutcomeModel(2, 0.9, np.array([[0.0], [1.0]]), SMALL, seed=0)
    rng = np.random.default_rng(0)
    steps = 3000
    opt = OptimizerState(lr=2e-3, weight_decay=0.0, schedule=LrSchedule(2e-3, 100, steps))
    losses = []
    for _ in range(steps):
        s = rng.integers(2, size=128)
        pick = rng.integers(2, size=128)
        x0 = np.where(s[:, None] == 0, SINGLE, np.where(pick[:, None] == 0, LOW, HIGH))
        losses.append(diffusion_train_step(model, s, None, None, None, rng, opt, targets=x0))
    return model, losses


def test_schedule_and_embeddings():
    betas, ab = linear_beta_schedule(1000, 1e-4, 2e-2)
    assert betas[0] == pytest.approx(1e-4) and betas[-1] == pytest.approx(2e-2)
    assert np.all(np.diff(ab) < 0)
    cfg = DiffusionConfig()
    assert (cfg.n_train_timesteps, cfg.ddim_steps, cfg.hidden) == (1000, 50, (64, 128))
    assert time_embedding(np.array([0, 5]), 8).shape == (2, 8)
    assert encode_states(np.zeros((3, 2)), 2).shape == (3, 10)


def test_ddim_timesteps_descend_to_zero():
    model = DiffusionOutcomeModel(2, 0.9, np.zeros((1, 1)), SMALL)
    ts = model.ddim_timesteps()
    assert len(ts) == 50 and ts[0] == 980 and ts[-1] == 0 and np.all(np.diff(ts) < 0)


def test_loss_is_nonnegative_and_decreases(trained):
    _, losses = trained
    assert min(losses) >= 0.0
    assert np.mean(losses[-200:]) < 0.5 * np.mean(losses[:200])


def test_single_outcome_reproduced(trained):
    model, _ = trained
    x = sample_outcomes(model, 0, 200, np.random.default_rng(1))
    assert np.mean(np.max(np.abs(x - SINGLE), axis=1) < 0.05) >= 0.95


def test_two_atom_target_is_bimodal(trained):
    model, _ = trained
    x = sample_outcomes(model, 1, 400, np.random.default_rng(2))
    near_low = np.max(np.abs(x - LOW), axis=1) < 0.1
    near_high = np.max(np.abs(x - HIGH), axis=1) < 0.1
    assert near_low.mean() > 0.3 and near_high.mean() > 0.3
    target = np.where(np.random.default_rng(3).integers(2, size=(400, 1)) == 0, LOW, HIGH)
    assert energy_distance(x, target) < 0.02


def test_samples_clipped_to_unit_box(trained):
    model, _ = trained
    x = model.sample(np.ones(100, dtype=int), np.random.default_rng(0), guidance=(np.array([5.0, 5.0]), 10.0))
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_sampling_is_deterministic_given_rng(trained):
    model, _ = trained
    a = model.sample(np.array([0, 1, 1]), np.random.default_rng(7))
    b = model.sample(np.array([0, 1, 1]), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_zero_beta_is_unguided(trained):
    model, _ = trained
    a = model.sample(np.ones(50, dtype=int), np.random.default_rng(4))
    b = model.sample(np.ones(50, dtype=int), np.random.default_rng(4), guidance=(np.array([1.0, 1.0]), 0.0))
    np.testing.assert_array_equal(a, b)


def test_guidance_shifts_mean_toward_w(trained):
    model, _ = trained
    w = np.array([1.0, 0.0])
    plain = model.sample(np.zeros(1000, dtype=int), np.random.default_rng(5))
    guided = model.sample(np.zeros(1000, dtype=int), np.random.default_rng(5), guidance=(w, 0.5))
    shift = guided.mean(axis=0) - plain.mean(axis=0)
    assert shift[0] > 0.01 and shift[0] > abs(shift[1])


def test_guidance_prefers_high_value_atom(trained):
    model, _ = trained
    w = np.array([1.0, 1.0])
    plain = model.sample(np.ones(500, dtype=int), np.random.default_rng(6))
    guided = model.sample(np.ones(500, dtype=int), np.random.default_rng(6), guidance=(w, 0.3))
    frac = lambda x: np.mean(np.max(np.abs(x - HIGH), axis=1) < 0.1)  # noqa: E731
    assert frac(guided) > frac(plain)


def test_guidance_shift_is_exact():
    """With a zero noise net one guided update is computable by hand."""
    model = DiffusionOutcomeModel(2, 0.9, np.zeros((1, 1)), SMALL)
    model.predict_noise = lambda x, t, s, params=None: np.zeros_like(x)
    w, beta = np.array([0.3, -0.2]), 0.7
    x = np.array([[0.1, 0.4]])
    out = model.sample(np.zeros(1, dtype=int), np.random.default_rng(0), guidance=(w, beta), steps=2,
                       x_init=x, clip=False)
    ab = model.alphas_cumprod
    expected = x
    for t, prev in ((500, 0), (0, None)):
        eps = -math.sqrt(1 - ab[t]) * beta * w
        x0 = (expected - math.sqrt(1 - ab[t]) * eps) / math.sqrt(ab[t])
        ab_prev = ab[prev] if prev is not None else 1.0
        expected = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_bootstrap_targets_use_bank():
    phi = make_one_hot(3, 0.5)
    model = DiffusionOutcomeModel(3, 0.5, np.eye(3), SMALL)
    tgt = bootstrap_targets(model, np.array([0, 1]), np.array([1, 2]), phi, 0.5, np.random.default_rng(0))
    # before any refresh the bank holds phi itself
    np.testing.assert_allclose(tgt, phi.table[[0, 1]] + 0.5 * phi.table[[1, 2]])


def test_train_on_dataset_runs_and_refreshes_bank(chain):
    _, ds, phi = chain
    cfg = DiffusionConfig(hidden=(8, 8), cond_hidden=8, time_dim=4, state_freqs=1, bank_warmup=5, bank_refresh=5,
                          bank_size=4, bank_ddim_steps=2)
    model = DiffusionOutcomeModel(3, 0.5, np.eye(3), cfg)
    losses = train_on_dataset(model, ds, phi, np.random.default_rng(0), 12, 8, OptimizerState())
    assert len(losses) == 12 and model.train_steps == 12
    assert model.bank.shape == (3, 4, 3)
    assert not np.allclose(model.bank, phi.table[:, None, :])


def test_untrained_and_bad_inputs():
    model = DiffusionOutcomeModel(2, 0.9, np.zeros((1, 1)), SMALL)
    with pytest.raises(UntrainedModelError):
        ddim_sample(model, 0, np.random.default_rng(0))
    with pytest.raises(UntrainedModelError):
        sample_outcomes(model, 0, 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        diffusion_train_step(model, np.array([], dtype=int), None, None, None, np.random.default_rng(0),
                             OptimizerState(), targets=np.zeros((0, 2)))


def test_state_round_trip(trained):
    model, _ = trained
    meta, arrays = model.state_dict()
    back = DiffusionOutcomeModel.from_state(meta, arrays)
    a = model.sample(np.array([0, 1]), np.random.default_rng(9))
    b = back.sample(np.array([0, 1]), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert back.train_steps == model.train_steps
