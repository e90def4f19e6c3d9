import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispo.errors import ContractError
from dispo.nn import (
    DenseNet, EmaShadow, LayerSpec, LrSchedule, OptimizerState, adamw_step, backward, cross_entropy_loss,
    ema_update, forward, init_dense_net, mse_loss, net_from_state, net_state, optimizer_from_state,
    optimizer_state, softmax,
)

from gradcheck import dense_net_error, noise_loss_error, numeric_grad, rel_error

# output of init_dense_net([3, 4, 2], relu/identity, seed 42, float64) at x = (0.5, -1, 2),
# frozen from a scalar-by-scalar evaluation of the same weights
GOLDEN = np.array([1.1977502046569026, 0.11942489734459505])


def _golden_net():
    return init_dense_net([3, 4, 2], ["relu", "identity"], np.random.default_rng(42), dtype=np.float64)


def test_golden_vector():
    out = forward(_golden_net(), np.array([[0.5, -1.0, 2.0]]))
    np.testing.assert_allclose(out[0], GOLDEN, rtol=1e-12)


def test_forward_matches_scalar_evaluation():
    net = _golden_net()
    x = np.array([0.3, 0.1, -0.7])
    p = net.params
    h = [max(0.0, sum(x[i] * p["l0.w"][i, j] for i in range(3)) + p["l0.b"][j]) for j in range(4)]
    o = [sum(h[j] * p["l1.w"][j, k] for j in range(4)) + p["l1.b"][k] for k in range(2)]
    np.testing.assert_allclose(forward(net, x[None])[0], o, rtol=1e-12)


def test_identity_layer():
    net = DenseNet((LayerSpec(3, 3, "identity"),), {"l0.w": np.eye(3), "l0.b": np.zeros(3)})
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(forward(net, x), x)


def test_film_identity_modulation():
    """Gain 1 and shift 0 reduce a FiLM layer to the plain dense layer."""
    rng = np.random.default_rng(0)
    film = init_dense_net([3, 4], ["sine"], rng, film=[True], cond_dim=2, dtype=np.float64)
    film.params["l0.fw"][:] = 0.0
    plain = DenseNet((LayerSpec(3, 4, "sine"),), {"l0.w": film.params["l0.w"], "l0.b": film.params["l0.b"]})
    x, cond = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    np.testing.assert_allclose(forward(film, x, cond), forward(plain, x))


def test_film_modulation_formula():
    rng = np.random.default_rng(1)
    net = init_dense_net([2, 3], ["identity"], rng, film=[True], cond_dim=2, dtype=np.float64, film_scale=1.0)
    x, cond = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    p = net.params
    gs = cond @ p["l0.fw"] + p["l0.fb"]
    expected = gs[:, :3] * (x @ p["l0.w"] + p["l0.b"]) + gs[:, 3:]
    np.testing.assert_allclose(forward(net, x, cond), expected)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("acts", [("sine", "relu", "identity"), ("cosine", "sine", "identity")])
def test_dense_gradients(seed, acts):
    assert dense_net_error(seed, film=False, activations=acts) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_film_gradients(seed):
    assert dense_net_error(seed, film=True) < 1e-4


@pytest.mark.parametrize("seed", range(2))
def test_noise_loss_gradients(seed):
    assert noise_loss_error(seed) < 1e-4


def test_loss_gradients():
    rng = np.random.default_rng(3)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, g = mse_loss(pred, target)
    assert rel_error(g, numeric_grad(lambda: mse_loss(pred, target)[0], pred)) < 1e-6
    logits, labels = rng.normal(size=(5, 4)), rng.integers(4, size=5)
    _, g = cross_entropy_loss(logits, labels)
    assert rel_error(g, numeric_grad(lambda: cross_entropy_loss(logits, labels)[0], logits)) < 1e-6


def test_softmax_is_shift_invariant():
    z = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(softmax(z), softmax(z + 1000.0))
    assert softmax(z).sum() == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(g=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), lr=st.floats(1e-5, 1e-1))
def test_adamw_first_step_closed_form(g, lr):
    p = {"x": np.array([0.7])}
    state = OptimizerState(lr=lr, weight_decay=0.0)
    adamw_step(state, p, {"x": np.array([g])})
    # bias-corrected first moments are g and g^2, so the step is lr * g / (|g| + eps)
    expected = 0.7 - lr * g / (math.sqrt(g * g) + state.eps)
    assert p["x"][0] == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_adamw_decoupled_weight_decay():
    p = {"x": np.array([2.0])}
    state = OptimizerState(lr=0.1, weight_decay=0.5)
    adamw_step(state, p, {"x": np.array([0.0])})
    assert p["x"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_shape_mismatch():
    with pytest.raises(ContractError):
        adamw_step(OptimizerState(), {"x": np.zeros(2)}, {"x": np.zeros(3)})


def test_lr_schedule_endpoints():
    sched = LrSchedule(3e-4, 500, 10_000)
    assert sched(0) == 0.0
    assert sched(250) == pytest.approx(1.5e-4)
    assert sched(500) == pytest.approx(3e-4)
    assert sched(10_000) == 0.0
    assert sched(5250) == pytest.approx(1.5e-4)
    assert OptimizerState().lr == 3e-4
    with pytest.raises(ContractError):
        LrSchedule(1e-3, 10, 5)


def test_ema_update():
    params = {"w": np.array([1.0, 2.0])}
    ema = EmaShadow.of(params, 0.9)
    params["w"][:] = [3.0, 4.0]
    ema_update(ema, params)
    np.testing.assert_allclose(ema.shadow["w"], [1.2, 2.2])
    with pytest.raises(ContractError):
        EmaShadow.of(params, 1.0)


def test_shape_contracts():
    net = _golden_net()
    with pytest.raises(ContractError):
        forward(net, np.zeros((1, 4)))
    film = init_dense_net([2, 3], ["relu"], np.random.default_rng(0), film=[True], cond_dim=2)
    with pytest.raises(ContractError):
        forward(film, np.zeros((1, 2)))
    with pytest.raises(ContractError):
        init_dense_net([2, 3], ["relu", "relu"], np.random.default_rng(0))
    with pytest.raises(ContractError):
        DenseNet((LayerSpec(2, 3), LayerSpec(4, 1)), {})
    _, cache = forward(net, np.zeros((1, 3)), return_cache=True)
    with pytest.raises(ContractError):
        backward(net, cache, np.zeros((1, 5)))


def test_state_round_trip():
    net = init_dense_net([2, 3, 1], ["relu", "identity"], np.random.default_rng(0), film=[True, False], cond_dim=2)
    meta, arrays = net_state(net, "n")
    back = net_from_state(meta, arrays, "n")
    x, c = np.ones((2, 2), dtype=np.float32), np.ones((2, 2), dtype=np.float32)
    np.testing.assert_array_equal(forward(back, x, c), forward(net, x, c))
    opt = OptimizerState(lr=1e-3, schedule=LrSchedule(1e-3, 1, 10))
    adamw_step(opt, net.params, {k: np.ones_like(v) for k, v in net.params.items()})
    m, a = optimizer_state(opt, "opt")
    opt2 = optimizer_from_state(m, a, "opt")
    assert opt2.step == 1 and opt2.schedule == opt.schedule
    for k in opt.m:
        np.testing.assert_array_equal(opt2.m[k], opt.m[k])
