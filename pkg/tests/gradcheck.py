"""Central finite-difference checks shared by the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from dispo.nn import backward, forward, init_dense_net
from dispo.outcome import DiffusionConfig, DiffusionOutcomeModel

STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)))


def numeric_grad(f, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        hi = f()
        arr[i] = old - step
        lo = f()
        arr[i] = old
        out[i] = (hi - lo) / (2 * step)
    return out


def dense_net_error(seed: int, film: bool, activations=("sine", "relu", "identity")) -> float:
    """Largest relative error over every parameter, input and conditioning entry of a random net."""
    rng = np.random.default_rng(seed)
    widths = [3, 5, 4, 2]
    cond_dim = 3 if film else 0
    net = init_dense_net(widths, list(activations), rng, film=[film, film, False] if film else None,
                         cond_dim=cond_dim, dtype=np.float64, film_scale=1.0)
    x = rng.normal(size=(4, 3))
    cond = rng.normal(size=(4, cond_dim)) if film else None
    probe = rng.normal(size=(4, 2))

    def f():
        return float(np.sum(forward(net, x, cond) * probe))

    _, cache = forward(net, x, cond, return_cache=True)
    grads, g_x, g_cond = backward(net, cache, probe)
    errs = [rel_error(grads[k], numeric_grad(f, net.params[k])) for k in net.params]
    errs.append(rel_error(g_x, numeric_grad(f, x)))
    if film:
        errs.append(rel_error(g_cond, numeric_grad(f, cond)))
    return max(errs)


def noise_loss_error(seed: int) -> float:
    """Largest relative error of the noise-prediction loss gradient over all parameters."""
    rng = np.random.default_rng(seed)
    cfg = DiffusionConfig(n_train_timesteps=100, hidden=(6, 6), cond_hidden=5, time_dim=4, state_freqs=1)
    inputs = rng.uniform(size=(4, 2))
    model = DiffusionOutcomeModel(3, 0.9, inputs, cfg, seed=seed, dtype=np.float64)
    x0 = rng.uniform(size=(5, 3))
    s = rng.integers(4, size=5)
    t = rng.integers(100, size=5)
    noise = rng.normal(size=(5, 3))
    _, grads = model.noise_loss(x0, s, t, noise)

    def f():
        return model.noise_loss(x0, s, t, noise)[0]

    return max(rel_error(grads[k], numeric_grad(f, model.params[k])) for k in model.params)
