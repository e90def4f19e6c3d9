"""Conditional denoising diffusion model of ``p(psi | s)`` trained on bootstrapped targets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from dispo.errors import ContractError, UntrainedModelError
from dispo.features import FeatureMap
from dispo.mdp import TransitionDataset
from dispo.nn import (
    DenseNet,
    EmaShadow,
    OptimizerState,
    Params,
    adamw_step,
    backward,
    ema_update,
    forward,
    init_dense_net,
    mse_loss,
)


@dataclass(frozen=True)
class DiffusionConfig:
    n_train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 50
    hidden: tuple[int, ...] = (64, 128)
    cond_hidden: int = 128
    time_dim: int = 16
    state_freqs: int = 3
    clip_x0: bool = True
    ema_decay: float = 0.995
    bank_size: int = 64
    bank_refresh: int = 100
    bank_ddim_steps: int = 10
    bank_clip_margin: float = 0.25
    bank_warmup: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def linear_beta_schedule(n: int, start: float, end: float) -> tuple[np.ndarray, np.ndarray]:
    betas = np.linspace(start, end, n, dtype=np.float64)
    return betas, np.cumprod(1.0 - betas)


def encode_states(inputs: np.ndarray, n_freqs: int) -> np.ndarray:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` expansion of per-state observations."""
    x = np.asarray(inputs, dtype=np.float64)
    parts = [x]
    for k in range(n_freqs):
        parts += [np.sin((2.0 ** k) * math.pi * x), np.cos((2.0 ** k) * math.pi * x)]
    return np.concatenate(parts, axis=1)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half, 1))
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _split(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


class DiffusionOutcomeModel:
    """Noise-prediction network ``eps(psi_t, t, s)``: a conditioning encoder over
    (state encoding, timestep embedding) feeding FiLM layers of an MLP over ``psi_t``."""

    def __init__(self, d: int, gamma: float, state_inputs: np.ndarray, config: DiffusionConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.d = int(d)
        self.gamma = float(gamma)
        self.config = config or DiffusionConfig()
        self.dtype = dtype
        self.state_inputs = np.asarray(state_inputs, dtype=np.float64)
        self.state_enc = encode_states(self.state_inputs, self.config.state_freqs).astype(dtype)
        c = self.config
        rng = np.random.default_rng(seed)
        enc = init_dense_net([self.state_enc.shape[1] + c.time_dim, c.cond_hidden, c.cond_hidden],
                             ["relu", "relu"], rng, dtype=dtype)
        widths = [self.d, *c.hidden, self.d]
        acts = ["relu"] * len(c.hidden) + ["identity"]
        film = [True] * len(c.hidden) + [False]
        main = init_dense_net(widths, acts, rng, film=film, cond_dim=c.cond_hidden, dtype=dtype)
        self._enc_layers, self._main_layers = enc.layers, main.layers
        self.params: Params = {**{f"enc.{k}": v for k, v in enc.params.items()},
                               **{f"main.{k}": v for k, v in main.params.items()}}
        self.ema = EmaShadow.of(self.params, c.ema_decay)
        self.betas, self.alphas_cumprod = linear_beta_schedule(c.n_train_timesteps, c.beta_start, c.beta_end)
        self.bank: np.ndarray | None = None
        self.trained = False
        self.train_steps = 0

    @property
    def n_states(self) -> int:
        return len(self.state_inputs)

    def nets(self, params: Params | None = None) -> tuple[DenseNet, DenseNet]:
        params = self.params if params is None else params
        enc = DenseNet(self._enc_layers, _split(params, "enc."))
        main = DenseNet(self._main_layers, _split(params, "main."), self.config.cond_hidden)
        return enc, main

    def cond_input(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        temb = time_embedding(t, self.config.time_dim).astype(self.dtype)
        return np.concatenate([self.state_enc[np.asarray(s)], temb], axis=1)

    def predict_noise(self, x: np.ndarray, t: np.ndarray, s: np.ndarray, params: Params | None = None,
                      return_cache: bool = False):
        enc, main = self.nets(params)
        c_in = self.cond_input(s, t)
        cond, enc_cache = forward(enc, c_in, return_cache=True)
        eps, main_cache = forward(main, np.asarray(x, dtype=self.dtype), cond, return_cache=True)
        if return_cache:
            return eps, (enc_cache, main_cache)
        return eps

    def noise_loss(self, x0: np.ndarray, s: np.ndarray, t: np.ndarray, noise: np.ndarray,
                   params: Params | None = None) -> tuple[float, Params]:
        """Denoising loss ``mean ||noise - eps(sqrt(ab) x0 + sqrt(1-ab) noise, t, s)||^2`` and its gradients."""
        params = self.params if params is None else params
        ab = self.alphas_cumprod[t][:, None]
        x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(self.dtype)
        eps, (enc_cache, main_cache) = self.predict_noise(x_t, t, s, params, return_cache=True)
        loss, g_eps = mse_loss(eps, np.asarray(noise, dtype=eps.dtype))
        enc, main = self.nets(params)
        g_main, _, g_cond = backward(main, main_cache, g_eps)
        g_enc, _, _ = backward(enc, enc_cache, g_cond)
        grads = {**{f"enc.{k}": v for k, v in g_enc.items()}, **{f"main.{k}": v for k, v in g_main.items()}}
        return loss, grads

    def ddim_timesteps(self, steps: int | None = None) -> np.ndarray:
        steps = self.config.ddim_steps if steps is None else steps
        ratio = self.config.n_train_timesteps // steps
        return (np.arange(steps) * ratio)[::-1].astype(np.int64)

    def sample(self, states, rng: np.random.Generator, guidance: tuple[np.ndarray, float] | None = None,
               steps: int | None = None, use_ema: bool = True, x_init: np.ndarray | None = None,
               clip: bool = True, clip_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
        """Deterministic DDIM chains, one per entry of ``states``, from ``N(0, I)`` draws.

        With ``guidance=(w, beta)`` each predicted noise is shifted to
        ``eps - beta * sqrt(1 - ab_t) * w`` before the update. Predicted clean
        samples (and the output) are clipped to ``clip_range``; ``clip=False``
        disables clipping altogether.
        """
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        n = len(states)
        params = self.ema.shadow if use_ema else self.params
        x = rng.standard_normal((n, self.d)) if x_init is None else np.array(x_init, dtype=np.float64)
        ts = self.ddim_timesteps(steps)
        ratio = self.config.n_train_timesteps // len(ts)
        lo, hi = clip_range
        shift = None
        if guidance is not None:
            w, beta = guidance
            if beta:
                shift = float(beta) * np.asarray(w, dtype=np.float64)[None, :]
        for t in ts:
            ab = self.alphas_cumprod[t]
            t_prev = t - ratio
            ab_prev = self.alphas_cumprod[t_prev] if t_prev >= 0 else 1.0
            eps = self.predict_noise(x, np.full(n, t), states, params).astype(np.float64)
            if shift is not None:
                eps = eps - math.sqrt(1.0 - ab) * shift
            x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            if clip and self.config.clip_x0:
                x0 = np.clip(x0, lo, hi)
                # keep the update consistent with the clipped estimate
                eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        return np.clip(x, lo, hi) if clip else x

    def refresh_bank(self, rng: np.random.Generator) -> None:
        """Redraw the cached EMA samples used as bootstrap successors.

        They are clipped to a box padded by ``bank_clip_margin``: clipping noise
        exactly at zero would add a positive bias that the backup accumulates
        over the horizon, while no clipping lets early, untrained chains explode.
        """
        m, pad = self.config.bank_size, self.config.bank_clip_margin
        states = np.repeat(np.arange(self.n_states), m)
        out = self.sample(states, rng, steps=self.config.bank_ddim_steps, clip_range=(-pad, 1.0 + pad))
        self.bank = out.reshape(self.n_states, m, self.d)

    def init_bank(self, phi: FeatureMap) -> None:
        self.bank = np.repeat(phi.table[:, None, :], self.config.bank_size, axis=1)

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "diffusion", "d": self.d, "gamma": self.gamma, "config": asdict(self.config),
            "dtype": np.dtype(self.dtype).str, "trained": self.trained, "train_steps": self.train_steps,
            "ema_decay": self.ema.decay, "has_bank": self.bank is not None,
        }
        arrays = {f"outcome.params.{k}": v for k, v in self.params.items()}
        arrays.update({f"outcome.ema.{k}": v for k, v in self.ema.shadow.items()})
        arrays["outcome.state_inputs"] = self.state_inputs
        if self.bank is not None:
            arrays["outcome.bank"] = self.bank
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "DiffusionOutcomeModel":
        model = cls(meta["d"], meta["gamma"], arrays["outcome.state_inputs"],
                    DiffusionConfig.from_dict(meta["config"]), dtype=np.dtype(meta["dtype"]).type)
        model.params = {k[len("outcome.params."):]: v.copy() for k, v in arrays.items() if k.startswith("outcome.params.")}
        shadow = {k[len("outcome.ema."):]: v.copy() for k, v in arrays.items() if k.startswith("outcome.ema.")}
        model.ema = EmaShadow(meta["ema_decay"], shadow)
        model.bank = arrays["outcome.bank"].copy() if meta["has_bank"] else None
        model.trained = meta["trained"]
        model.train_steps = meta["train_steps"]
        return model


def bootstrap_targets(model: DiffusionOutcomeModel, s: np.ndarray, s_next: np.ndarray, phi: FeatureMap,
                      gamma: float, rng: np.random.Generator) -> np.ndarray:
    """``phi(s) + gamma * psi'`` with ``psi'`` drawn from the cached EMA samples at ``s'``."""
    if model.bank is None:
        model.init_bank(phi)
    pick = rng.integers(model.bank.shape[1], size=len(s_next))
    return phi.table[s] + gamma * model.bank[s_next, pick]


def diffusion_train_step(
    model: DiffusionOutcomeModel,
    s: np.ndarray,
    s_next: np.ndarray | None,
    phi: FeatureMap | None,
    gamma: float | None,
    rng: np.random.Generator,
    opt: OptimizerState,
    targets: np.ndarray | None = None,
) -> float:
    """One gradient step of the noise-prediction loss; also advances the EMA shadow.

    ``targets`` overrides the bootstrapped ``phi(s) + gamma psi'`` (used for frozen
    synthetic targets and to share targets with the readout).
    """
    s = np.asarray(s, dtype=np.int64)
    if len(s) == 0:
        raise ContractError("minibatch is empty")
    if targets is None:
        targets = bootstrap_targets(model, s, np.asarray(s_next, dtype=np.int64), phi, gamma, rng)
    t = rng.integers(model.config.n_train_timesteps, size=len(s))
    noise = rng.standard_normal((len(s), model.d))
    loss, grads = model.noise_loss(np.asarray(targets, dtype=np.float64), s, t, noise)
    adamw_step(opt, model.params, grads)
    ema_update(model.ema, model.params)
    model.trained = True
    model.train_steps += 1
    return loss


def ddim_sample(model: DiffusionOutcomeModel, s: int, rng: np.random.Generator,
                guidance: tuple[np.ndarray, float] | None = None, n: int = 1) -> np.ndarray:
    if not model.trained:
        raise UntrainedModelError("diffusion model has not been trained")
    out = model.sample(np.full(n, s), rng, guidance=guidance)
    return out[0] if n == 1 else out


def sample_diffusion(model: DiffusionOutcomeModel, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if not model.trained:
        raise UntrainedModelError("diffusion model has not been trained")
    return model.sample(np.full(n, s), rng)


def train_on_dataset(
    model: DiffusionOutcomeModel,
    dataset: TransitionDataset,
    phi: FeatureMap,
    rng: np.random.Generator,
    steps: int,
    batch_size: int,
    opt: OptimizerState,
    readout=None,
    readout_opt: OptimizerState | None = None,
    log_every: int = 0,
    logger=None,
) -> list[float]:
    """Bootstrapped training loop; the readout (if any) sees the same targets each step."""
    losses = []
    n = len(dataset)
    if model.bank is None:
        model.init_bank(phi)
    for step in range(steps):
        done = model.train_steps
        if done >= model.config.bank_warmup and done % model.config.bank_refresh == 0:
            model.refresh_bank(rng)
        idx = rng.integers(n, size=batch_size)
        s, a, s2 = dataset.s[idx], dataset.a[idx], dataset.s_next[idx]
        targets = bootstrap_targets(model, s, s2, phi, model.gamma, rng)
        losses.append(diffusion_train_step(model, s, s2, phi, model.gamma, rng, opt, targets=targets))
        if readout is not None:
            readout.train_step(s, targets, a, readout_opt)
        if logger is not None and log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    return losses
