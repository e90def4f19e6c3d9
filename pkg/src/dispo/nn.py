"""Small dense networks with FiLM conditioning, hand-written backprop, AdamW, schedules and EMA.

Tensors are plain numpy arrays. Parameters live in flat ``dict[str, ndarray]``
collections so optimizers, EMA shadows and checkpoints treat every network alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dispo.errors import ContractError

ACTIVATIONS = ("relu", "sine", "cosine", "identity")

Params = dict[str, np.ndarray]


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sine":
        return np.sin(z)
    if name == "cosine":
        return np.cos(z)
    return z


def _act_grad(name: str, z: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "sine":
        return g * np.cos(z)
    if name == "cosine":
        return -g * np.sin(z)
    return g


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    activation: str = "relu"
    film: bool = False


@dataclass
class DenseNet:
    """Stack of dense layers; a FiLM layer computes ``act(g * (x W + b) + h)``
    where ``[g, h] = cond @ fw + fb`` comes from the conditioning vector."""

    layers: tuple[LayerSpec, ...]
    params: Params
    cond_dim: int = 0

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ContractError(f"layer widths {prev.n_out} -> {nxt.n_in} do not chain")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"unknown activation {layer.activation!r}")
            if layer.film:
                if self.cond_dim <= 0:
                    raise ContractError("FiLM layers need a positive cond_dim")
                if self.params[f"l{i}.fw"].shape != (self.cond_dim, 2 * layer.n_out):
                    raise ContractError("FiLM conditioner width must be 2 x layer width")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def dtype(self):
        return self.params["l0.w"].dtype

    def astype(self, dtype) -> "DenseNet":
        return DenseNet(self.layers, {k: v.astype(dtype) for k, v in self.params.items()}, self.cond_dim)

    def copy(self) -> "DenseNet":
        return DenseNet(self.layers, {k: v.copy() for k, v in self.params.items()}, self.cond_dim)

    def with_params(self, params: Params) -> "DenseNet":
        return DenseNet(self.layers, params, self.cond_dim)


def init_dense_net(
    widths: list[int],
    activations: list[str],
    rng: np.random.Generator,
    film: list[bool] | None = None,
    cond_dim: int = 0,
    dtype=np.float32,
    film_scale: float = 0.1,
) -> DenseNet:
    """He-initialized network; FiLM heads start near the identity modulation."""
    if len(activations) != len(widths) - 1:
        raise ContractError("need one activation per layer")
    film = film or [False] * len(activations)
    layers, params = [], {}
    for i, (n_in, n_out, act, use_film) in enumerate(zip(widths, widths[1:], activations, film)):
        layers.append(LayerSpec(n_in, n_out, act, use_film))
        gain = 2.0 if act == "relu" else 1.0
        params[f"l{i}.w"] = rng.normal(0.0, math.sqrt(gain / n_in), size=(n_in, n_out)).astype(dtype)
        params[f"l{i}.b"] = np.zeros(n_out, dtype=dtype)
        if use_film:
            params[f"l{i}.fw"] = rng.normal(0.0, film_scale / math.sqrt(cond_dim), size=(cond_dim, 2 * n_out)).astype(dtype)
            params[f"l{i}.fb"] = np.concatenate([np.ones(n_out), np.zeros(n_out)]).astype(dtype)
    return DenseNet(tuple(layers), params, cond_dim)


def forward(net: DenseNet, x: np.ndarray, cond: np.ndarray | None = None, return_cache: bool = False):
    """Evaluate ``net`` on a batch ``x`` of shape ``(B, n_in)``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ContractError(f"input shape {x.shape} does not match network input width {net.n_in}")
    needs_cond = any(layer.film for layer in net.layers)
    if needs_cond:
        if cond is None:
            raise ContractError("network has FiLM layers but no conditioning was given")
        cond = np.asarray(cond)
        if cond.shape != (x.shape[0], net.cond_dim):
            raise ContractError(f"conditioning shape {cond.shape} does not match ({x.shape[0]}, {net.cond_dim})")
    p = net.params
    caches = []
    h = x
    for i, layer in enumerate(net.layers):
        pre = h @ p[f"l{i}.w"] + p[f"l{i}.b"]
        gain = shift = None
        z = pre
        if layer.film:
            gs = cond @ p[f"l{i}.fw"] + p[f"l{i}.fb"]
            gain, shift = gs[:, : layer.n_out], gs[:, layer.n_out:]
            z = gain * pre + shift
        caches.append((h, pre, gain, z))
        h = _act(layer.activation, z)
    if return_cache:
        return h, (caches, cond)
    return h


def backward(net: DenseNet, cache, output_grad: np.ndarray) -> tuple[Params, np.ndarray, np.ndarray | None]:
    """Gradients of ``<output_grad, net(x, cond)>`` w.r.t. parameters, input and conditioning."""
    caches, cond = cache
    p = net.params
    grads: Params = {}
    g = np.asarray(output_grad)
    g_cond = None if cond is None else np.zeros_like(cond)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_in, pre, gain, z = caches[i]
        if g.shape != z.shape:
            raise ContractError(f"output gradient shape {g.shape} does not match {z.shape}")
        gz = _act_grad(layer.activation, z, g)
        if layer.film:
            g_gs = np.concatenate([gz * pre, gz], axis=1)
            grads[f"l{i}.fw"] = cond.T @ g_gs
            grads[f"l{i}.fb"] = g_gs.sum(axis=0)
            g_cond = g_cond + g_gs @ p[f"l{i}.fw"].T
            gpre = gz * gain
        else:
            gpre = gz
        grads[f"l{i}.w"] = h_in.T @ gpre
        grads[f"l{i}.b"] = gpre.sum(axis=0)
        g = gpre @ p[f"l{i}.w"].T
    return grads, g, g_cond


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all entries of the squared error, and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    probs = softmax(logits.astype(np.float64))
    n = len(labels)
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-12))
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""

    base_lr: float = 3e-4
    warmup_steps: int = 500
    total_steps: int = 100_000

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ContractError("warmup_steps must not exceed total_steps")

    def __call__(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if step >= self.total_steps:
            return 0.0
        span = self.total_steps - self.warmup_steps
        frac = (step - self.warmup_steps) / span if span else 1.0
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: LrSchedule | None = None
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr if self.schedule is None else self.schedule(self.step)


def adamw_step(state: OptimizerState, params: Params, grads: Params) -> Params:
    """One decoupled-weight-decay Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    lr = state.current_lr()
    b1, b2 = state.betas
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


@dataclass
class EmaShadow:
    decay: float
    shadow: Params

    @classmethod
    def of(cls, params: Params, decay: float = 0.995) -> "EmaShadow":
        if not 0.0 <= decay < 1.0:
            raise ContractError("EMA decay must lie in [0, 1)")
        return cls(decay, {k: v.copy() for k, v in params.items()})


def ema_update(ema: EmaShadow, params: Params) -> EmaShadow:
    """``shadow <- decay * shadow + (1 - decay) * params`` for every tensor."""
    d = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise ContractError(f"EMA shadow {name} has shape {s.shape}, parameter {p.shape}")
        s *= d
        s += (1.0 - d) * p
    return ema


def net_state(net: DenseNet, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        "layers": [[l.n_in, l.n_out, l.activation, l.film] for l in net.layers],
        "cond_dim": net.cond_dim,
    }
    return meta, {f"{prefix}.{k}": v for k, v in net.params.items()}


def net_from_state(meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> DenseNet:
    layers = tuple(LayerSpec(int(a), int(b), str(c), bool(d)) for a, b, c, d in meta["layers"])
    start = prefix + "."
    params = {k[len(start):]: v.copy() for k, v in arrays.items() if k.startswith(start)}
    return DenseNet(layers, params, int(meta["cond_dim"]))


def optimizer_state(opt: OptimizerState, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
    sched = opt.schedule
    meta = {
        "lr": opt.lr, "weight_decay": opt.weight_decay, "betas": list(opt.betas), "eps": opt.eps,
        "step": opt.step,
        "schedule": None if sched is None else [sched.base_lr, sched.warmup_steps, sched.total_steps],
    }
    arrays = {f"{prefix}.m.{k}": v for k, v in opt.m.items()}
    arrays.update({f"{prefix}.v.{k}": v for k, v in opt.v.items()})
    return meta, arrays


def optimizer_from_state(meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> OptimizerState:
    sched = meta["schedule"]
    m_pre, v_pre = f"{prefix}.m.", f"{prefix}.v."
    return OptimizerState(
        lr=meta["lr"], weight_decay=meta["weight_decay"], betas=tuple(meta["betas"]), eps=meta["eps"],
        schedule=None if sched is None else LrSchedule(sched[0], int(sched[1]), int(sched[2])),
        step=int(meta["step"]),
        m={k[len(m_pre):]: v.copy() for k, v in arrays.items() if k.startswith(m_pre)},
        v={k[len(v_pre):]: v.copy() for k, v in arrays.items() if k.startswith(v_pre)},
    )
