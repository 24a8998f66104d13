"""Dense networks for the classifier, generator and discriminator, with trainers.

A :class:`Network` is an immutable stack of affine layers, each followed by
an activation. Forward passes come in two flavours: :func:`predict` is a
plain numpy evaluation, and :meth:`Network.graph` records the same math on an
autodiff tape so callers can differentiate w.r.t. inputs or parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor, Var

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax", "none")

# D outputs are clamped to this band before any log.
PROB_FLOOR = 1e-6
PROB_CEIL = 1.0 - 1e-6

COLLAPSE_LOSS = 1e-3
COLLAPSE_PATIENCE = 500


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layer:
    weight: str
    bias: str
    activation: str


@dataclass(frozen=True)
class Network:
    layers: tuple[Layer, ...]
    params: Mapping[str, Tensor]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        dim = self.input_dim
        names = set()
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            w, b = self.params[layer.weight], self.params[layer.bias]
            if w.shape[0] != dim or b.shape != (w.shape[1],):
                raise ad.ShapeError(f"layer {layer.weight}", w.shape, b.shape)
            dim = w.shape[1]
            names.update((layer.weight, layer.bias))
        if dim != self.output_dim:
            raise ValueError(f"last layer emits {dim}, expected {self.output_dim}")
        if len(names) != 2 * len(self.layers):
            raise ValueError("parameter names must be unique")

    @property
    def head(self) -> str:
        return self.layers[-1].activation

    @classmethod
    def mlp(cls, sizes: Sequence[int], hidden: str, head: str, rng: np.random.Generator, prefix: str = ""):
        """Xavier-uniform initialised MLP with zero biases."""
        layers, params = [], {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w, b = f"{prefix}{i}.W", f"{prefix}{i}.b"
            params[w] = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            params[b] = Tensor(np.zeros(fan_out))
            act = head if i == len(sizes) - 2 else hidden
            layers.append(Layer(w, b, act))
        return cls(tuple(layers), params, sizes[0], sizes[-1])

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Network":
        return replace(self, params={k: Tensor(params[k]) for k in self.params})

    def arrays(self) -> dict[str, np.ndarray]:
        """Mutable copies of the parameters."""
        return {k: v.numpy() for k, v in self.params.items()}

    def graph(self, x: Var, params: Mapping[str, Var] | None = None, apply_head: bool = True) -> Var:
        """Record the forward pass on ``x.tape``.

        Parameters not given in ``params`` enter the tape as constants. With a
        softmax head and ``apply_head=True`` the logits are returned anyway,
        since the only consumer of softmax is the cross-entropy primitive.
        """
        tape = x.tape
        params = params or {}
        h = x
        for i, layer in enumerate(self.layers):
            w = params.get(layer.weight) or tape.const(self.params[layer.weight])
            b = params.get(layer.bias) or tape.const(self.params[layer.bias])
            h = ad.affine(h, w, b)
            last = i == len(self.layers) - 1
            if last and not apply_head:
                break
            h = _apply_var(h, layer.activation)
        return h


def _apply_var(h: Var, act: str) -> Var:
    if act == "relu":
        return ad.relu(h)
    if act == "tanh":
        return ad.tanh(h)
    if act == "sigmoid":
        return ad.sigmoid(h)
    return h  # "none", and softmax which is folded into the cross-entropy


def _apply_np(h: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(h, 0.0)
    if act == "tanh":
        return np.tanh(h)
    if act == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * h))
    if act == "softmax":
        e = np.exp(h - h.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return h


def predict(net: Network, batch, apply_head: bool = True) -> np.ndarray:
    """Evaluate ``net`` on a (n, input_dim) batch. Pure."""
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ad.ShapeError("predict", h.shape, (None, net.input_dim))
    for i, layer in enumerate(net.layers):
        h = h @ net.params[layer.weight].data + net.params[layer.bias].data
        if i == len(net.layers) - 1 and not apply_head:
            break
        h = _apply_np(h, layer.activation)
    if not np.isfinite(h).all():
        raise NonFiniteError("predict")
    return h


def classify(net: Network, batch) -> np.ndarray:
    return predict(net, batch, apply_head=False).argmax(axis=1)


def accuracy(net: Network, batch, labels) -> float:
    return float((classify(net, batch) == np.asarray(labels)).mean())


def discriminator_prob(d_logit: Var) -> Var:
    """sigmoid followed by the probability clamp."""
    return ad.clip(ad.sigmoid(d_logit), PROB_FLOOR, PROB_CEIL)


# --- optimisation -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 500
    seed: int = 0
    latent_dim: int = 16
    checkpoint_every: int = 0
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("steps and checkpoint_every must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for k, g in grads.items():
            params[k] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def param_grads(net: Network, params: dict[str, np.ndarray], build) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradient of ``build(param_vars)`` w.r.t. every parameter of ``net``."""
    names = list(net.params)

    def builder(*leaves):
        return build(dict(zip(names, leaves)))

    res = ad.value_and_grad(builder, [params[k] for k in names])
    return res.loss, {k: res.gradients[i].numpy() for i, k in enumerate(names)}


def _check_params(params, what, step):
    for k, v in params.items():
        if not np.isfinite(v).all():
            raise TrainingError(f"{what} parameter {k} became non-finite at step {step}")


# --- classifier -------------------------------------------------------------


def train_classifier(X, y, cfg: TrainConfig, num_classes: int | None = None, trace: list | None = None) -> Network:
    """Fit a softmax MLP by minibatch cross-entropy.

    ``trace``, when given, receives the minibatch loss of every step.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(cfg.seed)
    net = Network.mlp([X.shape[1], *cfg.hidden, k], cfg.activation, "softmax", rng)
    params = net.arrays()
    opt = make_optimizer(cfg)
    n = X.shape[0]
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        xb, yb = X[idx], y[idx]

        def build(pv):
            tape = next(iter(pv.values())).tape
            logits = net.graph(tape.const(xb), pv)
            return ad.mean(ad.softmax_cross_entropy(logits, yb))

        try:
            loss, grads = param_grads(net, params, build)
        except NonFiniteError as exc:
            raise TrainingError(f"classifier loss became non-finite at step {step} ({exc})") from exc
        if trace is not None:
            trace.append(loss)
        with np.errstate(over="ignore", invalid="ignore"):
            opt.step(params, grads)
        _check_params(params, "classifier", step)
    return net.with_params(params)


# --- GAN --------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    step: int
    params: Mapping[str, Tensor]
    rng_state: bytes = b""
    version: int = 1

    def network(self, template: Network, prefix: str) -> Network:
        """Rebuild a network with ``template``'s layout from ``prefix``-ed params."""
        picked = {}
        for name, t in template.params.items():
            key = prefix + name
            if key not in self.params:
                raise KeyError(f"checkpoint at step {self.step} lacks parameter {key!r}")
            if self.params[key].shape != t.shape:
                raise ad.ShapeError(f"checkpoint parameter {key}", self.params[key].shape, t.shape)
            picked[name] = self.params[key]
        return replace(template, params=picked)


def _rng_blob(rng: np.random.Generator) -> bytes:
    import json

    return json.dumps(rng.bit_generator.state, sort_keys=True).encode()


def gan_templates(data_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> tuple[Network, Network]:
    g = Network.mlp([cfg.latent_dim, *cfg.hidden, data_dim], cfg.activation, "tanh", rng)
    d = Network.mlp([data_dim, *cfg.hidden, 1], cfg.activation, "sigmoid", rng)
    return g, d


def gan_value(G: Network, D: Network, x_real, z) -> float:
    """Empirical V(D, G) = mean log D(x) + mean log(1 - D(G(z))), clamped."""
    d_real = np.clip(predict(D, x_real), PROB_FLOOR, PROB_CEIL)
    d_fake = np.clip(predict(D, predict(G, z)), PROB_FLOOR, PROB_CEIL)
    return float(np.log(d_real).mean() + np.log(1.0 - d_fake).mean())


def discriminator_grads(G: Network, D: Network, d_params, x_real, z):
    """Loss (= -V) and its gradient w.r.t. D's parameters, G held fixed."""
    fake = predict(G, z)

    def build(pv):
        tape = next(iter(pv.values())).tape
        p_real = discriminator_prob(D.graph(tape.const(x_real), pv, apply_head=False))
        p_fake = discriminator_prob(D.graph(tape.const(fake), pv, apply_head=False))
        v = ad.mean(ad.log(p_real)) + ad.mean(ad.log(1.0 - p_fake))
        return -v

    return param_grads(D, d_params, build)


def generator_grads(G: Network, D: Network, g_params, z):
    """Non-saturating generator loss -mean log D(G(z)) and its gradient."""

    def build(pv):
        tape = next(iter(pv.values())).tape
        fake = G.graph(tape.const(z), pv)
        return -ad.mean(ad.log(discriminator_prob(D.graph(fake, apply_head=False))))

    return param_grads(G, g_params, build)


def train_gan(X, cfg: TrainConfig, trace: list | None = None) -> tuple[Network, Network, list[Checkpoint]]:
    """Alternating D/G updates on data in [-1, 1]^d.

    Checkpoints (parameters prefixed ``G.`` / ``D.``) are taken before the first
    update, every ``cfg.checkpoint_every`` steps, and after the last step.
    ``trace`` receives ``(d_loss, g_loss)`` per step.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ad.ShapeError("train_gan", X.shape)
    if np.abs(X).max() > 1.0:
        raise ValueError("GAN training data must lie in [-1, 1]")
    rng = np.random.default_rng(cfg.seed)
    G, D = gan_templates(X.shape[1], cfg, rng)
    gp, dp = G.arrays(), D.arrays()
    g_opt, d_opt = make_optimizer(cfg), make_optimizer(cfg)
    n = X.shape[0]
    checkpoints = []

    def snapshot(step):
        params = {f"G.{k}": Tensor(v) for k, v in gp.items()}
        params.update({f"D.{k}": Tensor(v) for k, v in dp.items()})
        checkpoints.append(Checkpoint(step, params, _rng_blob(rng)))

    snapshot(0)
    low_streak = 0
    for step in range(1, cfg.steps + 1):
        xb = X[rng.integers(0, n, size=min(cfg.batch_size, n))]
        try:
            G_now = G.with_params(gp)
            z = rng.standard_normal((xb.shape[0], cfg.latent_dim))
            d_loss, d_grads = discriminator_grads(G_now, D.with_params(dp), dp, xb, z)
            with np.errstate(over="ignore", invalid="ignore"):
                d_opt.step(dp, d_grads)
            _check_params(dp, "discriminator", step)
            z = rng.standard_normal((xb.shape[0], cfg.latent_dim))
            g_loss, g_grads = generator_grads(G_now, D.with_params(dp), gp, z)
            with np.errstate(over="ignore", invalid="ignore"):
                g_opt.step(gp, g_grads)
            _check_params(gp, "generator", step)
        except NonFiniteError as exc:
            raise TrainingError(f"GAN loss became non-finite at step {step} ({exc})") from exc
        if trace is not None:
            trace.append((d_loss, g_loss))
        low_streak = low_streak + 1 if d_loss < COLLAPSE_LOSS else 0
        if low_streak == COLLAPSE_PATIENCE:
            log.warning(
                "discriminator loss below %g for %d consecutive steps (step %d): possible mode collapse",
                COLLAPSE_LOSS,
                COLLAPSE_PATIENCE,
                step,
            )
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
            snapshot(step)
    if cfg.steps > 0:
        snapshot(cfg.steps)
    return G.with_params(gp), D.with_params(dp), checkpoints
