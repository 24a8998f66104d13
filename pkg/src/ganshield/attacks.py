"""White-box attacks on a softmax classifier: FGSM, BIM, MIM, PGDM and VAM.

Every attack maps ``(C, X, y_true, cfg)`` to an :class:`AdversarialBatch`.
The four sign-gradient attacks respect an l-infinity budget ``epsilon``; VAM
moves each sample by ``epsilon`` in l2 along its most KL-sensitive direction.
All outputs are clipped to ``[clip_min, clip_max]``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .nets import Network, classify, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    alpha: float = 0.05
    steps: int = 10
    mu: float = 1.0
    vam_xi: float = 1e-2
    vam_power_iters: int = 1
    clip_min: float = -1.0
    clip_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("epsilon", "alpha", "mu", "vam_xi", "clip_min", "clip_max"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.vam_xi <= 0:
            raise ValueError("vam_xi must be > 0")
        if self.vam_power_iters < 1:
            raise ValueError("vam_power_iters must be >= 1")
        if self.clip_min >= self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        # epsilon == 0 pins every iterate to X, so alpha is irrelevant there
        if self.steps > 1 and self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon}) for iterative attacks")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class AdversarialBatch:
    x_orig: np.ndarray
    x_adv: np.ndarray
    attack: str
    config: AttackConfig
    success: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(self.success.mean())

    def records(self, labels):
        """One dict per sample: original and adversarial vectors, label, attack, config digest."""
        digest = self.config.digest()
        for i, (xo, xa, lab, ok) in enumerate(zip(self.x_orig, self.x_adv, labels, self.success)):
            yield {
                "index": i,
                "attack": self.attack,
                "label": int(lab),
                "success": bool(ok),
                "x_orig": xo.copy(),
                "x_adv": xa.copy(),
                "config": digest,
            }


def loss_gradient(C: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. the inputs (per-sample rows)."""

    def build(xv):
        return ad.sum(ad.softmax_cross_entropy(C.graph(xv), y))

    return ad.value_and_grad(build, [x]).gradients[0].numpy()


def _prepare(C: Network, X, cfg: AttackConfig):
    x = np.array(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != C.input_dim:
        raise ad.ShapeError("attack input", x.shape, (None, C.input_dim))
    if x.min() < cfg.clip_min or x.max() > cfg.clip_max:
        raise ValueError("attack inputs must already lie in [clip_min, clip_max]")
    return x


def _project(x_new, x, cfg: AttackConfig):
    return np.clip(np.clip(x_new, x - cfg.epsilon, x + cfg.epsilon), cfg.clip_min, cfg.clip_max)


def _finish(name, C, x, x_adv, y, cfg) -> AdversarialBatch:
    if y is None:
        y = classify(C, x)
    success = classify(C, x_adv) != np.asarray(y)
    return AdversarialBatch(x, x_adv, name, cfg, success)


def fgsm(C: Network, X, y_true, cfg: AttackConfig) -> AdversarialBatch:
    x = _prepare(C, X, cfg)
    g = loss_gradient(C, x, y_true)
    x_adv = np.clip(x + cfg.epsilon * np.sign(g), cfg.clip_min, cfg.clip_max)
    return _finish("fgsm", C, x, x_adv, y_true, cfg)


def _iterate(C, x, x0, y, cfg, mu=None):
    """Shared BIM/MIM/PGDM loop; the gradient is taken at the current iterate."""
    xk = x0
    g_acc = np.zeros_like(x)
    for _ in range(cfg.steps):
        g = loss_gradient(C, xk, y)
        if mu is not None:
            l1 = np.abs(g).sum(axis=1, keepdims=True)
            zero = l1[:, 0] == 0
            if zero.any():
                log.info("mim: %d sample(s) with zero gradient; normalized term set to 0", int(zero.sum()))
            g = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            g_acc = mu * g_acc + g
            g = g_acc
        xk = _project(xk + cfg.alpha * np.sign(g), x, cfg)
    return xk


def bim(C: Network, X, y_true, cfg: AttackConfig) -> AdversarialBatch:
    x = _prepare(C, X, cfg)
    return _finish("bim", C, x, _iterate(C, x, x, y_true, cfg), y_true, cfg)


def mim(C: Network, X, y_true, cfg: AttackConfig) -> AdversarialBatch:
    x = _prepare(C, X, cfg)
    return _finish("mim", C, x, _iterate(C, x, x, y_true, cfg, mu=cfg.mu), y_true, cfg)


def pgdm(C: Network, X, y_true, cfg: AttackConfig) -> AdversarialBatch:
    x = _prepare(C, X, cfg)
    rng = np.random.default_rng(cfg.seed)
    x0 = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), cfg.clip_min, cfg.clip_max)
    return _finish("pgdm", C, x, _iterate(C, x, x0, y_true, cfg), y_true, cfg)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def kl_gradient(C: Network, x: np.ndarray, r: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``r`` of sum_i KL(p_i || softmax(C(x_i + r_i)))."""

    def build(rv):
        # cross-entropy against the fixed p differs from KL by the constant H(p)
        return ad.sum(ad.softmax_cross_entropy(C.graph(ad.add(rv.tape.const(x), rv)), p))

    return ad.value_and_grad(build, [r]).gradients[0].numpy()


def vam(C: Network, X, cfg: AttackConfig, y_true=None) -> AdversarialBatch:
    """Virtual adversarial perturbation found by power iteration on the KL curvature."""
    x = _prepare(C, X, cfg)
    rng = np.random.default_rng(cfg.seed)
    p = predict(C, x)
    d = _unit_rows(rng.standard_normal(x.shape))
    for _ in range(cfg.vam_power_iters):
        g = kl_gradient(C, x, cfg.vam_xi * d, p)
        norms = np.linalg.norm(g, axis=1)
        flat = norms <= np.finfo(np.float64).tiny
        if flat.any():
            log.info("vam: KL gradient vanished for %d sample(s); using a random direction", int(flat.sum()))
            g[flat] = rng.standard_normal((int(flat.sum()), x.shape[1]))
        d = _unit_rows(g)
    x_adv = np.clip(x + cfg.epsilon * d, cfg.clip_min, cfg.clip_max)
    return _finish("vam", C, x, x_adv, y_true, cfg)


ATTACKS = {
    "fgsm": fgsm,
    "bim": bim,
    "mim": mim,
    "pgdm": pgdm,
    "vam": lambda C, X, y, cfg: vam(C, X, cfg, y_true=y),
}
LINF_ATTACKS = ("fgsm", "bim", "mim", "pgdm")


def run_attack(name: str, C: Network, X, y_true, cfg: AttackConfig) -> AdversarialBatch:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(C, X, y_true, cfg)
