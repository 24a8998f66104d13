"""Detection by discriminator score and cleaning by latent-space descent.

Cleaning minimises, over the latent ``z`` of a trained generator ``G``::

    L(z) = ||G(z) - x||^2 / (2 sigma^2) - lambda_d * log D(G(z))

with plain gradient descent from several random starts, returning the
generator output of the best start. ``lambda_d = 0`` drops the discriminator
term (reconstruction-only purification).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import AdversarialBatch
from .nets import PROB_CEIL, PROB_FLOOR, Network, accuracy, discriminator_prob, predict

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


class CleaningError(RuntimeError):
    pass


def score(D: Network, X) -> np.ndarray:
    """Per-sample discriminator score, clamped into [1e-6, 1 - 1e-6]."""
    return np.clip(predict(D, X)[:, 0], PROB_FLOOR, PROB_CEIL)


def lp_average(values, p: float) -> float:
    """((1/N) sum v^p)^(1/p); p = inf gives the maximum."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("lp_average of an empty set")
    if p < 1:
        raise ValueError("p must be >= 1")
    if math.isinf(p):
        return float(v.max())
    if p == 1:
        return float(v.mean())
    return float(np.mean(v**p) ** (1.0 / p))


@dataclass(frozen=True)
class DetectionThreshold:
    tau: float
    p: float = 1.0
    attack: str = ""
    n_samples: int = 0
    accuracy_drop: float = float("nan")

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly inside (0, 1), got {self.tau}")
        if not self.p >= 1:
            raise ValueError("p must be >= 1")


MIN_ACCURACY_DROP = 0.20


def estimate_threshold(
    D: Network,
    C: Network,
    X,
    y,
    attack_fn: Callable[[Network, np.ndarray, np.ndarray], AdversarialBatch],
    p: float = 1.0,
) -> DetectionThreshold:
    """Calibrate tau as the L^p average of D's scores on adversarial samples.

    The attack must lower the classifier's accuracy by at least 20 points,
    otherwise its outputs do not count as adversarial and calibration fails.
    """
    X = np.asarray(X, dtype=np.float64)
    adv = attack_fn(C, X, y)
    drop = accuracy(C, X, y) - accuracy(C, adv.x_adv, y)
    if drop < MIN_ACCURACY_DROP:
        raise CalibrationError(
            f"{adv.attack} lowered accuracy by only {drop:.3f} (< {MIN_ACCURACY_DROP}); increase epsilon"
        )
    tau = lp_average(score(D, adv.x_adv), p)
    return DetectionThreshold(tau, p, adv.attack, len(X), drop)


def detect(D: Network, X, threshold: DetectionThreshold | float) -> np.ndarray:
    """True where the sample scores strictly below tau (flagged adversarial)."""
    tau = threshold.tau if isinstance(threshold, DetectionThreshold) else float(threshold)
    return score(D, X) < tau


# --- cleaning ----------------------------------------------------------------


@dataclass(frozen=True)
class CleaningConfig:
    sigma: float = 1.0
    eta: float = 0.05
    m: int = 200
    restarts: int = 8
    lambda_d: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and self.eta > 0):
            raise ValueError("sigma and eta must be > 0")
        if self.m < 1 or self.restarts < 1:
            raise ValueError("m and restarts must be >= 1")
        if self.lambda_d not in (0, 1):
            raise ValueError("lambda_d must be 0 or 1")


@dataclass(frozen=True)
class CleanResult:
    """Cleaning output for a batch of N samples with R restarts.

    ``traces[i, r]`` holds L(z) before each of the m updates plus the final
    value (NaN for a failed restart). ``z0`` keeps the starting latents.
    """

    x_clean: np.ndarray
    z_final: np.ndarray
    loss: np.ndarray
    traces: np.ndarray
    chosen: np.ndarray
    z0: np.ndarray


def initial_latents(cfg: CleaningConfig, latent_dim: int, sample_ids) -> np.ndarray:
    """z0 of shape (N, R, k); sample i's starts depend only on (seed, sample_ids[i])."""
    return np.stack(
        [np.random.default_rng([cfg.seed, int(i)]).standard_normal((cfg.restarts, latent_dim)) for i in sample_ids]
    )


def cleaning_loss(G: Network, D: Network, x: np.ndarray, sigma: float, lambda_d: int):
    """Builder for the summed per-row cleaning loss over latent rows ``z``.

    Returns ``(builder, rows)`` where ``rows[0]`` is set to the per-row loss
    Var after each call, so callers can read individual values off the tape.
    """
    inv = 1.0 / (2.0 * sigma * sigma)
    rows = [None]

    def build(z):
        gz = G.graph(z)
        per_row = ad.scale(ad.l2sq(ad.sub(gz, z.tape.const(x)), axis=1), inv)
        if lambda_d:
            logd = ad.log(discriminator_prob(D.graph(gz, apply_head=False)))
            per_row = ad.sub(per_row, ad.sum(logd, axis=1))
        rows[0] = per_row
        return ad.sum(per_row)

    return build, rows


def _evaluate(G, D, x, z, cfg):
    """Per-row loss and gradient; rows whose evaluation is non-finite are flagged."""
    build, rows = cleaning_loss(G, D, x, cfg.sigma, cfg.lambda_d)
    try:
        _, tape = ad.forward(build, [z])
        grad = ad.backward(tape, [0]).gradients[0].numpy()
        return tape.value(rows[0]).copy(), grad, np.zeros(len(z), dtype=bool)
    except (ad.NonFiniteError, FloatingPointError):
        if len(z) == 1:
            return np.full(1, np.nan), np.zeros_like(z), np.ones(1, dtype=bool)
    # isolate the offending rows
    losses, grads, bad = np.empty(len(z)), np.zeros_like(z), np.zeros(len(z), dtype=bool)
    for i in range(len(z)):
        losses[i : i + 1], grads[i : i + 1], bad[i : i + 1] = _evaluate(G, D, x[i : i + 1], z[i : i + 1], cfg)
    return losses, grads, bad


def clean(G: Network, D: Network, x, cfg: CleaningConfig, sample_ids=None) -> CleanResult:
    """Project ``x`` (one sample or an (N, d) batch) onto G's range.

    Each of the ``cfg.restarts`` starts runs ``cfg.m`` steps of
    ``z <- z - eta * grad L(z)``. A start that hits a non-finite value is
    retried once from the same z0 with eta halved; if it fails again it is
    dropped. The start with the lowest final loss wins (ties: lowest index).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != G.output_dim:
        raise ad.ShapeError("clean", X.shape, (None, G.output_dim))
    n, R, k, m = X.shape[0], cfg.restarts, G.input_dim, cfg.m
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    z0 = initial_latents(cfg, k, ids)

    # flatten (sample, restart) into rows
    z_start = z0.reshape(n * R, k)
    target = np.repeat(X, R, axis=0)
    z = z_start.copy()
    eta = np.full(n * R, cfg.eta)
    step = np.zeros(n * R, dtype=np.int64)
    retried = np.zeros(n * R, dtype=bool)
    failed = np.zeros(n * R, dtype=bool)
    traces = np.full((n * R, m + 1), np.nan)

    while True:
        active = np.flatnonzero(~failed & (step <= m))
        if active.size == 0:
            break
        loss, grad, bad = _evaluate(G, D, target[active], z[active], cfg)
        traces[active, step[active]] = loss
        moving = active[(step[active] < m) & ~bad]
        upd = z[moving] - eta[moving, None] * grad[(step[active] < m) & ~bad]
        bad_update = ~np.isfinite(upd).all(axis=1)
        z[moving] = np.where(bad_update[:, None], z[moving], upd)
        step[active] += 1
        broken = np.concatenate([active[bad], moving[bad_update]])
        for row in broken:
            if retried[row]:
                failed[row] = True
                log.warning("cleaning restart %d of sample %d failed twice", row % R, ids[row // R])
            else:
                retried[row] = True
                eta[row] *= 0.5
                z[row] = z_start[row]
                step[row] = 0
                traces[row] = np.nan
                log.info("cleaning restart %d of sample %d non-finite; retrying with eta=%g", row % R, ids[row // R], eta[row])

    final = traces[:, m].reshape(n, R).copy()
    final[failed.reshape(n, R)] = np.inf
    if np.isinf(final).all(axis=1).any():
        bad_ids = ids[np.isinf(final).all(axis=1)]
        raise CleaningError(f"all {R} cleaning restarts failed for sample(s) {bad_ids.tolist()}")
    chosen = np.argmin(final, axis=1)
    zs = z.reshape(n, R, k)
    z_best = zs[np.arange(n), chosen]
    res = CleanResult(
        x_clean=predict(G, z_best),
        z_final=z_best,
        loss=final[np.arange(n), chosen],
        traces=traces.reshape(n, R, m + 1),
        chosen=chosen,
        z0=z0,
    )
    if single:
        return CleanResult(res.x_clean[0], res.z_final[0], res.loss[0], res.traces[0], res.chosen[0], res.z0[0])
    return res
