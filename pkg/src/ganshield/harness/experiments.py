"""Desk-scale experiments: accuracy tables, score export and the GAN-quality sweep.

Each ``run_*`` function takes a resolved :class:`ExperimentConfig` and returns
an :class:`ExperimentReport`; nothing here writes to disk except the
``save_*`` helpers. Attacks and cleaning run over fixed-size chunks of the
test split on a bounded thread pool. Chunk boundaries do not depend on the
worker count, and every chunk draws its randomness from seeds fixed in
advance, so one worker and many workers give identical results.
"""
from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt_io
from .. import data
from ..attacks import AdversarialBatch, AttackConfig, run_attack
from ..defense import CleaningConfig, clean, estimate_threshold, score
from ..nets import Checkpoint, Network, accuracy, classify, gan_templates, train_classifier, train_gan
from .config import ConfigError, ExperimentConfig, sub_seed
from .reports import ExperimentReport

log = logging.getLogger(__name__)

GAN_FILE = "gan-step{:08d}.gshd"
GAN_FILE_RE = re.compile(r"gan-step(\d+)\.gshd$")
CLASSIFIER_FILE = "classifier.gshd"


@contextmanager
def stage(name: str):
    """Attach ``name`` to any exception escaping the block (outermost first)."""
    try:
        yield
    except Exception as exc:
        exc.run_context = [name, *getattr(exc, "run_context", [])]
        raise


# --- setup -------------------------------------------------------------------


@dataclass
class Models:
    train: data.Dataset
    valid: data.Dataset
    test: data.Dataset
    C: Network
    G: Network | None = None
    D: Network | None = None
    checkpoints: tuple[Checkpoint, ...] = ()


def load_dataset(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset, data.Dataset]:
    spec = cfg.dataset
    with stage(f"dataset {spec.name}"):
        if spec.name == "two-gaussians":
            ds = data.make_two_gaussians(spec.n_per_class, sub_seed(cfg.seed, "data"))
        else:
            if not spec.labels:
                raise ConfigError("an IDX dataset needs dataset.labels pointing at the label file")
            ds = data.load_idx_images(spec.name, spec.labels, spec.limit or None, spec.downsample or None)
            if spec.classes:
                ds = data.select_classes(ds, spec.classes)
        try:
            return data.split(ds, spec.fractions, sub_seed(cfg.seed, "split"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def classifier_template(dim: int, num_classes: int, cfg: ExperimentConfig) -> Network:
    sizes = [dim, *cfg.classifier.hidden, num_classes]
    return Network.mlp(sizes, cfg.classifier.activation, "softmax", np.random.default_rng(0))


def load_gan_checkpoints(path) -> list[Checkpoint]:
    """A single checkpoint file, or every ``gan-step*.gshd`` in a directory, by step."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if GAN_FILE_RE.search(p.name))
        if not files:
            raise FileNotFoundError(f"no GAN checkpoints (gan-step*.gshd) in {path}")
        return sorted((ckpt_io.load(p) for p in files), key=lambda c: c.step)
    return [ckpt_io.load(path)]


def gan_networks(ck: Checkpoint, dim: int, cfg: ExperimentConfig) -> tuple[Network, Network]:
    G, D = gan_templates(dim, cfg.gan, np.random.default_rng(0))
    return ck.network(G, "G."), ck.network(D, "D.")


def constant_discriminator(D: Network) -> Network:
    """D with every weight and bias zeroed, so D(x) = 0.5 everywhere."""
    return D.with_params({k: np.zeros(v.shape) for k, v in D.params.items()})


def prepare(cfg: ExperimentConfig, need_gan: bool = True) -> Models:
    train, valid, test = load_dataset(cfg)
    num_classes = int(max(train.y.max(), test.y.max())) + 1
    with stage("classifier"):
        if cfg.classifier_checkpoint:
            ck = ckpt_io.load(cfg.classifier_checkpoint)
            C = ck.network(classifier_template(train.dim, num_classes, cfg), "C.")
        else:
            C = train_classifier(train.X, train.y, cfg.classifier, num_classes=num_classes)
    models = Models(train, valid, test, C)
    if not need_gan:
        return models
    with stage("gan"):
        if cfg.gan_checkpoint:
            cks = load_gan_checkpoints(cfg.gan_checkpoint)
            G, D = gan_networks(cks[-1], train.dim, cfg)
        else:
            G, D, cks = train_gan(train.X, cfg.gan)
    if cfg.constant_d:
        D = constant_discriminator(D)
    models.G, models.D, models.checkpoints = G, D, tuple(cks)
    return models


# --- chunked execution -----------------------------------------------------------


def _chunks(n: int, size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _pool_map(fn, items, workers: int):
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def attack_split(cfg: ExperimentConfig, C: Network, ds: data.Dataset, name: str, acfg: AttackConfig):
    """``(x_adv, success)`` for every sample of ``ds``, chunk by chunk.

    Chunk ``i`` runs with seed ``sub_seed(acfg.seed, f"chunk.{i}")``.
    """
    chunks = _chunks(len(ds), cfg.chunk_size)

    def work(item):
        i, idx = item
        c = replace(acfg, seed=sub_seed(acfg.seed, f"chunk.{i}"))
        return run_attack(name, C, ds.X[idx], ds.y[idx], c)

    with stage(f"attack {name}"):
        parts = _pool_map(work, list(enumerate(chunks)), cfg.workers)
    return np.concatenate([p.x_adv for p in parts]), np.concatenate([p.success for p in parts])


@dataclass(frozen=True)
class Cleaned:
    x_clean: np.ndarray
    loss: np.ndarray
    chosen: np.ndarray
    z0_hash: str


def clean_split(cfg: ExperimentConfig, G: Network, D: Network, x: np.ndarray, ccfg: CleaningConfig) -> Cleaned:
    """Clean every row of ``x``; sample ``i`` always uses sample id ``i`` for its starts."""
    chunks = _chunks(len(x), cfg.chunk_size)
    with stage(f"clean lambda_d={ccfg.lambda_d}"):
        parts = _pool_map(lambda idx: clean(G, D, x[idx], ccfg, sample_ids=idx), chunks, cfg.workers)
    z0 = np.concatenate([p.z0 for p in parts])
    return Cleaned(
        np.concatenate([np.atleast_2d(p.x_clean) for p in parts]),
        np.concatenate([np.atleast_1d(p.loss) for p in parts]),
        np.concatenate([np.atleast_1d(p.chosen) for p in parts]),
        hashlib.sha256(np.ascontiguousarray(z0).tobytes()).hexdigest()[:16],
    )


def _calibrate(cfg: ExperimentConfig, m: Models):
    name = cfg.detection.attack
    acfg = cfg.attack(name)

    def attack_fn(C, X, y):
        return run_attack(name, C, X, y, acfg)

    with stage("calibration"):
        return estimate_threshold(m.D, m.C, m.valid.X, m.valid.y, attack_fn, cfg.detection.p)


# --- experiments --------------------------------------------------------------------


def run_table1(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Accuracy on originals, adversarials and cleaned adversarials, per attack."""
    with stage("table1"):
        m = models or prepare(cfg)
        report = ExperimentReport("table1", cfg.digest())
        acc_orig = accuracy(m.C, m.test.X, m.test.y)
        threshold = _calibrate(cfg, m)
        for name, acfg in cfg.attacks:
            x_adv, success = attack_split(cfg, m.C, m.test, name, acfg)
            cleaned = clean_split(cfg, m.G, m.D, x_adv, cfg.cleaning)
            report.add(
                dataset=m.test.name,
                attack=name,
                epsilon=acfg.epsilon,
                acc_orig=acc_orig,
                acc_adv=accuracy(m.C, x_adv, m.test.y),
                acc_clean=accuracy(m.C, cleaned.x_clean, m.test.y),
                success_rate=float(success.mean()),
                detected=float((score(m.D, x_adv) < threshold.tau).mean()),
            )
    return report


def run_table2(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Reconstruction-only cleaning against the two-term loss, from identical starts."""
    with stage("table2"):
        m = models or prepare(cfg)
        report = ExperimentReport("table2", cfg.digest())
        for name, acfg in cfg.attacks:
            x_adv, _ = attack_split(cfg, m.C, m.test, name, acfg)
            dg = clean_split(cfg, m.G, m.D, x_adv, replace(cfg.cleaning, lambda_d=0))
            cb = clean_split(cfg, m.G, m.D, x_adv, replace(cfg.cleaning, lambda_d=1))
            report.add(
                dataset=m.test.name,
                attack=name,
                epsilon=acfg.epsilon,
                acc_adv=accuracy(m.C, x_adv, m.test.y),
                acc_defensegan=accuracy(m.C, dg.x_clean, m.test.y),
                acc_cowboy=accuracy(m.C, cb.x_clean, m.test.y),
                z0_defensegan=dg.z0_hash,
                z0_cowboy=cb.z0_hash,
            )
    return report


def run_violin_export(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Discriminator scores of the real test split and of every attack's outputs.

    Unsuccessful adversarial samples are kept. The CSV header is exactly
    ``dataset,source,index,score``; provenance goes to a sidecar file.
    """
    with stage("violin"):
        m = models or prepare(cfg)
        report = ExperimentReport("violin", cfg.digest(), provenance=False)
        sources = [("real", m.test.X)]
        for name, acfg in cfg.attacks:
            sources.append((name, attack_split(cfg, m.C, m.test, name, acfg)[0]))
        for source, X in sources:
            for i, s in enumerate(score(m.D, X)):
                report.add(dataset=m.test.name, source=source, index=i, score=float(s))
    return report


def select_checkpoints(cks, steps) -> list[Checkpoint]:
    by_step = {c.step: c for c in cks}
    if not steps:
        return sorted(by_step.values(), key=lambda c: c.step)
    missing = [s for s in steps if s not in by_step]
    if missing:
        raise ConfigError(f"checkpoint step(s) {missing} not available; available steps: {sorted(by_step)}")
    return [by_step[s] for s in steps]


def run_gan_quality_sweep(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Post-cleaning FGSM accuracy and score separation at every saved GAN checkpoint."""
    with stage("gan-sweep"):
        m = models or prepare(cfg)
        report = ExperimentReport("gan_sweep", cfg.digest())
        name = "fgsm" if any(n == "fgsm" for n, _ in cfg.attacks) else cfg.attacks[0][0]
        x_adv, _ = attack_split(cfg, m.C, m.test, name, cfg.attack(name))
        acc_adv = accuracy(m.C, x_adv, m.test.y)
        for ck in select_checkpoints(m.checkpoints, cfg.sweep_steps):
            with stage(f"checkpoint step {ck.step}"):
                G, D = gan_networks(ck, m.train.dim, cfg)
                if cfg.constant_d:
                    D = constant_discriminator(D)
                cleaned = clean_split(cfg, G, D, x_adv, cfg.cleaning)
                s_real, s_adv = score(D, m.test.X).mean(), score(D, x_adv).mean()
                report.add(
                    step=ck.step,
                    acc_adv=acc_adv,
                    acc_clean=accuracy(m.C, cleaned.x_clean, m.test.y),
                    score_real=float(s_real),
                    score_adv=float(s_adv),
                    separation=float(s_real - s_adv),
                )
    return report


# --- per-sample commands --------------------------------------------------------------


def _vec(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def run_attacks(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Per-sample attack records on the test split."""
    with stage("attack"):
        m = models or prepare(cfg, need_gan=False)
        report = ExperimentReport("attack", cfg.digest())
        for name, acfg in cfg.attacks:
            x_adv, success = attack_split(cfg, m.C, m.test, name, acfg)
            batch = AdversarialBatch(m.test.X, x_adv, name, acfg, success)
            for rec in batch.records(m.test.y):
                report.add(
                    attack=name,
                    index=rec["index"],
                    label=rec["label"],
                    success=int(rec["success"]),
                    x_orig=_vec(rec["x_orig"]),
                    x_adv=_vec(rec["x_adv"]),
                    attack_config=rec["config"],
                )
    return report


def run_detect(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    with stage("detect"):
        m = models or prepare(cfg)
        report = ExperimentReport("detect", cfg.digest())
        tau = _calibrate(cfg, m).tau
        sources = [("real", m.test.X)]
        sources += [(n, attack_split(cfg, m.C, m.test, n, a)[0]) for n, a in cfg.attacks]
        for source, X in sources:
            for i, s in enumerate(score(m.D, X)):
                report.add(source=source, index=i, score=float(s), flagged=int(s < tau), tau=tau)
    return report


def run_clean(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    with stage("clean"):
        m = models or prepare(cfg)
        report = ExperimentReport("clean", cfg.digest())
        for name, acfg in cfg.attacks:
            x_adv, _ = attack_split(cfg, m.C, m.test, name, acfg)
            cleaned = clean_split(cfg, m.G, m.D, x_adv, cfg.cleaning)
            pred_adv, pred_clean = classify(m.C, x_adv), classify(m.C, cleaned.x_clean)
            for i in range(len(x_adv)):
                report.add(
                    attack=name,
                    index=i,
                    label=int(m.test.y[i]),
                    pred_adv=int(pred_adv[i]),
                    pred_clean=int(pred_clean[i]),
                    loss=float(cleaned.loss[i]),
                    restart=int(cleaned.chosen[i]),
                )
    return report


# --- training commands ------------------------------------------------------------------


def save_classifier(cfg: ExperimentConfig, out_dir) -> Path:
    m = prepare(cfg, need_gan=False)
    path = Path(out_dir) / CLASSIFIER_FILE
    ckpt_io.save(ckpt_io.from_network(m.C, cfg.classifier.steps, prefix="C."), path)
    return path


def save_gan(cfg: ExperimentConfig, out_dir) -> list[Path]:
    train, _, _ = load_dataset(cfg)
    with stage("gan"):
        _, _, cks = train_gan(train.X, cfg.gan)
    paths = []
    for ck in cks:
        path = Path(out_dir) / GAN_FILE.format(ck.step)
        ckpt_io.save(ck, path)
        paths.append(path)
    return paths
