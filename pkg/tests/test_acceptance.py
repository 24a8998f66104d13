"""Acceptance gate: ten criteria, each run at its stated tolerance and time limit.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per criterion
is printed in the terminal summary. Every criterion uses the default
experiment configuration with master seed 0 unless stated otherwise.
"""
import math
import struct
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ganshield import attacks, checkpoint, cli, data, defense, nets
from ganshield.attacks import AttackConfig
from ganshield.autodiff import Tensor
from ganshield.harness import config, experiments
from test_attacks import random_attack_invocations
from test_autodiff import PRIMITIVES, check_fd, random_composite
from test_defense import constant_discriminator, identity_generator

RESULTS = {}


@contextmanager
def criterion(num, title, limit_s=None):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if limit_s is not None and elapsed > limit_s:
            raise AssertionError(f"took {elapsed:.1f}s, limit {limit_s}s")
    except BaseException as exc:
        RESULTS[num] = ("FAIL", title, time.perf_counter() - start, f"{type(exc).__name__}: {exc}"[:160])
        raise
    RESULTS[num] = ("PASS", title, elapsed, "")


@pytest.fixture(scope="module")
def default_run():
    cfg = config.from_dict({}, seed=0)
    return cfg, experiments.prepare(cfg)


def test_c01_autodiff_matches_finite_differences():
    with criterion(1, "autodiff agrees with finite differences (rel 1e-4)", limit_s=10):
        for name, (builder, args) in PRIMITIVES.items():
            check_fd(builder, *args)
        for seed in range(20):
            check_fd(*random_composite(seed)[:1], *random_composite(seed)[1])


def test_c02_attack_reduction_laws(toy):
    _, _, test, C = toy
    X, y = test.X, test.y
    with criterion(2, "attack reduction laws hold exactly", limit_s=5):
        for eps in (0.1, 0.5, 1.0):
            f = attacks.fgsm(C, X, y, AttackConfig(epsilon=eps)).x_adv
            b = attacks.bim(C, X, y, AttackConfig(epsilon=eps, alpha=eps, steps=1)).x_adv
            assert np.array_equal(f, b), f"bim(steps=1) != fgsm at eps={eps}"
            cfg = AttackConfig(epsilon=eps, alpha=eps / 4, steps=8, mu=0.0)
            assert np.array_equal(attacks.mim(C, X, y, cfg).x_adv, attacks.bim(C, X, y, cfg).x_adv)
        zero = AttackConfig(epsilon=0.0, alpha=0.1, steps=5)
        for name in attacks.ATTACKS:
            assert np.array_equal(attacks.run_attack(name, C, X, y, zero).x_adv, X), name


def test_c03_budget_and_range_property():
    with criterion(3, "budget and range hold over 10,000 random attack calls", limit_s=60):
        random_attack_invocations(10_000)


def test_c04_detection_separation():
    with criterion(4, "D(real) - D(FGSM eps=1) > 0.1 and FGSM threshold gives TPR > FPR on PGDM", limit_s=180):
        cfg = config.from_dict({}, seed=0)
        assert cfg.gan.steps == 2000
        m = experiments.prepare(cfg)
        fgsm_cfg = cfg.attack("fgsm")
        assert fgsm_cfg.epsilon == 1.0
        x_fgsm = attacks.fgsm(m.C, m.test.X, m.test.y, fgsm_cfg).x_adv
        real = defense.score(m.D, m.test.X)
        sep = real.mean() - defense.score(m.D, x_fgsm).mean()
        assert sep > 0.1, f"separation {sep:.4f}"
        th = defense.estimate_threshold(
            m.D, m.C, m.valid.X, m.valid.y, lambda C, X, y: attacks.fgsm(C, X, y, fgsm_cfg), p=1
        )
        x_pgdm = attacks.pgdm(m.C, m.test.X, m.test.y, cfg.attack("pgdm")).x_adv
        tpr = defense.detect(m.D, x_pgdm, th).mean()
        fpr = defense.detect(m.D, m.test.X, th).mean()
        assert tpr > fpr, f"TPR {tpr:.3f} <= FPR {fpr:.3f}"


def test_c05_cleaning_improves_accuracy(default_run):
    cfg, m = default_run
    with criterion(5, "acc(clean) > acc(adv) + 0.05 for all five attacks (m=200, R=8)", limit_s=300):
        assert (cfg.cleaning.m, cfg.cleaning.restarts, cfg.cleaning.lambda_d) == (200, 8, 1)
        rows = experiments.run_table1(cfg, m).rows
        assert sorted(r["attack"] for r in rows) == sorted(attacks.ATTACKS)
        bad = [(r["attack"], r["acc_adv"], r["acc_clean"]) for r in rows if not r["acc_clean"] > r["acc_adv"] + 0.05]
        assert not bad, f"no gain for {bad}"


def test_c06_two_term_ablation(default_run):
    cfg, m = default_run
    with criterion(6, "cowboy >= reconstruction-only - 0.02, strictly better on >= 3 attacks", limit_s=600):
        rows = experiments.run_table2(cfg, m).rows
        assert all(r["z0_cowboy"] == r["z0_defensegan"] for r in rows)
        worse = [r["attack"] for r in rows if r["acc_cowboy"] < r["acc_defensegan"] - 0.02]
        assert not worse, f"cowboy worse on {worse}"
        better = sum(r["acc_cowboy"] > r["acc_defensegan"] for r in rows)
        assert better >= 3, f"strictly better on only {better}"


def test_c07_analytic_cleaning_oracle():
    with criterion(7, "identity G + constant D converges to 1e-6 within 50 steps", limit_s=1):
        G, D = identity_generator(), constant_discriminator(0.3)
        x = np.array([[0.25, -0.75], [1.0, -1.0], [0.0, 0.5]])
        for lam in (1, 0):
            res = defense.clean(G, D, x, defense.CleaningConfig(sigma=1.0, eta=0.5, m=50, lambda_d=lam))
            err = np.linalg.norm(nets.predict(G, res.z_final) - x, axis=1).max()
            assert err <= 1e-6, f"lambda_d={lam}: {err:.3g}"


def test_c08_gan_quality_trend(default_run):
    cfg, m = default_run
    with criterion(8, "final checkpoint cleaning >= first - 0.05 and separation > 0", limit_s=600):
        rows = experiments.run_gan_quality_sweep(cfg, m).rows
        assert len(rows) >= 4
        first, last = rows[0], rows[-1]
        assert last["acc_clean"] >= first["acc_clean"] - 0.05, (first["acc_clean"], last["acc_clean"])
        assert last["separation"] > 0, last["separation"]


def test_c09_table1_determinism(tmp_path):
    with criterion(9, "two table1 runs with the same seed give byte-identical CSVs"):
        for name in ("a", "b"):
            assert cli.main(["table1", "--seed", "0", "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "table1.csv").read_bytes()
        assert a == (tmp_path / "b" / "table1.csv").read_bytes()
        assert len(a.splitlines()) == 1 + len(attacks.ATTACKS)


def test_c10_checkpoint_and_idx_bit_exact(tmp_path, toy):
    with criterion(10, "checkpoint round trip and IDX parsing are bit-exact"):
        train = toy[0]
        G, D, cks = nets.train_gan(train.X, nets.TrainConfig(steps=50, seed=1, checkpoint_every=25))
        for ck in cks:
            path = tmp_path / f"{ck.step}.gshd"
            checkpoint.save(ck, path)
            back = checkpoint.load(path)
            assert back.step == ck.step and back.rng_state == ck.rng_state
            assert list(back.params) == list(ck.params)
            assert all(back.params[k].data.tobytes() == ck.params[k].data.tobytes() for k in ck.params)
            assert checkpoint.dumps(back) == path.read_bytes()
        z = np.random.default_rng(0).standard_normal((10, 16))
        assert nets.predict(cks[-1].network(G, "G."), z).tobytes() == nets.predict(G, z).tobytes()

        raw = checkpoint.dumps(nets.Checkpoint(3, {"w": Tensor([[1.0, 2.0]])}, b"ab"))
        layout = b"GSHD" + struct.pack("<IQI", 1, 3, 2) + b"ab" + struct.pack("<I", 1) + b"w"
        layout += struct.pack("<IQQdd", 2, 1, 2, 1.0, 2.0)
        assert raw == layout

        images = np.stack([np.zeros((4, 4)), np.full((4, 4), 255)]).astype(np.uint8)
        data.write_idx(tmp_path / "img", images)
        data.write_idx(tmp_path / "lbl", np.array([0, 9], dtype=np.uint8))
        assert (tmp_path / "img").read_bytes()[:16] == struct.pack(">IIII", 0x803, 2, 4, 4)
        ds = data.load_idx_images(tmp_path / "img", tmp_path / "lbl")
        assert (ds.X[0] == -1.0).all() and (ds.X[1] == 1.0).all() and ds.y.tolist() == [0, 9]

        big = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
        data.write_idx(tmp_path / "img28", big)
        data.write_idx(tmp_path / "lbl28", np.zeros(3, dtype=np.uint8))
        pooled = data.load_idx_images(tmp_path / "img28", tmp_path / "lbl28", downsample_to=14)
        back = pooled.normalization.denormalize(pooled.X).reshape(3, 14, 14)
        expected = np.array(
            [
                [[sum(float(big[n, 2 * i + a, 2 * j + b]) for a in (0, 1) for b in (0, 1)) / 4 for j in range(14)] for i in range(14)]
                for n in range(3)
            ]
        )
        assert np.abs(back - expected).max() <= 1e-9
        assert math.isclose(pooled.X.min(), (expected.min() - 127.5) / 127.5)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
