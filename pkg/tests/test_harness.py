import hashlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganshield import cli
from ganshield.harness import config, experiments, reports
from ganshield.harness.config import ConfigError

FAST = {
    "gan.steps": 300,
    "gan.checkpoint_every": 100,
    "classifier.steps": 150,
    "dataset.n_per_class": 100,
    "cleaning.m": 40,
    "cleaning.restarts": 3,
    "attacks": ("fgsm", "pgdm", "vam"),
    "chunk_size": 16,
}


def fast_cfg(seed=0, **extra):
    return config.from_dict({**FAST, **extra}, seed=seed)


# --- config -----------------------------------------------------------------------


def test_sub_seeds_are_stable_and_distinct():
    assert config.sub_seed(0, "gan") == config.sub_seed(0, "gan")
    seeds = {config.sub_seed(m, c) for m in range(5) for c in ("gan", "classifier", "data")}
    assert len(seeds) == 15
    expected = int.from_bytes(hashlib.sha256(b"7:gan").digest()[:8], "big") % 2**32
    assert config.sub_seed(7, "gan") == expected


def test_parse_flat_format():
    text = """
    # comment
    seed = 4
    attacks = fgsm, vam
    attack.epsilon = 0.5       # shared
    attack.vam.epsilon = 0.75
    gan.hidden = 32, 32
    cleaning.sigma = 2
    detection.p = inf
    """
    cfg = config.build(config.parse_text(text))
    assert cfg.seed == 4
    assert [n for n, _ in cfg.attacks] == ["fgsm", "vam"]
    assert cfg.attack("fgsm").epsilon == 0.5 and cfg.attack("vam").epsilon == 0.75
    assert cfg.gan.hidden == (32, 32)
    assert cfg.cleaning.sigma == 2.0 and cfg.detection.p == float("inf")
    assert cfg.gan.seed == config.sub_seed(4, "gan")


@pytest.mark.parametrize(
    "text",
    [
        "gan.nonsense = 1",
        "bogus = 1",
        "seed = 1\nseed = 2",
        "just words",
        "attacks = fgsm, xyz",
        "attack.epsilon = 0.1\nattack.alpha = 0.5",
        "gan.steps = 1.5",
        "detection.attack = bim\nattacks = fgsm",
    ],
)
def test_bad_config_raises_config_error(text):
    with pytest.raises(ConfigError):
        config.build(config.parse_text(text))


def test_resolved_config_round_trips(tmp_path):
    cfg = fast_cfg(seed=3, **{"attack.vam.epsilon": 0.4, "detection.p": float("inf")})
    path = cfg.write(tmp_path)
    again = config.load(path)
    assert again == cfg
    assert again.to_text() == path.read_text()
    assert again.digest() == cfg.digest()


def test_seed_override_beats_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\n")
    assert config.load(p, seed=9).seed == 9


# --- reports ---------------------------------------------------------------------


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=80, deadline=None)
@given(rows=st.lists(st.tuples(st.text(alphabet="abcxyz,\" -", max_size=8), finite, finite, finite), max_size=6))
def test_csv_rows_round_trip(rows):
    rep = reports.ExperimentReport("table1", "cafe01")
    for name, a, b, c in rows:
        rep.add(dataset=name, attack="fgsm", epsilon=a, acc_orig=b, acc_adv=c, acc_clean=0.5, success_rate=0.0, detected=1.0)
    assert reports.parse_csv(rep.to_csv(), "table1") == rep.rows


def test_rows_carry_provenance_and_reject_missing_columns():
    rep = reports.ExperimentReport("gan_sweep", "abc")
    row = rep.add(step=3, acc_adv=0.0, acc_clean=0.1, score_real=0.6, score_adv=0.4, separation=0.2)
    assert row["config_hash"] == "abc" and row["build_id"] == reports.BUILD_ID
    with pytest.raises(ValueError):
        rep.add(step=3)


# --- experiments ------------------------------------------------------------------


def test_table1_is_byte_identical_across_runs_and_worker_counts():
    a = experiments.run_table1(fast_cfg()).to_csv()
    b = experiments.run_table1(fast_cfg()).to_csv()
    c = experiments.run_table1(fast_cfg(workers=3)).to_csv()
    assert a == b == c


def test_table1_rows_are_valid_accuracies():
    rep = experiments.run_table1(fast_cfg())
    assert [r["attack"] for r in rep.rows] == ["fgsm", "pgdm", "vam"]
    for r in rep.rows:
        for k in ("acc_orig", "acc_adv", "acc_clean", "success_rate", "detected"):
            assert 0.0 <= r[k] <= 1.0


def test_table1_zero_budget_preserves_accuracy(toy_models):
    cfg, m = toy_models
    zero = config.from_dict({"attack.epsilon": 0.0, "attack.alpha": 0.05, "attack.fgsm.epsilon": 1.0}, seed=0)
    rep = experiments.run_table1(zero, m)
    for r in rep.rows:
        if r["attack"] == "fgsm":
            continue  # kept at 1.0 only so the detector can be calibrated
        assert r["acc_adv"] == r["acc_orig"]
        assert abs(r["acc_clean"] - r["acc_orig"]) <= 0.05


def test_table1_fgsm_row_direction(toy_models):
    cfg, m = toy_models
    r = next(r for r in experiments.run_table1(cfg, m).rows if r["attack"] == "fgsm")
    assert r["acc_orig"] >= 0.99
    assert r["acc_adv"] < r["acc_orig"]
    assert r["acc_clean"] > r["acc_adv"]


def test_table2_constant_discriminator_columns_match():
    rep = experiments.run_table2(fast_cfg(**{"test.constant_d": True}))
    for r in rep.rows:
        assert abs(r["acc_cowboy"] - r["acc_defensegan"]) <= 1e-9
        assert r["z0_cowboy"] == r["z0_defensegan"]


def test_violin_export_layout(toy_models):
    cfg, m = toy_models
    rep = experiments.run_violin_export(cfg, m)
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "dataset,source,index,score"
    assert len(rep.rows) == (1 + len(cfg.attacks)) * len(m.test)
    by_source = {}
    for r in rep.rows:
        by_source.setdefault(r["source"], []).append(r["score"])
    real = np.mean(by_source.pop("real"))
    assert set(by_source) == {n for n, _ in cfg.attacks}
    for name, scores in by_source.items():
        assert real > np.mean(scores), name


def test_gan_sweep_one_row_per_checkpoint_and_missing_steps():
    cfg = fast_cfg()
    m = experiments.prepare(cfg)
    rep = experiments.run_gan_quality_sweep(cfg, m)
    assert [r["step"] for r in rep.rows] == [0, 100, 200, 300]
    with pytest.raises(ConfigError, match=r"available steps: \[0, 100, 200, 300\]"):
        experiments.run_gan_quality_sweep(fast_cfg(**{"sweep.steps": (100, 150)}), m)


def test_errors_carry_run_context():
    cfg = fast_cfg(**{"detection.attack": "vam", "attack.vam.epsilon": 0.0, "attack.vam.alpha": 0.1})
    with pytest.raises(Exception) as err:
        experiments.run_table1(cfg)
    assert err.value.run_context[:2] == ["table1", "calibration"]


# --- CLI ---------------------------------------------------------------------------------


def file_hashes(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def fast_args():
    out = []
    for k, v in FAST.items():
        v = ", ".join(v) if isinstance(v, tuple) else v
        out += ["--set", f"{k} = {v}"]
    return out


def test_cli_train_gan_then_sweep_leaves_checkpoints_untouched(tmp_path, capsys):
    ck_dir = tmp_path / "gan"
    assert cli.main(["train-gan", "--out", str(ck_dir), *fast_args()]) == 0
    before = file_hashes(ck_dir)
    assert sum(name.startswith("gan-step") for name in before) == 4
    out = tmp_path / "sweep"
    assert cli.main(["gan-sweep", "--out", str(out), "--checkpoint", str(ck_dir), *fast_args()]) == 0
    assert file_hashes(ck_dir) == before
    rows = reports.read_csv(out / "gan_sweep.csv", "gan_sweep")
    assert [r["step"] for r in rows] == [0, 100, 200, 300]
    assert (out / "config.resolved").exists()


def test_cli_table1_writes_reproducible_csv(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["table1", "--seed", "2", "--out", str(tmp_path / name), *fast_args()]) == 0
    assert (tmp_path / "a" / "table1.csv").read_bytes() == (tmp_path / "b" / "table1.csv").read_bytes()


def test_cli_violin_writes_provenance_sidecar(tmp_path):
    assert cli.main(["violin", "--out", str(tmp_path), *fast_args()]) == 0
    assert (tmp_path / "violin.csv").read_text().startswith("dataset,source,index,score\n")
    assert "config_hash" in (tmp_path / "violin.csv.provenance").read_text()


def test_cli_classifier_checkpoint_reuse(tmp_path):
    assert cli.main(["train-classifier", "--out", str(tmp_path / "c"), *fast_args()]) == 0
    ck = tmp_path / "c" / "classifier.gshd"
    args = ["attack", "--set", f"classifier.checkpoint = {ck}", *fast_args()]
    assert cli.main([*args, "--out", str(tmp_path / "x")]) == 0
    assert cli.main(["attack", "--out", str(tmp_path / "y"), *fast_args()]) == 0
    # same samples; only the config hash (which includes the checkpoint path) differs
    x = reports.read_csv(tmp_path / "x" / "attack.csv", "attack")
    y = reports.read_csv(tmp_path / "y" / "attack.csv", "attack")
    drop = lambda rows: [{k: v for k, v in r.items() if k != "config_hash"} for r in rows]  # noqa: E731
    assert drop(x) == drop(y)


def test_cli_exit_code_config_error(tmp_path, capsys):
    assert cli.main(["table1", "--out", str(tmp_path), "--set", "gan.bogus = 1"]) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_cli_exit_code_numeric_failure(tmp_path, capsys):
    args = ["train-gan", "--out", str(tmp_path), *fast_args(), "--set", "gan.lr = 1e300"]
    assert cli.main(args) == cli.EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_cli_exit_code_io_error(tmp_path, capsys):
    args = ["table1", "--out", str(tmp_path), "--dataset", str(tmp_path / "missing"), "--labels", str(tmp_path / "nope")]
    assert cli.main(args) == cli.EXIT_IO
    assert cli.main(["table1", "--out", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_IO


def test_cli_idx_dataset(tmp_path, digits_idx):
    images, labels = digits_idx
    args = [
        "table1",
        "--out",
        str(tmp_path),
        "--dataset",
        str(images),
        "--labels",
        str(labels),
        "--set",
        "dataset.limit = 300",
        "--set",
        "dataset.downsample = 8",
        "--set",
        "attacks = fgsm",
        "--set",
        "attack.epsilon = 0.5",
        "--set",
        "attack.alpha = 0.125",
        "--set",
        "gan.steps = 100",
        "--set",
        "cleaning.m = 10",
        "--set",
        "cleaning.restarts = 2",
    ]
    assert cli.main(args) == 0
    rows = reports.read_csv(tmp_path / "table1.csv", "table1")
    assert rows[0]["dataset"] == images.name and rows[0]["acc_adv"] < rows[0]["acc_orig"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ganshield", "table1", "--set", "nope = 1"], capture_output=True, text=True)
    assert proc.returncode == 2
