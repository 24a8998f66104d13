import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ganshield import attacks, data, nets  # noqa: E402
from ganshield.autodiff import Tensor  # noqa: E402


def linear_classifier(W, b=None):
    """Single affine layer with softmax head; logits = x @ W + b."""
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return nets.Network((nets.Layer("W", "b", "softmax"),), {"W": Tensor(W), "b": Tensor(b)}, W.shape[0], W.shape[1])


@pytest.fixture(scope="session")
def toy():
    """Two-Gaussian splits plus a trained classifier."""
    ds = data.make_two_gaussians(500, 0)
    train, valid, test = data.split(ds, seed=1)
    C = nets.train_classifier(train.X, train.y, nets.TrainConfig(steps=300, seed=1))
    return train, valid, test, C


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """1,000 two-class images as IDX files: sklearn digits upscaled to 16x16, label = digit >= 5."""
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = np.kron(d.images[:1000], np.ones((2, 2)))
    imgs = np.round(imgs / 16.0 * 255.0).astype(np.uint8)
    labels = (d.target[:1000] >= 5).astype(np.uint8)
    root = tmp_path_factory.mktemp("idx")
    data.write_idx(root / "images-idx3-ubyte", imgs)
    data.write_idx(root / "labels-idx1-ubyte", labels)
    return root / "images-idx3-ubyte", root / "labels-idx1-ubyte"


@pytest.fixture(scope="session")
def toy_models():
    """Classifier and 2,000-step GAN from the default experiment config (master seed 0)."""
    from ganshield.harness import config, experiments

    cfg = config.from_dict({}, seed=0)
    return cfg, experiments.prepare(cfg)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, when the acceptance module ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        status, title, elapsed, detail = results[num]
        line = f"[{status}] criterion {num:2d}: {title} ({elapsed:.1f}s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
