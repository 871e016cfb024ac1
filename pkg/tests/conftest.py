from pathlib import Path

import numpy as np
import pytest

from fedair.data import LabeledImage, load_mnist_dir, partition

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = ROOT / "data" / "mnist-subset"


def synthetic_samples(n_per_class=20, seed=0):
    """Separable 4-class toy images: class c lights up pixel block c."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(4):
        for _ in range(n_per_class):
            px = rng.uniform(0.0, 0.2, 784)
            px[c * 196:(c + 1) * 196] += 0.6
            out.append(LabeledImage(np.clip(px, 0, 1), c))
    return out


@pytest.fixture
def toy_train():
    return synthetic_samples(20, seed=1)


@pytest.fixture
def toy_test():
    return synthetic_samples(10, seed=2)


@pytest.fixture(scope="session")
def mnist():
    if not DATA_DIR.is_dir():
        pytest.skip("MNIST subset not present; run scripts/make_mnist_subset.py")
    return load_mnist_dir(DATA_DIR, (0, 1, 2, 3), seed=0, max_per_class=500)


@pytest.fixture(scope="session")
def mnist_clients(mnist):
    train, _ = mnist
    return {"iid": partition(train, "iid", 0), "noniid": partition(train, "noniid", 0)}


@pytest.fixture(autouse=True)
def _chdir_root(monkeypatch):
    # relative default data_dir resolves against the repository root
    monkeypatch.chdir(ROOT)
