# tests/conftest.py
import gzip

import numpy as np
import pytest

from bqfl.config import MNIST_FILES, load_config
from bqfl.data import RawDataset, encode_idx


def pattern_cells(label: int):
    """Two cells of the 4x4 grid of 7x7 blocks light up for each digit."""
    return label, (3 * label + 5) % 16


def make_dataset(per_class: int, seed: int) -> RawDataset:
    """28x28 images with a class-dependent bright-block pattern over low background noise."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(10), per_class)
    images = rng.integers(0, 20, size=(len(labels), 28, 28)).astype(np.uint8)
    for i, label in enumerate(labels):
        for cell in pattern_cells(int(label)):
            r, c = divmod(cell, 4)
            images[i, 7 * r:7 * r + 7, 7 * c:7 * c + 7] = rng.integers(200, 256)
    return RawDataset(images=images, labels=labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synthetic_raw():
    return make_dataset(24, seed=1), make_dataset(6, seed=2)


@pytest.fixture
def idx_files(tmp_path, synthetic_raw):
    """Writes the synthetic splits as IDX files; the test labels are gzipped to exercise the fallback."""
    train, test = synthetic_raw
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    paths = {}
    for split, ds in (("train", train), ("test", test)):
        image_bytes, label_bytes = encode_idx(ds.images, ds.labels)
        image_path = data_dir / MNIST_FILES[f"{split}_images"]
        label_path = data_dir / MNIST_FILES[f"{split}_labels"]
        image_path.write_bytes(image_bytes)
        if split == "test":
            with gzip.open(str(label_path) + ".gz", "wb") as f:
                f.write(label_bytes)
        else:
            label_path.write_bytes(label_bytes)
        paths[f"{split}_images"] = str(image_path)
        paths[f"{split}_labels"] = str(label_path)
    return paths


SMALL_RUN = {
    "mode": "bqfl-avg",
    "n_qubits": "4",
    "k_layers": "1",
    "readout": "sample",
    "n_workers": "3",
    "n_miners": "2",
    "m_classes": "4",
    "epochs": "2",
    "batch_size": "16",
    "learning_rate": "0.05",
    "rounds": "2",
    "samples_per_worker": "24",
    "test_samples": "32",
    "validation_samples": "16",
    "results_db": "none",
}


@pytest.fixture
def config_text(idx_files, tmp_path):
    """Builds run-file text for the small synthetic setup; keyword overrides replace keys."""

    def build(**overrides) -> str:
        keys = dict(SMALL_RUN)
        keys.update(idx_files)
        keys["output_dir"] = str(tmp_path / "runs")
        keys.update({k: str(v) for k, v in overrides.items()})
        return "\n".join(f"{k} = {v}" for k, v in keys.items()) + "\n"

    return build


@pytest.fixture
def small_config(config_text):
    def build(**overrides):
        return load_config(config_text(**overrides))

    return build
