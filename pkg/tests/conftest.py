import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from genmatch.data import ingest_mnist, ingest_omniglot, load_dataset
from genmatch.synth import write_synthetic_mnist, write_synthetic_omniglot


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Synthetic glyph trees pushed through the real ingestion pipeline."""
    root = tmp_path_factory.mktemp("corpus")
    raw = root / "raw"
    train_expected, test_expected = write_synthetic_omniglot(
        raw, train_alphabets=2, test_alphabets=2,
        classes_per_alphabet=8, images_per_class=20, seed=11,
    )
    mnist_raw = root / "mnist_raw"
    count = write_synthetic_mnist(mnist_raw, images_per_class=40, seed=11)
    cache = root / "cache"
    ingest_omniglot(raw, cache, expected_train=train_expected,
                    expected_test=test_expected)
    ingest_mnist(mnist_raw, cache, seed=0, expected_images=count)
    return cache


@pytest.fixture(scope="session")
def train_set(corpus_dir):
    return load_dataset(corpus_dir / "omniglot_train.gmd")


@pytest.fixture(scope="session")
def test_set(corpus_dir):
    return load_dataset(corpus_dir / "omniglot_test.gmd")


@pytest.fixture(scope="session")
def mnist_set(corpus_dir):
    return load_dataset(corpus_dir / "mnist_test.gmd")
