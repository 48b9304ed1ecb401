"""Dataset ingestion, the binary cache format, and episode sampling."""

import gzip

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from genmatch.data import (
    CACHE_MAGIC,
    CACHE_VERSION,
    MNIST_TEST_IMAGES,
    OMNIGLOT_TEST_EXPECTED,
    OMNIGLOT_TRAIN_EXPECTED,
    Episode,
    GlyphDataset,
    IngestError,
    area_average,
    assert_disjoint_splits,
    downscale_binarize,
    episodes_to_tensor,
    ingest_mnist,
    ingest_omniglot,
    load_dataset,
    pack_images,
    sample_episode,
    save_dataset,
    sha256_file,
    unpack_images,
)
from genmatch.synth import write_synthetic_omniglot

from helpers import upsample_by_lcm_oracle


def _tiny_dataset(split="train", classes=3, per_class=6, alphabets=1, seed=0):
    rng = np.random.default_rng(seed)
    images = {
        cid: (rng.random((per_class, 28, 28)) < 0.3).astype(np.uint8)
        for cid in range(classes)
    }
    class_alphabet = {cid: cid % alphabets for cid in range(classes)}
    names = tuple(f"alpha-{i}" for i in range(alphabets))
    return GlyphDataset(split, images, class_alphabet, names)


class TestAreaAverage:
    def test_matches_lcm_oracle(self):
        rng = np.random.default_rng(0)
        for n_in, n_out in ((105, 28), (6, 4), (9, 5), (28, 28)):
            img = rng.random((n_in, n_in))
            assert_allclose(
                area_average(img, n_out),
                upsample_by_lcm_oracle(img, n_out),
                rtol=1e-10, atol=1e-12,
            )

    def test_preserves_mean(self):
        rng = np.random.default_rng(1)
        img = rng.random((105, 105))
        assert area_average(img, 28).mean() == pytest.approx(
            img.mean(), rel=1e-10
        )

    def test_constant_image_stays_constant(self):
        out = area_average(np.full((105, 105), 0.7), 28)
        assert_allclose(out, 0.7, rtol=1e-12)

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            area_average(np.zeros((3, 3, 3)), 2)


class TestDownscaleBinarize:
    def test_all_ink_and_all_blank(self):
        assert (downscale_binarize(np.ones((105, 105))) == 1).all()
        assert (downscale_binarize(np.zeros((105, 105))) == 0).all()

    def test_threshold_is_inclusive_at_half(self):
        assert (downscale_binarize(np.full((105, 105), 0.5)) == 1).all()
        assert (downscale_binarize(np.full((105, 105), 0.4999)) == 0).all()

    def test_validates_shape_and_range(self):
        with pytest.raises(ValueError):
            downscale_binarize(np.zeros((28, 28)))
        with pytest.raises(ValueError):
            downscale_binarize(np.full((105, 105), 1.5))


class TestBitPacking:
    def test_roundtrip(self):
        rng = np.random.default_rng(2)
        images = (rng.random((7, 28, 28)) < 0.5).astype(np.uint8)
        packed = pack_images(images)
        assert len(packed) == 7 * 98
        assert (unpack_images(packed, 7) == images).all()

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            pack_images(np.full((1, 28, 28), 2, dtype=np.uint8))

    def test_unpack_length_check(self):
        with pytest.raises(ValueError):
            unpack_images(b"\x00" * 97, 1)


class TestGlyphDataset:
    def test_validation(self):
        images = {0: np.zeros((2, 28, 28), dtype=np.uint8)}
        with pytest.raises(ValueError):
            GlyphDataset("s", images, {1: 0}, ("a",))
        with pytest.raises(ValueError):
            GlyphDataset("s", images, {0: 5}, ("a",))
        bad = {0: np.full((2, 28, 28), 3, dtype=np.uint8)}
        with pytest.raises(ValueError):
            GlyphDataset("s", bad, {0: 0}, ("a",))

    def test_counts(self):
        ds = _tiny_dataset(classes=4, per_class=5)
        assert ds.n_classes == 4
        assert ds.total_images == 20
        assert ds.class_ids == (0, 1, 2, 3)


class TestCacheFormat:
    def test_save_load_roundtrip(self, tmp_path):
        ds = _tiny_dataset(split="roundtrip", classes=3, alphabets=2, seed=3)
        path = tmp_path / "cache.gmd"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.split == "roundtrip"
        assert loaded.alphabet_names == ds.alphabet_names
        assert loaded.class_alphabet == ds.class_alphabet
        for cid in ds.class_ids:
            assert (loaded.images[cid] == ds.images[cid]).all()

    def test_save_is_deterministic(self, tmp_path):
        ds = _tiny_dataset(seed=4)
        save_dataset(ds, tmp_path / "a.gmd")
        save_dataset(ds, tmp_path / "b.gmd")
        assert sha256_file(tmp_path / "a.gmd") == sha256_file(tmp_path / "b.gmd")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gmd"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(IngestError, match="magic"):
            load_dataset(path)

    def test_bad_version(self, tmp_path):
        ds = _tiny_dataset()
        path = tmp_path / "v.gmd"
        save_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[4] = CACHE_VERSION + 1
        path.write_bytes(bytes(raw))
        with pytest.raises(IngestError, match="version"):
            load_dataset(path)

    def test_truncated(self, tmp_path):
        ds = _tiny_dataset()
        path = tmp_path / "t.gmd"
        save_dataset(ds, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(IngestError, match="truncated"):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        ds = _tiny_dataset()
        path = tmp_path / "x.gmd"
        save_dataset(ds, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(IngestError, match="trailing"):
            load_dataset(path)

    def test_magic_constant(self):
        assert CACHE_MAGIC == b"GMND"


class TestOmniglotIngest:
    def test_canonical_layout_constants(self):
        assert OMNIGLOT_TRAIN_EXPECTED.alphabets == 30
        assert OMNIGLOT_TRAIN_EXPECTED.classes == 964
        assert OMNIGLOT_TEST_EXPECTED.alphabets == 20
        assert OMNIGLOT_TEST_EXPECTED.classes == 659
        assert OMNIGLOT_TRAIN_EXPECTED.images_per_class == 20

    def test_ingested_corpus(self, corpus_dir, train_set, test_set):
        assert train_set.split == "train"
        assert test_set.split == "test"
        assert train_set.n_classes == 16
        assert test_set.n_classes == 16
        # Global ids: the test split continues where train stopped.
        assert min(test_set.class_ids) == max(train_set.class_ids) + 1
        assert (corpus_dir / "ingest_manifest.json").exists()
        for ds in (train_set, test_set):
            for imgs in ds.images.values():
                assert imgs.shape == (20, 28, 28)
                assert set(np.unique(imgs)) <= {0, 1}

    def test_missing_split_dir(self, tmp_path):
        (tmp_path / "images_background").mkdir()
        with pytest.raises(IngestError, match="images_evaluation"):
            ingest_omniglot(tmp_path, tmp_path / "out")

    def test_wrong_image_count_reported(self, tmp_path):
        raw = tmp_path / "raw"
        train_exp, test_exp = write_synthetic_omniglot(
            raw, train_alphabets=1, test_alphabets=1,
            classes_per_alphabet=2, images_per_class=3, seed=0,
        )
        victim = next(
            (raw / "images_background").glob("*/character01/*.png")
        )
        victim.unlink()
        with pytest.raises(IngestError, match="2 images"):
            ingest_omniglot(
                raw, tmp_path / "out",
                expected_train=train_exp, expected_test=test_exp,
            )

    def test_wrong_alphabet_count_reported(self, tmp_path):
        raw = tmp_path / "raw"
        train_exp, test_exp = write_synthetic_omniglot(
            raw, train_alphabets=2, test_alphabets=1,
            classes_per_alphabet=2, images_per_class=3, seed=0,
        )
        import dataclasses
        wrong = dataclasses.replace(train_exp, alphabets=3)
        with pytest.raises(IngestError, match="alphabets"):
            ingest_omniglot(
                raw, tmp_path / "out",
                expected_train=wrong, expected_test=test_exp,
            )


def _write_idx_images(path, images, gz=False):
    header = (
        (0x803).to_bytes(4, "big")
        + len(images).to_bytes(4, "big")
        + (28).to_bytes(4, "big")
        + (28).to_bytes(4, "big")
    )
    payload = header + images.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(payload) if gz else payload)


def _write_idx_labels(path, labels, gz=False):
    header = (0x801).to_bytes(4, "big") + len(labels).to_bytes(4, "big")
    payload = header + labels.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(payload) if gz else payload)


class TestMnistIngest:
    def _fake_raw(self, root, count=20, gz=False):
        root.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(5)
        images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
        labels = np.tile(np.arange(10, dtype=np.uint8), count // 10)
        suffix = ".gz" if gz else ""
        _write_idx_images(root / f"t10k-images-idx3-ubyte{suffix}", images, gz)
        _write_idx_labels(root / f"t10k-labels-idx1-ubyte{suffix}", labels, gz)
        return images, labels

    def test_ingest_and_layout(self, tmp_path):
        self._fake_raw(tmp_path / "raw")
        manifest = ingest_mnist(tmp_path / "raw", tmp_path / "out", seed=3,
                                expected_images=20)
        ds = load_dataset(tmp_path / "out" / "mnist_test.gmd")
        assert ds.split == "mnist-test"
        assert ds.n_classes == 10
        assert ds.total_images == 20
        assert manifest["images"] == 20

    def test_binarization_is_seed_deterministic(self, tmp_path):
        self._fake_raw(tmp_path / "raw")
        a = ingest_mnist(tmp_path / "raw", tmp_path / "a", seed=3,
                         expected_images=20)
        b = ingest_mnist(tmp_path / "raw", tmp_path / "b", seed=3,
                         expected_images=20)
        c = ingest_mnist(tmp_path / "raw", tmp_path / "c", seed=4,
                         expected_images=20)
        assert a["sha256"] == b["sha256"]
        assert a["sha256"] != c["sha256"]

    def test_binarization_follows_intensity(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        images = np.zeros((20, 28, 28), dtype=np.uint8)
        images[:10] = 255  # each digit gets one all-bright, one all-dark
        labels = np.tile(np.arange(10, dtype=np.uint8), 2)
        _write_idx_images(raw / "t10k-images-idx3-ubyte", images)
        _write_idx_labels(raw / "t10k-labels-idx1-ubyte", labels)
        ingest_mnist(raw, tmp_path / "out", seed=0, expected_images=20)
        ds = load_dataset(tmp_path / "out" / "mnist_test.gmd")
        means = np.array(
            [ds.images[d].mean() for d in range(10)]
        )
        # Each digit class got one bright and one dark image.
        assert_allclose(means, 0.5, rtol=0)

    def test_gzip_sources(self, tmp_path):
        self._fake_raw(tmp_path / "raw", gz=True)
        manifest = ingest_mnist(tmp_path / "raw", tmp_path / "out", seed=1,
                                expected_images=20)
        assert manifest["classes"] == 10

    def test_count_mismatch(self, tmp_path):
        self._fake_raw(tmp_path / "raw", count=30)
        with pytest.raises(IngestError, match="expected 20"):
            ingest_mnist(tmp_path / "raw", tmp_path / "out", seed=0,
                         expected_images=20)

    def test_default_expected_is_full_test_set(self):
        assert MNIST_TEST_IMAGES == 10_000

    def test_bad_magic(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        (raw / "t10k-images-idx3-ubyte").write_bytes(b"\x00\x00\x09\x03")
        _write_idx_labels(
            raw / "t10k-labels-idx1-ubyte", np.arange(10, dtype=np.uint8)
        )
        with pytest.raises(IngestError, match="magic"):
            ingest_mnist(raw, tmp_path / "out", seed=0, expected_images=10)

    def test_truncated_payload(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        images = np.zeros((20, 28, 28), dtype=np.uint8)
        _write_idx_images(raw / "t10k-images-idx3-ubyte", images)
        full = (raw / "t10k-images-idx3-ubyte").read_bytes()
        (raw / "t10k-images-idx3-ubyte").write_bytes(full[:-5])
        _write_idx_labels(
            raw / "t10k-labels-idx1-ubyte",
            np.tile(np.arange(10, dtype=np.uint8), 2),
        )
        with pytest.raises(IngestError, match="payload"):
            ingest_mnist(raw, tmp_path / "out", seed=0, expected_images=20)

    def test_missing_file(self, tmp_path):
        (tmp_path / "raw").mkdir()
        with pytest.raises(IngestError, match="missing"):
            ingest_mnist(tmp_path / "raw", tmp_path / "out", seed=0)


class TestSampleEpisode:
    def test_labels_come_from_chosen_classes(self):
        ds = _tiny_dataset(classes=5, per_class=8)
        rng = np.random.default_rng(0)
        ep = sample_episode(ds, length=12, n_classes=2, rng=rng)
        assert ep.images.shape == (12, 28, 28)
        assert len(set(ep.labels.tolist())) <= 2

    def test_single_class_exhausts_before_repeating(self):
        ds = _tiny_dataset(classes=2, per_class=6, seed=6)
        rng = np.random.default_rng(1)
        ep = sample_episode(ds, length=12, n_classes=1, rng=rng)
        keys = [ep.images[t].tobytes() for t in range(12)]
        # Every image appears exactly twice: once per pool refill.
        assert sorted(keys.count(k) for k in set(keys)) == [2] * 6
        assert len(set(keys[:6])) == 6

    def test_deterministic_under_seed(self):
        ds = _tiny_dataset(classes=4, per_class=5, seed=7)
        a = sample_episode(ds, 10, 2, np.random.default_rng(42))
        b = sample_episode(ds, 10, 2, np.random.default_rng(42))
        assert (a.images == b.images).all()
        assert (a.labels == b.labels).all()

    def test_validation(self):
        ds = _tiny_dataset(classes=2)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_episode(ds, 0, 1, rng)
        with pytest.raises(ValueError):
            sample_episode(ds, 5, 3, rng)

    def test_episode_validation(self):
        with pytest.raises(ValueError):
            Episode(np.zeros((3, 27, 28), dtype=np.uint8), np.zeros(3))
        with pytest.raises(ValueError):
            Episode(np.zeros((3, 28, 28), dtype=np.uint8), np.zeros(4))

    def test_episodes_to_tensor(self):
        ds = _tiny_dataset()
        rng = np.random.default_rng(2)
        eps = [sample_episode(ds, 5, 1, rng) for _ in range(3)]
        out = episodes_to_tensor(eps)
        assert out.shape == (3, 5, 28, 28)
        assert out.dtype == torch.float32
        assert set(out.unique().tolist()) <= {0.0, 1.0}


class TestSplitDisjointness:
    def test_ingested_corpus_is_disjoint(self, train_set, test_set):
        assert_disjoint_splits(train_set, test_set)

    def test_shared_class_id_rejected(self):
        a = _tiny_dataset(split="train")
        b = _tiny_dataset(split="test")
        with pytest.raises(ValueError, match="class ids"):
            assert_disjoint_splits(a, b)

    def test_shared_alphabet_rejected(self):
        a = _tiny_dataset(split="train", classes=2)
        images = {10: np.zeros((2, 28, 28), dtype=np.uint8)}
        b = GlyphDataset("test", images, {10: 0}, ("alpha-0",))
        with pytest.raises(ValueError, match="alphabets"):
            assert_disjoint_splits(a, b)
