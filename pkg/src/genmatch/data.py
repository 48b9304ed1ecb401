"""Glyph corpora: ingestion, binary caching, and episode sampling.

Images are stored as 28x28 binary arrays (``uint8`` in {0, 1}, ink = 1),
produced from 105x105 grayscale glyphs by exact area averaging and a 0.5
threshold. Caches use a little-endian binary format with bit-packed images so
a full corpus stays small and loads without re-decoding PNGs.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

IMAGE_SIDE = 28
RAW_SIDE = 105
_BIT_BYTES = IMAGE_SIDE * IMAGE_SIDE // 8  # 784 bits -> 98 bytes

CACHE_MAGIC = b"GMND"
CACHE_VERSION = 1


class IngestError(Exception):
    """A source corpus does not match the expected layout."""


@dataclass(frozen=True)
class LayoutExpectation:
    """What a split's directory tree must contain."""

    alphabets: int
    classes: int
    images_per_class: int = 20


# Canonical split: 30 background alphabets with 964 characters for training,
# 20 evaluation alphabets with 659 characters held out, 20 drawings each.
OMNIGLOT_TRAIN_EXPECTED = LayoutExpectation(30, 964, 20)
OMNIGLOT_TEST_EXPECTED = LayoutExpectation(20, 659, 20)
MNIST_TEST_IMAGES = 10_000


@lru_cache(maxsize=8)
def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging ``n_in`` cells into ``n_out`` boxes."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                weights[i, j] = overlap / scale
    return weights


def area_average(image: np.ndarray, out_side: int) -> np.ndarray:
    """Exact box-filter downscale of a 2-d array to ``out_side`` squared."""
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    rows = _box_weights(image.shape[0], out_side)
    cols = _box_weights(image.shape[1], out_side)
    return rows @ image.astype(np.float64) @ cols.T


def downscale_binarize(ink: np.ndarray) -> np.ndarray:
    """105x105 ink fractions in [0, 1] to a binary 28x28 image.

    Area-averages to 28x28 and thresholds at 0.5 (>= 0.5 becomes ink).
    Thresholding is idempotent: feeding back a {0, 1} image re-thresholds to
    itself.
    """
    if ink.shape != (RAW_SIDE, RAW_SIDE):
        raise ValueError(
            f"expected a ({RAW_SIDE}, {RAW_SIDE}) glyph, got {ink.shape}"
        )
    if ink.min() < 0 or ink.max() > 1:
        raise ValueError("ink fractions must lie in [0, 1]")
    small = area_average(ink, IMAGE_SIDE)
    return (small >= 0.5).astype(np.uint8)


def pack_images(images: np.ndarray) -> bytes:
    """Bit-pack ``(n, 28, 28)`` binary images, 98 bytes per image."""
    if images.ndim != 3 or images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"expected (n, 28, 28) images, got {images.shape}")
    if not np.isin(images, (0, 1)).all():
        raise ValueError("images must be binary")
    return np.packbits(images.reshape(images.shape[0], -1), axis=1).tobytes()


def unpack_images(data: bytes, count: int) -> np.ndarray:
    if len(data) != count * _BIT_BYTES:
        raise ValueError(
            f"expected {count * _BIT_BYTES} packed bytes, got {len(data)}"
        )
    bits = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8).reshape(count, _BIT_BYTES),
        axis=1, count=IMAGE_SIDE * IMAGE_SIDE,
    )
    return bits.reshape(count, IMAGE_SIDE, IMAGE_SIDE)


@dataclass
class GlyphDataset:
    """A split of binary glyphs grouped by class."""

    split: str
    images: dict[int, np.ndarray]
    class_alphabet: dict[int, int]
    alphabet_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if set(self.images) != set(self.class_alphabet):
            raise ValueError("images and class_alphabet must share class ids")
        for cid, imgs in self.images.items():
            if imgs.ndim != 3 or imgs.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
                raise ValueError(f"class {cid}: bad image array shape {imgs.shape}")
            if imgs.dtype != np.uint8 or not np.isin(imgs, (0, 1)).all():
                raise ValueError(f"class {cid}: images must be binary uint8")
        for cid, aid in self.class_alphabet.items():
            if not 0 <= aid < len(self.alphabet_names):
                raise ValueError(f"class {cid}: alphabet id {aid} out of range")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.images))

    @property
    def n_classes(self) -> int:
        return len(self.images)

    @property
    def total_images(self) -> int:
        return sum(len(v) for v in self.images.values())


def save_dataset(dataset: GlyphDataset, path: Path | str) -> None:
    path = Path(path)
    split_bytes = dataset.split.encode()
    out = [
        CACHE_MAGIC,
        struct.pack("<IB", CACHE_VERSION, len(split_bytes)),
        split_bytes,
        struct.pack(
            "<HII", IMAGE_SIDE, dataset.n_classes, len(dataset.alphabet_names)
        ),
    ]
    for name in dataset.alphabet_names:
        encoded = name.encode()
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
    for cid in dataset.class_ids:
        imgs = dataset.images[cid]
        out.append(
            struct.pack("<III", cid, dataset.class_alphabet[cid], len(imgs))
        )
        out.append(pack_images(imgs))
    path.write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IngestError(f"{self.source}: truncated cache file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_dataset(path: Path | str) -> GlyphDataset:
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(4) != CACHE_MAGIC:
        raise IngestError(f"{path}: not a glyph cache (bad magic)")
    version, split_len = reader.unpack("<IB")
    if version != CACHE_VERSION:
        raise IngestError(
            f"{path}: cache version {version}, expected {CACHE_VERSION}"
        )
    split = reader.take(split_len).decode()
    side, n_classes, n_alphabets = reader.unpack("<HII")
    if side != IMAGE_SIDE:
        raise IngestError(f"{path}: cache image side {side}, expected {IMAGE_SIDE}")
    names = []
    for _ in range(n_alphabets):
        (name_len,) = reader.unpack("<H")
        names.append(reader.take(name_len).decode())
    images: dict[int, np.ndarray] = {}
    class_alphabet: dict[int, int] = {}
    for _ in range(n_classes):
        cid, aid, count = reader.unpack("<III")
        images[cid] = unpack_images(reader.take(count * _BIT_BYTES), count)
        class_alphabet[cid] = aid
    if reader.pos != len(reader.data):
        raise IngestError(f"{path}: trailing bytes after cache payload")
    return GlyphDataset(split, images, class_alphabet, tuple(names))


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


# --------------------------------------------------------------------- ingest


def _load_glyph_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    if arr.shape != (RAW_SIDE, RAW_SIDE):
        raise IngestError(
            f"{path}: glyph is {arr.shape}, expected ({RAW_SIDE}, {RAW_SIDE})"
        )
    return 1.0 - arr / 255.0  # ink is dark on white


def _scan_split(
    split_dir: Path,
    expected: LayoutExpectation,
    first_class_id: int,
    first_alphabet_id: int,
    problems: list[str],
) -> tuple[dict[int, list[Path]], dict[int, int], list[str]]:
    """Collect per-class PNG paths, recording layout discrepancies."""
    alphabets = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if len(alphabets) != expected.alphabets:
        problems.append(
            f"{split_dir.name}: {len(alphabets)} alphabets,"
            f" expected {expected.alphabets}"
        )
    class_files: dict[int, list[Path]] = {}
    class_alphabet: dict[int, int] = {}
    names = []
    cid = first_class_id
    for offset, alphabet in enumerate(alphabets):
        names.append(alphabet.name)
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(character.glob("*.png"))
            if len(files) != expected.images_per_class:
                problems.append(
                    f"{alphabet.name}/{character.name}: {len(files)} images,"
                    f" expected {expected.images_per_class}"
                )
            class_files[cid] = files
            class_alphabet[cid] = first_alphabet_id + offset
            cid += 1
    if len(class_files) != expected.classes:
        problems.append(
            f"{split_dir.name}: {len(class_files)} classes,"
            f" expected {expected.classes}"
        )
    return class_files, class_alphabet, names


def _raise_if_problems(problems: list[str], source: Path) -> None:
    if problems:
        shown = problems[:20]
        more = len(problems) - len(shown)
        detail = "\n  ".join(shown)
        if more > 0:
            detail += f"\n  ... and {more} more"
        raise IngestError(f"{source}: layout problems:\n  {detail}")


def ingest_omniglot(
    source: Path | str,
    out_dir: Path | str,
    expected_train: LayoutExpectation = OMNIGLOT_TRAIN_EXPECTED,
    expected_test: LayoutExpectation = OMNIGLOT_TEST_EXPECTED,
) -> dict:
    """Convert a raw glyph tree into train/test caches plus a manifest.

    The source must hold ``images_background`` (training alphabets) and
    ``images_evaluation`` (held-out alphabets) with one directory per
    alphabet, one per character, and the expected number of PNG drawings.
    Class ids are assigned globally so the two splits can never collide.
    """
    source = Path(source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_dirs = {
        "train": source / "images_background",
        "test": source / "images_evaluation",
    }
    for name, path in split_dirs.items():
        if not path.is_dir():
            raise IngestError(f"{source}: missing {path.name}/ for the {name} split")

    problems: list[str] = []
    train_files, train_alpha, train_names = _scan_split(
        split_dirs["train"], expected_train, 0, 0, problems
    )
    test_files, test_alpha, test_names = _scan_split(
        split_dirs["test"], expected_test,
        len(train_files), len(train_names), problems,
    )
    _raise_if_problems(problems, source)

    all_names = tuple(train_names + test_names)
    manifest: dict = {"source": str(source), "splits": {}}
    for split, files, alpha in (
        ("train", train_files, train_alpha),
        ("test", test_files, test_alpha),
    ):
        images = {}
        for cid, paths in files.items():
            images[cid] = np.stack(
                [downscale_binarize(_load_glyph_png(p)) for p in paths]
            )
        dataset = GlyphDataset(split, images, alpha, all_names)
        cache_path = out_dir / f"omniglot_{split}.gmd"
        save_dataset(dataset, cache_path)
        manifest["splits"][split] = {
            "cache": cache_path.name,
            "sha256": sha256_file(cache_path),
            "classes": dataset.n_classes,
            "images": dataset.total_images,
        }
    manifest_path = out_dir / "ingest_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IngestError(f"{path}: truncated IDX file")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise IngestError(
            f"{path}: IDX magic {magic}, expected {expected_magic}"
        )
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(data) < header:
        raise IngestError(f"{path}: truncated IDX header")
    dims = [
        int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(n_dims)
    ]
    body = np.frombuffer(data, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise IngestError(
            f"{path}: payload holds {body.size} bytes for dims {dims}"
        )
    return body.reshape(dims)


def ingest_mnist(
    source: Path | str,
    out_dir: Path | str,
    seed: int,
    expected_images: int = MNIST_TEST_IMAGES,
) -> dict:
    """Binarize the MNIST test set once with a seeded Bernoulli draw.

    Pixel intensities become ink probabilities (v / 255); each pixel is
    sampled exactly once at ingest time so every later evaluation sees the
    same binary images. Looks for ``t10k-images-idx3-ubyte`` and
    ``t10k-labels-idx1-ubyte`` (optionally gzipped) under ``source``.
    """
    source = Path(source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def find(stem: str) -> Path:
        for suffix in ("", ".gz"):
            candidate = source / f"{stem}{suffix}"
            if candidate.exists():
                return candidate
        raise IngestError(f"{source}: missing {stem}[.gz]")

    images = _read_idx(find("t10k-images-idx3-ubyte"), 0x00000803)
    labels = _read_idx(find("t10k-labels-idx1-ubyte"), 0x00000801)
    if images.ndim != 3 or images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise IngestError(f"images are {images.shape}, expected (n, 28, 28)")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise IngestError(
            f"{labels.shape[0]} labels for {images.shape[0]} images"
        )
    if images.shape[0] != expected_images:
        raise IngestError(
            f"{images.shape[0]} test images, expected {expected_images}"
        )

    rng = np.random.default_rng(seed)
    binary = (rng.random(images.shape) < images / 255.0).astype(np.uint8)
    by_class = {
        digit: binary[labels == digit] for digit in range(10)
    }
    empty = [d for d, arr in by_class.items() if len(arr) == 0]
    if empty:
        raise IngestError(f"digits with no test images: {empty}")
    dataset = GlyphDataset(
        "mnist-test", by_class, {d: 0 for d in range(10)}, ("mnist",)
    )
    cache_path = out_dir / "mnist_test.gmd"
    save_dataset(dataset, cache_path)
    manifest = {
        "source": str(source),
        "seed": seed,
        "cache": cache_path.name,
        "sha256": sha256_file(cache_path),
        "classes": dataset.n_classes,
        "images": dataset.total_images,
    }
    (out_dir / "mnist_manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n"
    )
    return manifest


# -------------------------------------------------------------------- episodes


@dataclass
class Episode:
    """An ordered run of images with their class labels."""

    images: np.ndarray  # (T, 28, 28) uint8 in {0, 1}
    labels: np.ndarray  # (T,) int64

    def __post_init__(self) -> None:
        if self.images.ndim != 3 or self.images.shape[1:] != (
            IMAGE_SIDE,
            IMAGE_SIDE,
        ):
            raise ValueError(f"bad episode image shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.labels.shape} labels for {self.images.shape[0]} images"
            )


def sample_episode(
    dataset: GlyphDataset,
    length: int,
    n_classes: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an episode: pick classes, then images class-uniformly per slot.

    Within a class, images are drawn without replacement until the class is
    exhausted, after which its pool refills.
    """
    if length < 1:
        raise ValueError(f"episode length must be >= 1, got {length}")
    if not 1 <= n_classes <= dataset.n_classes:
        raise ValueError(
            f"cannot pick {n_classes} classes from {dataset.n_classes}"
        )
    ids = np.array(dataset.class_ids)
    chosen = rng.choice(ids, size=n_classes, replace=False)
    pools: dict[int, list[int]] = {int(c): [] for c in chosen}
    images = np.empty((length, IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    labels = np.empty(length, dtype=np.int64)
    for t in range(length):
        cid = int(chosen[rng.integers(n_classes)])
        if not pools[cid]:
            pools[cid] = list(rng.permutation(len(dataset.images[cid])))
        images[t] = dataset.images[cid][pools[cid].pop()]
        labels[t] = cid
    return Episode(images, labels)


def episodes_to_tensor(
    episodes: list[Episode], dtype: torch.dtype = torch.float32
) -> Tensor:
    """Stack episodes into a ``(B, T, 28, 28)`` tensor."""
    stacked = np.stack([e.images for e in episodes])
    return torch.from_numpy(stacked).to(dtype)


def assert_disjoint_splits(train: GlyphDataset, test: GlyphDataset) -> None:
    """Train/test must share no class ids and no alphabet names."""
    shared_ids = set(train.images) & set(test.images)
    if shared_ids:
        raise ValueError(f"class ids in both splits: {sorted(shared_ids)[:10]}")
    train_alpha = {train.alphabet_names[a] for a in train.class_alphabet.values()}
    test_alpha = {test.alphabet_names[a] for a in test.class_alphabet.values()}
    shared_names = train_alpha & test_alpha
    if shared_names:
        raise ValueError(f"alphabets in both splits: {sorted(shared_names)}")
