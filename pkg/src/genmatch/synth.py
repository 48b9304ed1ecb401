"""Procedural stroke glyphs for running the full pipeline without real data.

Each class is a template of a few polyline strokes; instances jitter the
control points so within-class drawings resemble each other far more than
drawings from other classes. Glyphs are rendered at the raw 105x105 size
(dark ink on white, like scanned handwriting) and written as a directory tree
shaped exactly like the real corpus, so they flow through the normal
ingestion path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import RAW_SIDE, LayoutExpectation, area_average

_MARGIN = 14


def _stamp_disk(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray, radius: int) -> None:
    offsets = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    side = mask.shape[0]
    for dy, dx in offsets:
        yy = np.clip(ys + dy, 0, side - 1)
        xx = np.clip(xs + dx, 0, side - 1)
        mask[yy, xx] = 1.0


def render_strokes(
    strokes: list[np.ndarray], radius: int, side: int = RAW_SIDE
) -> np.ndarray:
    """Rasterize polylines into an ink mask in [0, 1]."""
    mask = np.zeros((side, side))
    for stroke in strokes:
        for (y0, x0), (y1, x1) in zip(stroke[:-1], stroke[1:]):
            n = max(2, int(2 * np.hypot(y1 - y0, x1 - x0)))
            ys = np.rint(np.linspace(y0, y1, n)).astype(int)
            xs = np.rint(np.linspace(x0, x1, n)).astype(int)
            _stamp_disk(mask, ys, xs, radius)
    return mask


class GlyphClass:
    """A stroke template; ``draw`` renders one jittered instance.

    Instances vary the way different writers do: a wide horizontal placement
    around a class-specific center (the dominant style axis), a modest pose
    (rotation, scale, vertical shift), stroke weight, and local control-point
    wobble. The placement structure is what makes a growing conditioning set
    informative the way real handwriting is: the first examples reveal the
    class's home position, shrinking where the next drawing can land, and the
    best reference for a drawing is the previous drawing placed nearest to
    it, whose expected gap keeps shrinking as examples accumulate.
    """

    def __init__(self, rng: np.random.Generator) -> None:
        self.strokes = []
        for _ in range(rng.integers(2, 5)):
            n_points = rng.integers(3, 6)
            start = rng.uniform(_MARGIN, RAW_SIDE - _MARGIN, size=2)
            steps = rng.uniform(-34, 34, size=(n_points - 1, 2))
            points = np.vstack([start, start + np.cumsum(steps, axis=0)])
            self.strokes.append(
                np.clip(points, _MARGIN, RAW_SIDE - _MARGIN)
            )
        self.radius = int(rng.integers(3, 5))
        self.center = np.array([
            rng.uniform(-4.0, 4.0),
            rng.uniform(-12.0, 12.0),
        ])

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """One 105x105 grayscale instance, dark ink on white (uint8)."""
        angle = rng.normal(0.0, 0.12)
        scale = rng.uniform(0.9, 1.12)
        shift = self.center + np.array([
            rng.uniform(-3.0, 3.0),
            rng.uniform(-11.0, 11.0),
        ])
        rot = scale * np.array([
            [np.cos(angle), -np.sin(angle)],
            [np.sin(angle), np.cos(angle)],
        ])
        center = np.array([RAW_SIDE / 2, RAW_SIDE / 2])
        radius = max(2, self.radius + int(rng.integers(-1, 2)))
        jittered = []
        for s in self.strokes:
            posed = (s - center) @ rot.T + center + shift
            wobble = rng.normal(0.0, 3.0, size=s.shape)
            jittered.append(np.clip(posed + wobble, 2, RAW_SIDE - 3))
        mask = render_strokes(jittered, radius)
        return (255 * (1.0 - mask)).astype(np.uint8)


def write_synthetic_omniglot(
    root: Path | str,
    train_alphabets: int = 3,
    test_alphabets: int = 2,
    classes_per_alphabet: int = 16,
    images_per_class: int = 20,
    seed: int = 0,
) -> tuple[LayoutExpectation, LayoutExpectation]:
    """Write a corpus tree mirroring the real layout; returns expectations.

    ``root`` gains ``images_background`` and ``images_evaluation`` trees of
    PNG glyphs. Train and test alphabets come from disjoint class templates.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split_dir, count in (
        ("images_background", train_alphabets),
        ("images_evaluation", test_alphabets),
    ):
        for a in range(count):
            alphabet = root / split_dir / f"Synth-{split_dir[7:17]}-{a:02d}"
            for c in range(classes_per_alphabet):
                glyph = GlyphClass(rng)
                char_dir = alphabet / f"character{c + 1:02d}"
                char_dir.mkdir(parents=True, exist_ok=True)
                for rep in range(images_per_class):
                    img = Image.fromarray(glyph.draw(rng), mode="L")
                    img.save(char_dir / f"{a:02d}{c:02d}_{rep + 1:02d}.png")
    return (
        LayoutExpectation(
            train_alphabets, train_alphabets * classes_per_alphabet, images_per_class
        ),
        LayoutExpectation(
            test_alphabets, test_alphabets * classes_per_alphabet, images_per_class
        ),
    )


def write_synthetic_mnist(
    out_dir: Path | str,
    images_per_class: int = 100,
    seed: int = 0,
) -> int:
    """Write IDX files of synthetic digit-like glyphs; returns image count.

    Grayscale 28x28 images (bright ink on black, matching the real encoding)
    with labels interleaved across the ten classes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = [GlyphClass(rng) for _ in range(10)]
    count = 10 * images_per_class
    order = rng.permutation(count)
    images = np.empty((count, 28, 28), dtype=np.uint8)
    labels = np.empty(count, dtype=np.uint8)
    for slot, idx in enumerate(order):
        digit = int(idx) % 10
        raw = classes[digit].draw(rng)
        ink = 1.0 - raw / 255.0
        images[slot] = np.clip(255 * area_average(ink, 28), 0, 255).astype(np.uint8)
        labels[slot] = digit

    image_header = (0x00000803).to_bytes(4, "big") + b"".join(
        n.to_bytes(4, "big") for n in (count, 28, 28)
    )
    label_header = (0x00000801).to_bytes(4, "big") + count.to_bytes(4, "big")
    (out_dir / "t10k-images-idx3-ubyte").write_bytes(
        image_header + images.tobytes()
    )
    (out_dir / "t10k-labels-idx1-ubyte").write_bytes(
        label_header + labels.tobytes()
    )
    return count
