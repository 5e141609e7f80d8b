"""Source data: a procedural 10-class shape dataset plus external ingestion.

Images are 3x32x32 float32 in [0, 1], always quantized to the 8-bit grid
(v/255) so that exporting and re-ingesting a dataset is byte-exact and runs
are replayable from their manifests.

Binary record layout (CIFAR-style): per record 1 label byte followed by
3072 pixel bytes (channel-major, row-major within channel).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IngestionError, ValidationError
from .seeding import component_seed

NUM_CLASSES = 10
IMAGE_SIDE = 32
RECORD_BYTES = 1 + 3 * IMAGE_SIDE * IMAGE_SIDE

CLASS_NAMES = (
    "circle",
    "ring",
    "square",
    "square_outline",
    "triangle",
    "plus",
    "h_stripes",
    "v_stripes",
    "checkerboard",
    "diamond",
)


def quantize01(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 8-bit grid; output float32."""
    return (np.clip(np.rint(np.clip(x, 0.0, 1.0) * 255.0), 0, 255) / 255.0).astype(np.float32)


@dataclass
class Dataset:
    split: str
    images: np.ndarray  # (n, 3, 32, 32) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_histogram: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1:] != (3, IMAGE_SIDE, IMAGE_SIDE):
            raise ValidationError(f"bad image store shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValidationError("image count != label count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValidationError("label out of range")
        self.class_histogram = np.bincount(self.labels, minlength=NUM_CLASSES)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(split or self.split, self.images[indices].copy(), self.labels[indices].copy())


# ---------------------------------------------------------------------------
# Procedural shape rendering
# ---------------------------------------------------------------------------

_PIX = 2.0 / IMAGE_SIDE  # pixel size in normalized [-1, 1] coordinates

_UV = np.stack(
    np.meshgrid(
        np.linspace(-1.0, 1.0, IMAGE_SIDE, endpoint=False) + 1.0 / IMAGE_SIDE,
        np.linspace(-1.0, 1.0, IMAGE_SIDE, endpoint=False) + 1.0 / IMAGE_SIDE,
        indexing="xy",
    )
)  # (2, H, W): u across, v down


def _edge(dist: np.ndarray) -> np.ndarray:
    # ~1 pixel wide anti-aliased transition around dist == 0 (inside: dist < 0)
    return np.clip(0.5 - dist / _PIX, 0.0, 1.0)


def _stripe_mask(coord: np.ndarray, period_px: float, phase: float) -> np.ndarray:
    s = np.sin(2.0 * np.pi * (coord * (IMAGE_SIDE / 2.0)) / period_px + phase)
    return np.clip(0.5 + s * period_px / (2.0 * np.pi), 0.0, 1.0)


def _shape_mask(label: int, rng: np.random.Generator) -> np.ndarray:
    theta = np.deg2rad(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.45, 0.70)
    cx, cy = rng.uniform(-0.22, 0.22, size=2)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = cos_t * (_UV[0] - cx) + sin_t * (_UV[1] - cy)
    v = -sin_t * (_UV[0] - cx) + cos_t * (_UV[1] - cy)

    name = CLASS_NAMES[label]
    if name == "circle":
        return _edge(np.hypot(u, v) - scale)
    if name == "ring":
        r = np.hypot(u, v)
        return _edge(r - scale) * _edge(0.55 * scale - r)
    if name == "square":
        return _edge(np.maximum(np.abs(u), np.abs(v)) - 0.85 * scale)
    if name == "square_outline":
        d = np.maximum(np.abs(u), np.abs(v))
        return _edge(d - 0.85 * scale) * _edge(0.55 * scale - d)
    if name == "triangle":
        # point-up triangle; d = max signed distance to the three edges
        verts = scale * np.array([[0.0, -1.0], [-0.9, 0.65], [0.9, 0.65]])
        d = np.full_like(u, -np.inf)
        for i in range(3):
            p1, p2 = verts[i], verts[(i + 1) % 3]
            edge_dir = p2 - p1
            normal = np.array([edge_dir[1], -edge_dir[0]])
            normal /= np.hypot(*normal)
            d = np.maximum(d, (u - p1[0]) * normal[0] + (v - p1[1]) * normal[1])
        return _edge(d)
    if name == "plus":
        w = 0.34 * scale
        bar1 = np.maximum(np.abs(u) - w, np.abs(v) - scale)
        bar2 = np.maximum(np.abs(v) - w, np.abs(u) - scale)
        return _edge(np.minimum(bar1, bar2))
    if name == "h_stripes":
        return _stripe_mask(v, rng.uniform(4.0, 7.0), rng.uniform(0.0, 2.0 * np.pi))
    if name == "v_stripes":
        return _stripe_mask(u, rng.uniform(4.0, 7.0), rng.uniform(0.0, 2.0 * np.pi))
    if name == "checkerboard":
        period = rng.uniform(5.0, 8.0)
        m1 = _stripe_mask(v, period, rng.uniform(0.0, 2.0 * np.pi))
        m2 = _stripe_mask(u, period, rng.uniform(0.0, 2.0 * np.pi))
        return m1 + m2 - 2.0 * m1 * m2
    if name == "diamond":
        return _edge(np.abs(u) + np.abs(v) - 1.2 * scale)
    raise ValidationError(f"no renderer for class {label}")


def _luminance(rgb: np.ndarray) -> float:
    return float(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])


def _random_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bright = np.array(
        colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.6, 1.0))
    )
    lum = _luminance(bright)
    if lum < 0.5:  # lighten toward white so the pair always has contrast
        t = (0.5 - lum) / (1.0 - lum)
        bright = bright + t * (1.0 - bright)
    dark = np.array(
        colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.6), rng.uniform(0.02, 0.3))
    )
    if rng.random() < 0.5:
        return bright, dark
    return dark, bright


def _render_sample(label: int, rng: np.random.Generator) -> np.ndarray:
    mask = _shape_mask(label, rng)
    fg, bg = _random_colors(rng)

    # background: linear gradient plus a smooth low-resolution blotch field
    a, b = rng.uniform(-0.5, 0.5, size=2)
    gradient = 0.85 + a * _UV[0] + b * _UV[1]
    blotch = ndimage.zoom(rng.uniform(-1.0, 1.0, size=(5, 5)), IMAGE_SIDE / 5.0, order=1)[
        :IMAGE_SIDE, :IMAGE_SIDE
    ]
    shade = np.clip(gradient + 0.08 * blotch, 0.0, 1.4)

    img = bg[:, None, None] * shade[None] * (1.0 - mask)[None] + fg[:, None, None] * mask[None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return quantize01(img)


def generate_synthetic_dataset(seed: int, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    """Deterministic 10-class textured-shape dataset, class-balanced per split."""
    if n_train < NUM_CLASSES or n_test < NUM_CLASSES:
        raise ValidationError("each split needs at least one sample per class")
    splits = []
    for split, n in (("train", n_train), ("test", n_test)):
        rng = np.random.default_rng(component_seed(seed, f"synthetic-{split}"))
        base, extra = divmod(n, NUM_CLASSES)
        counts = [base + (1 if c < extra else 0) for c in range(NUM_CLASSES)]
        labels = np.repeat(np.arange(NUM_CLASSES), counts)
        labels = labels[rng.permutation(n)]
        images = np.empty((n, 3, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
        for i in range(n):
            images[i] = _render_sample(int(labels[i]), rng)
        splits.append(Dataset(split, images, labels.astype(np.int64)))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# External ingestion / export
# ---------------------------------------------------------------------------

def export_binary(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    with open(path, "wb") as fh:
        for label, pix in zip(dataset.labels, pixels):
            fh.write(bytes([int(label)]))
            fh.write(pix.tobytes())


def _ingest_binary(path: Path, split: str) -> Dataset:
    raw = path.read_bytes()
    n, leftover = divmod(len(raw), RECORD_BYTES)
    if leftover:
        raise IngestionError(f"{path}: truncated record at byte offset {n * RECORD_BYTES}")
    if n == 0:
        raise IngestionError(f"{path}: empty file")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise ValidationError(
            f"{path}: label {labels[bad]} out of range at record {bad}"
        )
    images = (buf[:, 1:].reshape(n, 3, IMAGE_SIDE, IMAGE_SIDE) / 255.0).astype(np.float32)
    return Dataset(split, images, labels)


def _ingest_images(path: Path, split: str) -> Dataset:
    from PIL import Image

    images, labels = [], []
    for class_dir in sorted(p for p in path.iterdir() if p.is_dir()):
        try:
            label = int(class_dir.name)
        except ValueError as e:
            raise IngestionError(f"{class_dir}: directory name is not a class id") from e
        if not 0 <= label < NUM_CLASSES:
            raise ValidationError(f"{class_dir}: label {label} out of range")
        for img_path in sorted(class_dir.iterdir()):
            with Image.open(img_path) as im:
                im = im.convert("RGB")
                if im.size != (IMAGE_SIDE, IMAGE_SIDE):
                    raise IngestionError(f"{img_path}: expected 32x32 image, got {im.size}")
                arr = np.asarray(im, dtype=np.uint8)
            images.append((arr.transpose(2, 0, 1) / 255.0).astype(np.float32))
            labels.append(label)
    if not images:
        raise IngestionError(f"{path}: no images found")
    return Dataset(split, np.stack(images), np.asarray(labels, dtype=np.int64))


def ingest_external(path: str | Path, format: str = "binary", split: str = "test") -> Dataset:
    """Load a dataset from the documented binary layout or a directory of
    per-class image folders."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file or directory")
    if format == "binary":
        return _ingest_binary(path, split)
    if format == "images":
        return _ingest_images(path, split)
    raise ValidationError(f"unknown ingestion format: {format!r}")
