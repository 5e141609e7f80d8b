"""Corruption transform family with five severity levels, plus suite building.

Ten corruption kinds are implemented ("desk-scale-10"); every report labels
the suite accordingly. Severity parameters were calibrated once against the
frozen baseline classifier so error spans roughly 10-60% from severity 1 to
5, then committed as constants below; the suite manifest records their hash
so stale suites are refused.

All transforms are pure given (kind, severity, seed): equal specs produce
byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

from .data import Dataset, export_binary, ingest_external, quantize01
from .errors import ValidationError
from .seeding import component_seed

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg_like",
    "elastic_like",
)

SUITE_LABEL = "desk-scale-10"
SEVERITIES = (1, 2, 3, 4, 5)

# Frozen per-kind parameter tables, severity 1..5.
SEVERITY_TABLES: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.07, 0.12, 0.18, 0.26, 0.36),   # noise sigma
    "shot_noise": (60.0, 25.0, 12.0, 5.5, 2.8),         # photons per unit intensity
    "impulse_noise": (0.03, 0.07, 0.13, 0.21, 0.32),    # salt/pepper fraction
    "defocus_blur": (1.0, 1.5, 2.1, 2.9, 3.9),          # disk radius, px
    "motion_blur": (3.0, 5.0, 7.0, 10.0, 14.0),         # kernel length, px
    "brightness": (0.08, 0.16, 0.24, 0.33, 0.42),       # additive shift
    "contrast": (0.60, 0.45, 0.32, 0.20, 0.12),         # contraction toward mean
    "pixelate": (0.72, 0.55, 0.42, 0.30, 0.22),         # downscale factor
    "jpeg_like": (5.0, 3.0, 2.0, 1.5, 1.0),             # quality factor
    "elastic_like": (3.0, 4.5, 6.5, 9.0, 12.0),         # peak displacement, px
}


def severity_tables_hash() -> str:
    blob = json.dumps({k: list(v) for k, v in SEVERITY_TABLES.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind: {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValidationError(f"severity must be in 1..5, got {self.severity}")

    @property
    def param(self) -> float:
        return SEVERITY_TABLES[self.kind][self.severity - 1]


# ---------------------------------------------------------------------------
# Transform implementations (batch in, batch out; [0, 1] float32)
# ---------------------------------------------------------------------------

def _gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape)


def _shot_noise(x, photons, rng):
    return rng.poisson(x * photons) / photons


def _impulse_noise(x, frac, rng):
    u = rng.random(size=x.shape)
    out = np.where(u < frac / 2.0, 0.0, x)
    return np.where(u > 1.0 - frac / 2.0, 1.0, out)


def _disk_kernel(radius: float) -> np.ndarray:
    r_int = int(np.ceil(radius))
    size = 2 * r_int + 1
    sub = 4  # supersampled anti-aliased disk
    coords = (np.arange(size * sub) + 0.5) / sub - (size / 2.0)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    k = mask.reshape(size, sub, size, sub).mean(axis=(1, 3))
    return k / k.sum()


def _defocus_blur(x, radius, rng):
    k = _disk_kernel(radius)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[i, c] = ndimage.convolve(x[i, c], k, mode="reflect")
    return out


def _line_kernel(length: float, angle: float) -> np.ndarray:
    half = int(np.ceil(length / 2.0))
    size = 2 * half + 1
    k = np.zeros((size, size))
    n_steps = max(2, int(length * 8))
    ts = np.linspace(-length / 2.0, length / 2.0, n_steps)
    for t in ts:  # bilinear splat of points along the segment
        px = half + t * np.cos(angle)
        py = half + t * np.sin(angle)
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    k[y0 + dy, x0 + dx] += wx * wy
    return k / k.sum()


def _motion_blur(x, length, rng):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        k = _line_kernel(length, rng.uniform(0.0, np.pi))
        for c in range(x.shape[1]):
            out[i, c] = ndimage.convolve(x[i, c], k, mode="reflect")
    return out


def _brightness(x, shift, rng):
    return x + shift


def _contrast(x, factor, rng):
    mean = x.mean(axis=(2, 3), keepdims=True)
    return (x - mean) * factor + mean


def _pixelate(x, factor, rng):
    side = x.shape[-1]
    m = max(1, int(round(side * factor)))
    bounds = np.floor(np.linspace(0, side, m + 1)).astype(int)
    # box-average down to m x m, then nearest-neighbour back up
    sums = np.add.reduceat(np.add.reduceat(x, bounds[:-1], axis=2), bounds[:-1], axis=3)
    counts = np.diff(bounds)
    block = sums / (counts[:, None] * counts[None, :])
    idx = np.searchsorted(bounds, np.arange(side), side="right") - 1
    return block[:, :, idx][:, :, :, idx]


_JPEG_BASE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _jpeg_like(x, quality, rng):
    # 8x8 block-DCT quantization on each channel; no chroma subsampling.
    # The step cap is deliberately far above the codec's 255 so that very
    # low quality factors stay distinguishable on 32x32 inputs.
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.clip((_JPEG_BASE_TABLE * scale + 50.0) / 100.0, 1.0, 4000.0)
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 8, 8, w // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    coeff = sp_fft.dctn(blocks * 255.0 - 128.0, axes=(-2, -1), norm="ortho")
    coeff = np.rint(coeff / q) * q
    rec = (sp_fft.idctn(coeff, axes=(-2, -1), norm="ortho") + 128.0) / 255.0
    return rec.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _elastic_like(x, alpha, rng):
    n, c, h, w = x.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty_like(x)
    for i in range(n):
        disp = ndimage.gaussian_filter(
            rng.uniform(-1.0, 1.0, size=(2, h, w)), sigma=(0, 4.0, 4.0), mode="reflect"
        )
        disp *= alpha / (np.abs(disp).max() + 1e-12)
        coords = [rows + disp[0], cols + disp[1]]
        for ch in range(c):
            out[i, ch] = ndimage.map_coordinates(x[i, ch], coords, order=1, mode="reflect")
    return out


_TRANSFORMS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur,
    "brightness": _brightness,
    "contrast": _contrast,
    "pixelate": _pixelate,
    "jpeg_like": _jpeg_like,
    "elastic_like": _elastic_like,
}


def corrupt_with_param(x: np.ndarray, kind: str, param: float, seed: int = 0) -> np.ndarray:
    """Apply one corruption with an explicit parameter (bypasses the tables)."""
    if kind not in _TRANSFORMS:
        raise ValidationError(f"unknown corruption kind: {kind!r}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValidationError("corruption input must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = _TRANSFORMS[kind](x.astype(np.float64), param, rng)
    return quantize01(out)


def apply_corruption(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to a batch; output is clamped, quantized, same shape."""
    return corrupt_with_param(x, spec.kind, spec.param, spec.seed)


# ---------------------------------------------------------------------------
# Corrupted suite
# ---------------------------------------------------------------------------

@dataclass
class CorruptedSuite:
    """Per-(kind, severity) corrupted test cells over one shared clean subset.

    The same clean indices underlie every cell, so cross-kind comparisons
    are paired. ``clean`` is the uncorrupted subset itself.
    """

    cells: dict[tuple[str, int], Dataset]
    clean: Dataset
    manifest: dict = field(default_factory=dict)

    def cell(self, kind: str, severity: int) -> Dataset:
        key = (kind, severity)
        if key not in self.cells:
            raise ValidationError(f"suite has no cell ({kind}, {severity})")
        return self.cells[key]

    @property
    def kinds(self) -> list[str]:
        return list(dict.fromkeys(k for k, _ in self.cells))

    @property
    def severities(self) -> list[int]:
        return sorted({s for _, s in self.cells})

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        export_binary(self.clean, out_dir / "clean" / "data.bin")
        for (kind, sev), ds in self.cells.items():
            export_binary(ds, out_dir / kind / str(sev) / "data.bin")

    @classmethod
    def load(cls, out_dir: str | Path) -> "CorruptedSuite":
        out_dir = Path(out_dir)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        if manifest["table_hash"] != severity_tables_hash():
            raise ValidationError(
                "suite was built with different severity tables; rebuild it"
            )
        clean = ingest_external(out_dir / "clean" / "data.bin", "binary")
        cells = {}
        for kind in manifest["kinds"]:
            for sev in manifest["severities"]:
                cells[(kind, int(sev))] = ingest_external(
                    out_dir / kind / str(sev) / "data.bin", "binary"
                )
        return cls(cells=cells, clean=clean, manifest=manifest)


def build_corrupted_suite(
    dataset: Dataset,
    kinds: tuple[str, ...] = CORRUPTION_KINDS,
    severities: tuple[int, ...] = (5,),
    n_per_cell: int = 500,
    seed: int = 0,
) -> CorruptedSuite:
    """Corrupt a seeded, shared subsample of ``dataset`` for every cell."""
    if not kinds:
        raise ValidationError("kinds must be non-empty")
    for k in kinds:
        if k not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind: {k!r}")
    if n_per_cell > len(dataset):
        raise ValidationError(f"n_per_cell={n_per_cell} exceeds dataset size {len(dataset)}")

    rng = np.random.default_rng(component_seed(seed, "suite-subsample"))
    if n_per_cell == len(dataset):
        indices = np.arange(len(dataset))
    else:
        indices = np.sort(rng.choice(len(dataset), size=n_per_cell, replace=False))
    clean = dataset.subset(indices)

    cells = {}
    for kind in kinds:
        for sev in severities:
            spec = CorruptionSpec(kind, sev, seed=component_seed(seed, f"cell:{kind}:{sev}"))
            cells[(kind, sev)] = Dataset("test", apply_corruption(clean.images, spec), clean.labels.copy())
    manifest = {
        "label": SUITE_LABEL,
        "seed": seed,
        "table_hash": severity_tables_hash(),
        "kinds": list(kinds),
        "severities": [int(s) for s in severities],
        "n_per_cell": int(n_per_cell),
        "indices": [int(i) for i in indices],
    }
    return CorruptedSuite(cells=cells, clean=clean, manifest=manifest)
