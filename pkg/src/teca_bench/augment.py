"""Training-time augmentation: a mixed-chain family plus random filters.

The chain family mirrors the classic mixed-augmentation recipe: sample a few
short op chains, blend them with Dirichlet weights, then mix with the
original image using a Beta draw. Its op vocabulary is deliberately disjoint
from the corruption kinds used at test time; the guard below is asserted
whenever a chain spec is constructed.

``random_filter_augment`` is a second stochastic family (random 3x3
convolution kernels) standing in for heavier learned augmentation; reports
call it "DeepAugment-substitute".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .corruptions import CORRUPTION_KINDS
from .errors import ValidationError

AUG_OPS = (
    "autocontrast_like",
    "equalize_like",
    "posterize",
    "rotate",
    "solarize",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)


@dataclass(frozen=True)
class AugChainSpec:
    ops: tuple[str, ...] = AUG_OPS
    width: int = 3
    depth: int = 2
    dirichlet_alpha: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0

    def __post_init__(self) -> None:
        if not self.ops:
            raise ValidationError("augmentation op list must not be empty")
        unknown = set(self.ops) - set(AUG_OPS)
        if unknown:
            raise ValidationError(f"unknown augmentation ops: {sorted(unknown)}")
        leaked = set(self.ops) & set(CORRUPTION_KINDS)
        if leaked:
            raise ValidationError(f"augmentation ops overlap test corruptions: {sorted(leaked)}")
        if self.width < 1 or self.depth < 1:
            raise ValidationError("width and depth must be >= 1")


# ---------------------------------------------------------------------------
# Individual ops; x is one image (3, H, W) in [0, 1]; value is the concrete
# op parameter (already sampled, sign included), so application is pure.
# ---------------------------------------------------------------------------

def _affine(x: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        out[c] = ndimage.affine_transform(
            x[c], matrix, offset=offset, order=1, mode="nearest"
        )
    return out


def _centered_affine(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    center = (np.asarray(x.shape[1:], dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    return _affine(x, matrix, offset)


def apply_op(x: np.ndarray, name: str, value: float) -> np.ndarray:
    if name == "autocontrast_like":
        out = np.empty_like(x)
        for c in range(x.shape[0]):
            lo, hi = x[c].min(), x[c].max()
            out[c] = (x[c] - lo) / (hi - lo) if hi - lo > 1e-6 else x[c]
        return out
    if name == "equalize_like":
        out = np.empty_like(x)
        for c in range(x.shape[0]):
            q = np.minimum((x[c] * 255.0).astype(np.int64), 255)
            hist = np.bincount(q.reshape(-1), minlength=256)
            cdf = np.cumsum(hist).astype(np.float64)
            cdf = (cdf - cdf[0]) / max(cdf[-1] - cdf[0], 1.0)
            out[c] = cdf[q].astype(x.dtype)
        return out
    if name == "posterize":
        bits = int(np.clip(round(value), 1, 8))
        q = (x * 255.0).astype(np.uint8)
        keep = np.uint8((0xFF << (8 - bits)) & 0xFF)
        return ((q & keep) / 255.0).astype(x.dtype)
    if name == "rotate":
        theta = np.deg2rad(value)
        m = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        return _centered_affine(x, m)
    if name == "solarize":
        return np.where(x >= value, 1.0 - x, x).astype(x.dtype)
    if name == "shear_x":
        return _centered_affine(x, np.array([[1.0, 0.0], [value, 1.0]]))
    if name == "shear_y":
        return _centered_affine(x, np.array([[1.0, value], [0.0, 1.0]]))
    if name == "translate_x":
        return _affine(x, np.eye(2), np.array([0.0, -value]))
    if name == "translate_y":
        return _affine(x, np.eye(2), np.array([-value, 0.0]))
    raise ValidationError(f"unknown augmentation op: {name!r}")


_OP_RANGES = {
    "posterize": (2.0, 5.0),
    "rotate": (-25.0, 25.0),
    "solarize": (0.4, 1.0),
    "shear_x": (-0.3, 0.3),
    "shear_y": (-0.3, 0.3),
    "translate_x": (-6.0, 6.0),
    "translate_y": (-6.0, 6.0),
}


def sample_chain(spec: AugChainSpec, rng: np.random.Generator) -> list[tuple[str, float]]:
    depth = int(rng.integers(1, spec.depth + 1))
    chain = []
    for _ in range(depth):
        name = spec.ops[int(rng.integers(len(spec.ops)))]
        lo, hi = _OP_RANGES.get(name, (0.0, 0.0))
        chain.append((name, float(rng.uniform(lo, hi))))
    return chain


def apply_chain(x: np.ndarray, chain: list[tuple[str, float]]) -> np.ndarray:
    for name, value in chain:
        x = apply_op(x, name, value)
    return x


def augmix_lite(
    x: np.ndarray,
    spec: AugChainSpec,
    seed: int,
    *,
    mix_weight: float | None = None,
    chain_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Convex mixture of ``spec.width`` augmented chains with the original.

    ``mix_weight`` is the weight of the original image (overrides the Beta
    draw when given); ``chain_weights`` overrides the Dirichlet draw. Both
    exist for sensitivity runs and fixtures.
    """
    rng = np.random.default_rng(seed)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        w = (
            np.asarray(chain_weights, dtype=np.float64)
            if chain_weights is not None
            else rng.dirichlet([spec.dirichlet_alpha] * spec.width)
        )
        m = float(mix_weight) if mix_weight is not None else float(rng.beta(spec.beta_a, spec.beta_b))
        mixture = np.zeros_like(x[i], dtype=np.float64)
        for j in range(spec.width):
            mixture += w[j] * apply_chain(x[i].astype(np.float64), sample_chain(spec, rng))
        out[i] = np.clip(m * x[i] + (1.0 - m) * mixture, 0.0, 1.0)
    return out


def random_filter_augment(x: np.ndarray, seed: int, strength: tuple[float, float] = (0.4, 1.0)) -> np.ndarray:
    """Blend each image with itself convolved by a random 3x3 kernel."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        k = rng.normal(0.0, 0.6, size=(3, 3))
        k = k - k.mean() + 1.0 / 9.0  # sum-1 kernel keeps overall brightness
        beta = rng.uniform(*strength)
        for c in range(x.shape[1]):
            filtered = ndimage.convolve(x[i, c].astype(np.float64), k, mode="reflect")
            out[i, c] = np.clip((1.0 - beta) * x[i, c] + beta * filtered, 0.0, 1.0)
    return out
