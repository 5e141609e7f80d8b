"""Source training: classifier on clean data, enhancer in the blind setting.

The enhancer never sees test corruptions. It is trained to minimize the
frozen classifier's cross-entropy on augmentation-distorted source images
(mixed-chain family plus random-filter family), so whatever robustness it
gains must transfer to unseen corruption kinds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugChainSpec, augmix_lite, random_filter_augment
from .data import Dataset
from .errors import ContractError, ValidationError
from .models import (
    BATCH_TRACK,
    RUNNING_FROZEN,
    ModelBundle,
    bn_mode,
)
from .seeding import component_seed


@dataclass
class ClassifierTrainConfig:
    epochs: int = 12
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = True
    # keeps test-time predictions softly calibrated instead of saturated,
    # which the entropy-driven methods depend on
    label_smoothing: float = 0.1


@dataclass
class EnhancerTrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    aug: AugChainSpec = field(default_factory=AugChainSpec)
    filter_fraction: float = 0.5  # share of each batch distorted by random filters


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_val: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float]]:
        return [
            (i + 1, loss, val)
            for i, (loss, val) in enumerate(zip(self.epoch_loss, self.epoch_val))
        ]


def as_torch(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _shift_flip(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    out = images.copy()
    n = out.shape[0]
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    padded = np.pad(out, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
    for i in range(n):
        dy, dx = shifts[i]
        out[i] = padded[i, :, max_shift + dy : max_shift + dy + 32, max_shift + dx : max_shift + dx + 32]
    return out


def train_classifier(
    bundle: ModelBundle, train: Dataset, val: Dataset, cfg: ClassifierTrainConfig, seed: int
) -> TrainLog:
    """SGD training of the classifier on clean source data (light flip/shift
    augmentation); validation accuracy is logged per epoch."""
    if cfg.epochs < 0:
        raise ValidationError("epochs must be non-negative")
    model = bundle.classifier
    torch.manual_seed(component_seed(seed, "train-classifier-torch"))
    rng = np.random.default_rng(component_seed(seed, "train-classifier-batches"))
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    log = TrainLog()
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            images = train.images[idx]
            if cfg.augment:
                images = _shift_flip(images, rng)
            x = as_torch(images)
            y = torch.from_numpy(train.labels[idx])
            with bn_mode(model, BATCH_TRACK):
                loss = F.cross_entropy(model(x), y, label_smoothing=cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.epoch_loss.append(float(np.mean(losses)))
        log.epoch_val.append(evaluate_error_rate(bundle, val.images, val.labels))
    model.eval()
    return log


def _distort_batch(images: np.ndarray, aug: AugChainSpec, filter_fraction: float, seed: int) -> np.ndarray:
    out = augmix_lite(images, aug, seed)
    rng = np.random.default_rng(component_seed(seed, "family-pick"))
    use_filter = rng.random(len(images)) < filter_fraction
    if use_filter.any():
        out[use_filter] = random_filter_augment(
            images[use_filter], component_seed(seed, "random-filter")
        )
    return out


def train_enhancer(
    bundle: ModelBundle, train: Dataset, cfg: EnhancerTrainConfig, seed: int
) -> TrainLog:
    """Blind-setting enhancer training against the frozen classifier.

    Only enhancer parameters change; the classifier must already be frozen
    (``requires_grad=False`` on every parameter) and its BN running
    statistics are never touched (it runs in running-frozen mode).
    """
    if cfg.epochs < 0:
        raise ValidationError("epochs must be non-negative")
    if any(p.requires_grad for p in bundle.classifier.parameters()):
        raise ContractError("classifier must be frozen before enhancer training")
    torch.manual_seed(component_seed(seed, "train-enhancer-torch"))
    rng = np.random.default_rng(component_seed(seed, "train-enhancer-batches"))
    opt = torch.optim.SGD(bundle.enhancer.parameters(), lr=cfg.lr, momentum=cfg.momentum)

    # fixed distorted validation split for the per-epoch log
    val_n = min(512, len(train))
    val_idx = rng.choice(len(train), size=val_n, replace=False)
    val_images = _distort_batch(
        train.images[val_idx], cfg.aug, cfg.filter_fraction, component_seed(seed, "enhancer-val")
    )
    val_labels = train.labels[val_idx]

    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            distorted = _distort_batch(
                train.images[idx], cfg.aug, cfg.filter_fraction, component_seed(seed, f"batch-{step}")
            )
            x = as_torch(distorted)
            y = torch.from_numpy(train.labels[idx])
            with bn_mode(bundle.enhancer, BATCH_TRACK):
                enhanced = bundle.enhancer(x)
            with bn_mode(bundle.classifier, RUNNING_FROZEN):
                loss = F.cross_entropy(bundle.classifier(enhanced), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        log.epoch_loss.append(float(np.mean(losses)))
        log.epoch_val.append(
            mean_cross_entropy(bundle, val_images, val_labels, use_enhancer=True)
        )
    bundle.enhancer.eval()
    return log


# ---------------------------------------------------------------------------
# Frozen evaluation helpers
# ---------------------------------------------------------------------------

def _frozen_logits(bundle: ModelBundle, images: np.ndarray, use_enhancer: bool, batch_size: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = as_torch(images[start : start + batch_size])
            if use_enhancer:
                with bn_mode(bundle.enhancer, RUNNING_FROZEN):
                    x = bundle.enhancer(x)
            with bn_mode(bundle.classifier, RUNNING_FROZEN):
                outs.append(bundle.classifier(x))
    return torch.cat(outs)


def evaluate_error_rate(
    bundle: ModelBundle, images: np.ndarray, labels: np.ndarray, use_enhancer: bool = False
) -> float:
    logits = _frozen_logits(bundle, images, use_enhancer)
    wrong = (logits.argmax(dim=1).numpy() != labels).sum()
    return 100.0 * float(wrong) / len(labels)


def mean_cross_entropy(
    bundle: ModelBundle, images: np.ndarray, labels: np.ndarray, use_enhancer: bool = False
) -> float:
    logits = _frozen_logits(bundle, images, use_enhancer)
    return float(F.cross_entropy(logits, torch.from_numpy(labels)))


def evaluate_input_adapt(bundle: ModelBundle, suite) -> dict[tuple[str, int], dict[str, float]]:
    """Frozen error rate per suite cell for the raw and the enhanced pipeline."""
    out = {}
    for key, cell in suite.cells.items():
        out[key] = {
            "source": evaluate_error_rate(bundle, cell.images, cell.labels, use_enhancer=False),
            "input_adapt": evaluate_error_rate(bundle, cell.images, cell.labels, use_enhancer=True),
        }
    return out
