"""Model pair, batch-norm mode control, parameter groups, and forward ops.

The adapted object is a :class:`ModelBundle`: a small residual CNN classifier
plus a residual U-Net enhancer, treated as one combined model by the
adaptation layer. Batch-norm behaviour is controlled explicitly through
:class:`BNMode` instead of ``module.train()`` so each forward pass states
which statistics it uses and whether running buffers may change.
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, InputShapeError, NumericalError, ValidationError

IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PARAM_GROUP_NAMES = (
    "classifier_bn_affine",
    "classifier_all",
    "enhancer_all",
    "enhancer_bn_affine",
)


# ---------------------------------------------------------------------------
# Batch-norm mode control
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BNMode:
    """How batch-norm layers behave during one forward pass.

    ``stats_source`` selects the statistics used for normalization
    ("running" buffers or the current "batch", biased variance).
    ``stats_update`` says whether running buffers may be written.
    Using running statistics while also tracking them is a training-only
    combination and is rejected here.
    """

    stats_source: str
    stats_update: str

    def __post_init__(self) -> None:
        if self.stats_source not in ("running", "batch"):
            raise ValidationError(f"unknown stats_source: {self.stats_source!r}")
        if self.stats_update not in ("frozen", "track"):
            raise ValidationError(f"unknown stats_update: {self.stats_update!r}")
        if self.stats_source == "running" and self.stats_update == "track":
            raise ValidationError("(running, track) is not a valid test-time BN mode")


RUNNING_FROZEN = BNMode("running", "frozen")
BATCH_FROZEN = BNMode("batch", "frozen")
BATCH_TRACK = BNMode("batch", "track")


def _bn_layers(module: nn.Module) -> list[nn.BatchNorm2d]:
    return [m for m in module.modules() if isinstance(m, nn.BatchNorm2d)]


@contextmanager
def bn_mode(module: nn.Module, mode: BNMode):
    """Temporarily put every BN layer of ``module`` into ``mode``.

    Models are kept in eval() globally; this context is the only mechanism
    that switches BN semantics, and it restores the previous flags on exit.
    """
    layers = _bn_layers(module)
    saved = [(m.training, m.track_running_stats) for m in layers]
    for m in layers:
        if mode.stats_source == "running":
            m.train(False)
        else:
            m.train(True)
            # train + track_running_stats=False makes torch use batch
            # statistics without touching the running buffers
            m.track_running_stats = mode.stats_update == "track"
    try:
        yield
    finally:
        for m, (training, track) in zip(layers, saved):
            m.train(training)
            m.track_running_stats = track


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """Per-sample logits plus derived softmax, confidence, and entropy.

    ``logits`` may carry an autograd graph; the derived fields are detached
    and exist for scoring and switching decisions only.
    """

    logits: torch.Tensor
    probs: torch.Tensor
    confidence: torch.Tensor
    entropy: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "Prediction":
        probs = torch.softmax(logits.detach(), dim=1)
        return cls(
            logits=logits,
            probs=probs,
            confidence=probs.max(dim=1).values,
            entropy=entropy_from_probs(probs),
        )

    @classmethod
    def from_probs(cls, probs: torch.Tensor) -> "Prediction":
        logits = probs.clamp_min(1e-12).log()
        return cls(
            logits=logits,
            probs=probs,
            confidence=probs.max(dim=1).values,
            entropy=entropy_from_probs(probs),
        )

    def __len__(self) -> int:
        return self.logits.shape[0]


def entropy_from_probs(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * probs.clamp_min(1e-12).log()).sum(dim=1)


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Differentiable Shannon entropy of softmax(logits), in nats."""
    logp = torch.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(dim=1)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.shortcut: nn.Module | None = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False),
                nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + s)


class SmallResNet(nn.Module):
    """3-stage residual CNN for 32x32 inputs: stem + stages of 16/32/64
    channels, global average pooling, linear head."""

    ARCH = {"family": "small_resnet", "channels": (16, 32, 64), "blocks": (1, 1, 3)}

    def __init__(self, num_classes: int = NUM_CLASSES):
        super().__init__()
        channels = self.ARCH["channels"]
        blocks = self.ARCH["blocks"]
        self.stem = nn.Conv2d(3, channels[0], 3, 1, 1, bias=False)
        self.stem_bn = nn.BatchNorm2d(channels[0], eps=BN_EPS, momentum=BN_MOMENTUM)
        stages = []
        cin = channels[0]
        for stage_idx, (n_blocks, cout) in enumerate(zip(blocks, channels)):
            for block_idx in range(n_blocks):
                stride = 2 if (stage_idx > 0 and block_idx == 0) else 1
                stages.append(ResidualBlock(cin, cout, stride))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, num_classes)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.stem_bn(self.stem(x)))
        h = self.stages(h)
        h = h.mean(dim=(2, 3))
        return self.head(h)


class _DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ResidualUNet(nn.Module):
    """2-down/2-up U-Net (16/32 channels) predicting a residual; the output
    is ``clamp(x + residual, 0, 1)``."""

    ARCH = {"family": "residual_unet", "channels": (16, 32)}

    def __init__(self):
        super().__init__()
        c1, c2 = self.ARCH["channels"]
        self.enc1 = _DoubleConv(3, c1)
        self.enc2 = _DoubleConv(c1, c2)
        self.mid = _DoubleConv(c2, c2)
        self.dec2 = _DoubleConv(c2 + c2, c2)
        self.dec1 = _DoubleConv(c2 + c1, c1)
        self.out = nn.Conv2d(c1, 3, 3, 1, 1)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2.0, mode="nearest"), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0, mode="nearest"), e1], dim=1))
        return self.out(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x + self.residual(x)).clamp(0.0, 1.0)


def build_classifier(seed: int) -> SmallResNet:
    torch.manual_seed(seed)
    return SmallResNet().eval()


def build_enhancer(seed: int) -> ResidualUNet:
    torch.manual_seed(seed)
    return ResidualUNet().eval()


# ---------------------------------------------------------------------------
# Bundle and parameter groups
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Classifier + enhancer treated as one combined model.

    Parameter names are exposed with ``classifier.`` / ``enhancer.``
    prefixes; the combined parameter vector is their concatenation.
    """

    classifier: nn.Module
    enhancer: nn.Module
    num_classes: int = NUM_CLASSES

    @classmethod
    def create(cls, seed: int) -> "ModelBundle":
        from .seeding import component_seed

        return cls(
            classifier=build_classifier(component_seed(seed, "classifier-init")),
            enhancer=build_enhancer(component_seed(seed, "enhancer-init")),
        )

    @property
    def arch(self) -> dict:
        return {
            "classifier": dict(type(self.classifier).ARCH),
            "enhancer": dict(type(self.enhancer).ARCH),
            "num_classes": self.num_classes,
        }

    def named_parameters(self):
        for name, p in self.classifier.named_parameters():
            yield f"classifier.{name}", p
        for name, p in self.enhancer.named_parameters():
            yield f"enhancer.{name}", p

    def named_buffers(self):
        for name, b in self.classifier.named_buffers():
            yield f"classifier.{name}", b
        for name, b in self.enhancer.named_buffers():
            yield f"enhancer.{name}", b

    def param_group(self, name: str) -> list[tuple[str, nn.Parameter]]:
        if name not in PARAM_GROUP_NAMES:
            raise ValidationError(f"unknown parameter group: {name!r}")
        model_name, model = (
            ("classifier", self.classifier)
            if name.startswith("classifier")
            else ("enhancer", self.enhancer)
        )
        if name.endswith("_all"):
            return [(f"{model_name}.{n}", p) for n, p in model.named_parameters()]
        pairs = []
        for mod_name, mod in model.named_modules():
            if isinstance(mod, nn.BatchNorm2d):
                for p_name, p in mod.named_parameters(recurse=False):
                    pairs.append((f"{model_name}.{mod_name}.{p_name}", p))
        return pairs

    def clone(self) -> "ModelBundle":
        return ModelBundle(
            classifier=copy.deepcopy(self.classifier),
            enhancer=copy.deepcopy(self.enhancer),
            num_classes=self.num_classes,
        )


def compute_gradients(bundle: ModelBundle, loss_value_fn, groups: list[str]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for exactly the selected parameter groups.

    ``loss_value_fn`` is a zero-argument callable returning a scalar tensor
    connected to the bundle's parameters. Parameters outside the groups are
    not touched (their ``.grad`` stays as-is). Parameters in the groups that
    do not influence the loss get zero gradients.
    """
    if not groups:
        raise ContractError("gradient computation needs at least one parameter group")
    named: dict[str, nn.Parameter] = {}
    for g in groups:
        for name, p in bundle.param_group(g):
            named.setdefault(name, p)
    names = list(named)
    params = [named[n] for n in names]
    loss = loss_value_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    }


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def validate_image_batch(x: torch.Tensor) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != IMAGE_SHAPE:
        raise InputShapeError(
            f"expected batch of shape (n, {', '.join(map(str, IMAGE_SHAPE))}), got {tuple(x.shape)}"
        )
    if x.shape[0] < 1:
        raise InputShapeError("batch must contain at least one sample")
    if not torch.isfinite(x).all():
        raise ValidationError("image batch contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValidationError("image batch values must lie in [0, 1]")


def _find_nonfinite_layer(module: nn.Module, x: torch.Tensor) -> str:
    bad: list[str] = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            if isinstance(out, torch.Tensor) and not torch.isfinite(out).all() and not bad:
                bad.append(name)

        return hook

    handles = [m.register_forward_hook(make_hook(n)) for n, m in module.named_modules() if n]
    try:
        with torch.no_grad():
            module(x)
    finally:
        for h in handles:
            h.remove()
    return bad[0] if bad else "<unknown layer>"


def checked_output(module: nn.Module, out: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NumericalError(f"non-finite activation in layer {_find_nonfinite_layer(module, x)!r}")
    return out


def forward_classifier(bundle: ModelBundle, x: torch.Tensor, mode: BNMode = RUNNING_FROZEN) -> Prediction:
    """Classifier forward pass under an explicit BN mode."""
    validate_image_batch(x)
    with bn_mode(bundle.classifier, mode):
        logits = bundle.classifier(x)
    return Prediction.from_logits(checked_output(bundle.classifier, logits, x))


def forward_enhancer(bundle: ModelBundle, x: torch.Tensor, mode: BNMode = RUNNING_FROZEN) -> torch.Tensor:
    """Enhancer forward pass; output is clamped to [0, 1] and shaped like x."""
    validate_image_batch(x)
    with bn_mode(bundle.enhancer, mode):
        out = bundle.enhancer(x)
    return checked_output(bundle.enhancer, out, x)


def uniform_entropy(num_classes: int = NUM_CLASSES) -> float:
    return math.log(num_classes)
