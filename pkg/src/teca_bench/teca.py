"""Combined enhancer+classifier adaptation layer.

Three cooperating pieces wrap any baseline method:

- per-sample logit switching: each sample keeps whichever branch (raw or
  enhanced) predicts with higher max-softmax confidence, ties falling to
  the raw branch; logits are switched (not probabilities) so the loss
  differentiates through the chosen branch only;
- gradient-speed synchronization: enhancer gradients are rescaled by
  n/n_enh because the enhancer only receives signal from samples that took
  the enhanced branch; with no such samples the enhancer update is skipped
  outright;
- frozen enhancer normalization statistics: enhancer BN layers keep their
  source running statistics at test time (disabled by contract when the
  wrapped method is batch-stats adaptation itself).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .errors import ContractError
from .models import (
    RUNNING_FROZEN,
    BNMode,
    ModelBundle,
    Prediction,
    bn_mode,
    checked_output,
    validate_image_batch,
)


@dataclass
class SwitchDecision:
    """Per-sample branch selection plus the counts feeding the gradient
    rescale."""

    mask: torch.Tensor  # bool, true = enhanced branch
    n: int
    n_enh: int
    conf_cls: torch.Tensor
    conf_enh: torch.Tensor

    @property
    def switch_ratio(self) -> float:
        return self.n_enh / self.n if self.n else 0.0


def logit_switch(pred_cls: Prediction, pred_enh: Prediction) -> tuple[Prediction, SwitchDecision]:
    """Row-wise selection of the higher-confidence branch (strict >)."""
    if pred_cls.logits.shape != pred_enh.logits.shape:
        raise ContractError(
            f"branch shape mismatch: {tuple(pred_cls.logits.shape)} vs {tuple(pred_enh.logits.shape)}"
        )
    mask = pred_enh.confidence > pred_cls.confidence
    logits = torch.where(mask.unsqueeze(1), pred_enh.logits, pred_cls.logits)
    decision = SwitchDecision(
        mask=mask,
        n=int(mask.shape[0]),
        n_enh=int(mask.sum()),
        conf_cls=pred_cls.confidence,
        conf_enh=pred_enh.confidence,
    )
    return Prediction.from_logits(logits), decision


def spus_factor(n: int, n_enh: int) -> float | None:
    """Rescale factor n/n_enh; ``None`` signals "skip the enhancer update"."""
    if n < 1 or n_enh < 0:
        raise ContractError(f"invalid counts n={n}, n_enh={n_enh}")
    if n_enh == 0:
        return None
    return n / n_enh


def spus_rescale(
    grads: dict[str, torch.Tensor], n: int, n_enh: int
) -> tuple[dict[str, torch.Tensor], bool]:
    """Rescaled copy of an enhancer gradient map plus a skipped flag."""
    factor = spus_factor(n, n_enh)
    if factor is None:
        return grads, True
    return {k: g * factor for k, g in grads.items()}, False


@contextmanager
def fbns_guard(bundle: ModelBundle, enabled: bool):
    """While active and enabled, enhancer BN layers run on frozen running
    statistics; classifier BN layers are unaffected. Not reentrant."""
    if getattr(bundle.enhancer, "_fbns_guard_active", False):
        raise ContractError("frozen-statistics guard is already active")
    bundle.enhancer._fbns_guard_active = True
    try:
        if enabled:
            with bn_mode(bundle.enhancer, RUNNING_FROZEN):
                yield
        else:
            yield
    finally:
        bundle.enhancer._fbns_guard_active = False


class CombinedModel:
    """The enhancer+classifier pair exposed to methods as one model.

    ``forward`` runs the enhancer, predicts on both the raw and enhanced
    images under the classifier's BN mode, and returns the switched
    prediction together with the decision. With switching disabled the
    enhanced branch is always taken (pure enhanced pipeline), reported as
    n_enh = n.
    """

    def __init__(
        self,
        bundle: ModelBundle,
        *,
        ls_enabled: bool = True,
        spus_enabled: bool = True,
        fbns_enabled: bool = True,
        cls_bn: BNMode = RUNNING_FROZEN,
        enh_bn: BNMode = RUNNING_FROZEN,
    ):
        self.bundle = bundle
        self.ls_enabled = ls_enabled
        self.spus_enabled = spus_enabled
        self.fbns_enabled = fbns_enabled
        self.cls_bn = cls_bn
        self.enh_bn = enh_bn
        self.last_switch: SwitchDecision | None = None

    def _enhance(self, x: torch.Tensor) -> torch.Tensor:
        if self.fbns_enabled:
            with fbns_guard(self.bundle, True):
                out = self.bundle.enhancer(x)
        else:
            with bn_mode(self.bundle.enhancer, self.enh_bn):
                out = self.bundle.enhancer(x)
        return checked_output(self.bundle.enhancer, out, x)

    def _classify(self, x: torch.Tensor) -> Prediction:
        with bn_mode(self.bundle.classifier, self.cls_bn):
            logits = self.bundle.classifier(x)
        return Prediction.from_logits(checked_output(self.bundle.classifier, logits, x))

    def forward(self, x: torch.Tensor) -> tuple[Prediction, SwitchDecision]:
        validate_image_batch(x)
        enhanced = self._enhance(x)
        pred_enh = self._classify(enhanced)
        if self.ls_enabled:
            pred_cls = self._classify(x)
            switched, decision = logit_switch(pred_cls, pred_enh)
        else:
            n = int(x.shape[0])
            switched = pred_enh
            decision = SwitchDecision(
                mask=torch.ones(n, dtype=torch.bool),
                n=n,
                n_enh=n,
                conf_cls=pred_enh.confidence,
                conf_enh=pred_enh.confidence,
            )
        self.last_switch = decision
        return switched, decision

    def rescale_enhancer_grads(self) -> bool:
        """Apply the n/n_enh rescale to current enhancer gradients.

        Returns False when the enhancer step must be skipped (no sample took
        the enhanced branch, so there is no learning signal for it). The
        skip applies whether or not rescaling is enabled.
        """
        decision = self.last_switch
        if decision is None:
            return True
        factor = spus_factor(decision.n, decision.n_enh)
        if factor is None:
            return False
        if self.spus_enabled and factor != 1.0:
            with torch.no_grad():
                for p in self.bundle.enhancer.parameters():
                    if p.grad is not None:
                        p.grad.mul_(factor)
        return True

    def all_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.bundle.classifier.parameters()) + list(self.bundle.enhancer.parameters())

    def clone(self) -> "CombinedModel":
        return CombinedModel(
            self.bundle.clone(),
            ls_enabled=self.ls_enabled,
            spus_enabled=self.spus_enabled,
            fbns_enabled=self.fbns_enabled,
            cls_bn=self.cls_bn,
            enh_bn=self.enh_bn,
        )
