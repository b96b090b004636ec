"""Domain-adaptation add-ons: gradient-reversal adversarial alignment and
partial domain adaptation via an auxiliary bike-model classifier."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DAConfig:
    mode: str = "off"  # off | dann | pada
    theta: float = 1.0  # domain discriminator loss weight
    delta: float = 1.0  # model-classification loss weight (pada only)
    iota: float = 1.0  # gradient reversal scale
    attach_point: str = "damage_branch_cls"  # or backbone_cls

    def __post_init__(self):
        if self.mode not in ("off", "dann", "pada"):
            raise ValueError(f"unknown DA mode {self.mode}")
        if self.attach_point not in ("backbone_cls", "damage_branch_cls"):
            raise ValueError(f"unknown attach point {self.attach_point}")
        if min(self.theta, self.delta, self.iota) < 0:
            raise ValueError("theta, delta, iota must be >= 0")
        if self.mode != "pada":
            self.delta = 0.0


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, iota):
        ctx.iota = iota
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.iota * grad, None


def gradient_reversal(features: torch.Tensor, iota: float) -> torch.Tensor:
    """Identity forward; backward multiplies incoming gradients by -iota."""
    if iota < 0:
        raise ValueError("iota must be >= 0")
    return _GradReverse.apply(features, iota)


class DomainDiscriminator(nn.Module):
    """Two-hidden-layer MLP emitting a single domain logit
    (synthetic -> 0, real -> 1)."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(),
            nn.Linear(dim, dim), nn.ReLU(),
            nn.Linear(dim, 1),
        )

    def forward(self, features):
        return self.net(features).squeeze(-1)


class ModelClassifier(nn.Module):
    """Linear head predicting the bike model of synthetic samples."""

    def __init__(self, dim: int, num_models: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_models)

    def forward(self, features):
        return self.fc(features)


def domain_loss(logits: torch.Tensor, domain_labels: torch.Tensor,
                sample_weights: torch.Tensor | None = None) -> torch.Tensor:
    """BCE on domain logits; optional per-sample PADA weights."""
    per = F.binary_cross_entropy_with_logits(logits, domain_labels,
                                             reduction="none")
    if sample_weights is not None:
        return (per * sample_weights).sum() / sample_weights.sum().clamp_min(1e-12)
    return per.mean()


def model_classification_loss(logits: torch.Tensor, model_ids: torch.Tensor,
                              domains: list[str],
                              sample_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy on synthetic samples only; real samples have no model label."""
    if any(d == "real" for d in domains):
        raise ValueError("model classification supervised on synthetic samples only")
    per = F.cross_entropy(logits, model_ids, reduction="none")
    if sample_weights is not None:
        return (per * sample_weights).sum() / sample_weights.sum().clamp_min(1e-12)
    return per.mean()


def pada_class_weights(target_model_predictions: torch.Tensor) -> torch.Tensor:
    """Per-model weights from averaged softmax predictions on target samples.

    Empty target set yields all-ones (neutral) weights; otherwise the mean
    prediction vector normalized so its max is exactly 1.
    """
    if target_model_predictions.shape[0] == 0:
        return torch.ones(target_model_predictions.shape[1])
    w = target_model_predictions.mean(dim=0)
    w = w / w.max().clamp_min(1e-12)
    return w.clamp(0.0, 1.0)


def neutral_weights(num_models: int) -> torch.Tensor:
    return torch.ones(num_models)


def da_total_loss(base_damage_loss: torch.Tensor, dmn_loss: torch.Tensor,
                  mdl_loss: torch.Tensor | None, cfg: DAConfig) -> torch.Tensor:
    """L_D + theta*L_dmn + delta*L_mdl; the adversarial push on the extractor
    comes from the gradient reversal layer, not from the scalar value."""
    if cfg.mode == "off":
        raise ValueError("da_total_loss requires mode != off")
    total = base_damage_loss + cfg.theta * dmn_loss
    if cfg.mode == "pada" and mdl_loss is not None:
        total = total + cfg.delta * mdl_loss
    return total
