"""Composite training objective: ID cross-entropy, batch-hard triplet, and
weighted multi-label damage BCE, combined with per-term breakdown logging."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class BatchContractError(ValueError):
    """Raised when a batch cannot support the requested loss term."""


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lambda_bd: float = 0.25
    mu_bk: float = 0.25
    nu_parts: float = 0.5
    k_groups: int = 4
    n_parts: int = 5
    triplet_margin: float = 0.3

    def validate(self):
        for name in ("alpha", "beta", "gamma", "lambda_bd", "mu_bk", "nu_parts",
                     "triplet_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def id_cross_entropy(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch; each ID is its own class."""
    if ids.min().item() < 0 or ids.max().item() >= logits.shape[1]:
        raise BatchContractError("id label outside [0, num_ids)")
    return F.cross_entropy(logits, ids)


def triplet_batch_hard(features: torch.Tensor, ids: torch.Tensor,
                       margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances.

    Per anchor: hardest positive = max distance among same-ID samples
    (self excluded), hardest negative = min distance among different-ID
    samples; hinge averaged over anchors that have a positive.
    """
    same = ids.unsqueeze(0) == ids.unsqueeze(1)
    eye = torch.eye(len(ids), dtype=torch.bool, device=ids.device)
    pos_mask = same & ~eye
    has_pos = pos_mask.any(dim=1)
    if not has_pos.any():
        raise BatchContractError("batch needs an ID with >= 2 samples")
    if same.all():
        raise BatchContractError("batch needs >= 2 distinct IDs")
    dist = torch.cdist(features, features)
    d_pos = dist.masked_fill(~pos_mask, float("-inf")).amax(dim=1)
    d_neg = dist.masked_fill(same, float("inf")).amin(dim=1)
    return F.relu(d_pos - d_neg + margin)[has_pos].mean()


def damage_loss(damage_logits: torch.Tensor, label_vectors: torch.Tensor,
                weights: LossWeights, domain: str) -> torch.Tensor:
    """Weighted multi-label BCE over (bent, broken, 5 parts) logits.

    Real images carry no reliable part annotations from the synthetic
    taxonomy's viewpoint, so only the bent/broken terms are included.
    """
    if damage_logits.shape[1] != 7:
        raise BatchContractError("damage logits must have 7 entries")
    bce = F.binary_cross_entropy_with_logits(
        damage_logits, label_vectors, reduction="none").mean(dim=0)
    loss = weights.lambda_bd * bce[0] + weights.mu_bk * bce[1]
    if domain == "synthetic":
        loss = loss + weights.nu_parts * bce[2:].mean()
    return loss


def total_loss(outputs: dict, ids: torch.Tensor, label_vectors: torch.Tensor,
               weights: LossWeights, domain: str):
    """Combined objective with per-term breakdown.

    synthetic: alpha*L_ID(f_g) + beta*L_T(f_g) + gamma*L_D
               + (1/k) * sum_j (L_ID(f_l^j) + L_T(f_l^j))
    real:      gamma*L_D (bent/broken terms only)
    """
    weights.validate()
    breakdown: dict[str, float] = {}
    device = label_vectors.device
    zero = torch.zeros((), device=device)

    if domain == "real":
        l_d = damage_loss(outputs["damage_logits"], label_vectors, weights, domain)
        breakdown["id_global"] = 0.0
        breakdown["triplet_global"] = 0.0
        breakdown["id_local"] = 0.0
        breakdown["triplet_local"] = 0.0
        breakdown["damage"] = float(l_d.detach())
        total = weights.gamma * l_d
        breakdown["total"] = float(total.detach())
        return total, breakdown

    total = zero
    if "id_logits_global" in outputs:
        try:
            l_id = id_cross_entropy(outputs["id_logits_global"], ids)
            l_tri = triplet_batch_hard(outputs["f_g"], ids, weights.triplet_margin)
        except BatchContractError as e:
            raise BatchContractError(f"global ReID term: {e}") from e
        breakdown["id_global"] = float(l_id.detach())
        breakdown["triplet_global"] = float(l_tri.detach())
        total = total + weights.alpha * l_id + weights.beta * l_tri

    if "id_logits_local" in outputs:
        k = len(outputs["id_logits_local"])
        l_id_loc = zero
        l_tri_loc = zero
        for logits_j, f_j in zip(outputs["id_logits_local"], outputs["f_l"]):
            try:
                l_id_loc = l_id_loc + id_cross_entropy(logits_j, ids)
                l_tri_loc = l_tri_loc + triplet_batch_hard(f_j, ids, weights.triplet_margin)
            except BatchContractError as e:
                raise BatchContractError(f"jigsaw ReID term: {e}") from e
        l_id_loc = l_id_loc / k
        l_tri_loc = l_tri_loc / k
        breakdown["id_local"] = float(l_id_loc.detach())
        breakdown["triplet_local"] = float(l_tri_loc.detach())
        total = total + l_id_loc + l_tri_loc

    if "damage_logits" in outputs:
        l_d = damage_loss(outputs["damage_logits"], label_vectors, weights, domain)
        breakdown["damage"] = float(l_d.detach())
        total = total + weights.gamma * l_d

    breakdown["total"] = float(total.detach())
    return total, breakdown
