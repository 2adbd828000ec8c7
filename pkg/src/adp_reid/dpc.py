"""Dual-path constraint losses.

Holistic path: plain softmax ID loss and batch-hard triplet loss.
Occluded path: additive angular margin ID loss and batch-hard triplet loss.
Cross-path: a global triplet over both paths and an interaction loss that
scores occluded features against a detached copy of the holistic classifier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class HolisticHead(nn.Module):
    """Unnormalized linear classifier ``W_h`` (C x d)."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        nn.init.normal_(self.weight, std=0.001)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight.t()


class AngularHead(nn.Module):
    """Classifier ``W_o`` whose rows are L2-normalized at use."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        nn.init.xavier_normal_(self.weight)


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")


def id_loss_holistic(features: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    _check_labels(labels, weight.shape[0])
    return F.cross_entropy(features @ weight.t(), labels)


def pairwise_sq_dist(x: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(dim=-1)


def _check_triplet_labels(labels: torch.Tensor) -> None:
    _, counts = torch.unique(labels, return_counts=True)
    if counts.numel() < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    if counts.min() < 2:
        raise ValueError("triplet loss needs every identity at least twice in the batch")


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on squared Euclidean distances."""
    _check_triplet_labels(labels)
    dist = pairwise_sq_dist(features)
    same = labels[:, None] == labels[None, :]
    hardest_pos = dist.masked_fill(~same, float("-inf")).amax(dim=1)
    hardest_neg = dist.masked_fill(same, float("inf")).amin(dim=1)
    return F.relu(margin + hardest_pos - hardest_neg).mean()


def global_triplet(h_features: torch.Tensor, o_features: torch.Tensor, labels: torch.Tensor,
                   margin: float = 0.3, o_labels: torch.Tensor | None = None) -> torch.Tensor:
    """Batch-hard triplet over the concatenated holistic and occluded batches."""
    if o_labels is not None and not torch.equal(labels, o_labels):
        raise ValueError("holistic and occluded batches must share labels elementwise")
    if h_features.shape != o_features.shape or h_features.shape[0] != labels.shape[0]:
        raise ValueError("paired feature batches must have matching shapes")
    return triplet_loss(torch.cat([h_features, o_features]), torch.cat([labels, labels]), margin)


def angular_logits(features: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor,
                   margin: float = 0.3, scale: float = 30.0) -> torch.Tensor:
    """``s * cos(theta_y + m)`` for the true class, ``s * cos(theta_j)`` elsewhere."""
    if not 0.0 <= margin < math.pi / 2:
        raise ValueError(f"angular margin must lie in [0, pi/2), got {margin}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if (features.norm(dim=1) == 0).any():
        raise ValueError("zero-norm feature cannot be angularly normalized")
    if (weight.norm(dim=1) == 0).any():
        raise ValueError("zero-norm classifier row cannot be angularly normalized")
    _check_labels(labels, weight.shape[0])
    cosine = (F.normalize(features, dim=1) @ F.normalize(weight, dim=1).t()).clamp(-1.0, 1.0)
    target = cosine.gather(1, labels[:, None])
    sine = torch.sqrt((1.0 - target * target).clamp(min=1e-12))
    # theta in [0, pi] so sin(theta) >= 0; cos(theta + m) expanded
    shifted = target * math.cos(margin) - sine * math.sin(margin)
    # past theta = pi - m, cos(theta + m) turns upward and rewards antipodal
    # features; continue linearly so the target logit stays monotone in theta
    shifted = torch.where(target > math.cos(math.pi - margin), shifted,
                          target - math.sin(math.pi - margin) * margin)
    logits = cosine.scatter(1, labels[:, None], shifted)
    return scale * logits


def id_loss_occluded(features: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor,
                     margin: float = 0.3, scale: float = 30.0) -> torch.Tensor:
    return F.cross_entropy(angular_logits(features, labels, weight, margin, scale), labels)


def interaction_loss(occ_features: torch.Tensor, labels: torch.Tensor, cloned_weight: torch.Tensor) -> torch.Tensor:
    """Occluded features against holistic prototypes; never updates ``W_h``."""
    if occ_features.shape[1] != cloned_weight.shape[1]:
        raise ValueError(
            f"feature dim {occ_features.shape[1]} != classifier dim {cloned_weight.shape[1]}"
        )
    if occ_features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree on batch size")
    return id_loss_holistic(occ_features, labels, cloned_weight.detach())


LOSS_FIELDS = ("id_h", "tri_h", "id_o", "tri_o", "tri_global", "itr")


@dataclass
class LossBundle:
    id_h: torch.Tensor
    tri_h: torch.Tensor
    id_o: torch.Tensor
    tri_o: torch.Tensor
    tri_global: torch.Tensor
    itr: torch.Tensor
    total: torch.Tensor
    itr_weight: float

    def as_floats(self) -> dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in (*LOSS_FIELDS, "total")}
        out["itr_weight"] = self.itr_weight
        return out


def total_loss(id_h, tri_h, id_o, tri_o, tri_global, itr, itr_weight: float = 0.1) -> LossBundle:
    parts = dict(id_h=id_h, tri_h=tri_h, id_o=id_o, tri_o=tri_o, tri_global=tri_global, itr=itr)
    parts = {k: torch.as_tensor(v, dtype=torch.get_default_dtype()) if not torch.is_tensor(v) else v
             for k, v in parts.items()}
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss component {name}: {float(value)}")
    total = (parts["id_h"] + parts["tri_h"]) + (parts["id_o"] + parts["tri_o"]) + parts["tri_global"] \
        + itr_weight * parts["itr"]
    return LossBundle(**parts, total=total, itr_weight=itr_weight)
