"""Bidirectional temporal synchronization over the sentences of a paragraph.

Each direction runs its own prediction head over the refined maps. A sentence's
features are damped wherever the sentences already processed in that direction
claimed probability mass; the damping factor is clamped to [0, 1].
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError
from .local import PredictionHead, map_mask
from .moments import soft_label_map

BCE_EPS = 1e-7


def _sync(maps: torch.Tensor, head: PredictionHead, order) -> torch.Tensor:
    m_total, k = maps.shape[0], maps.shape[1]
    out = [None] * m_total
    claimed = maps.new_zeros(k, k)
    for step, m in enumerate(order):
        x = maps[m]
        if step:
            x = x * (1.0 - claimed).clamp(0.0, 1.0)[..., None]
        out[m] = head(x)
        claimed = claimed + out[m]
    return torch.stack(out)


def forward_sync_maps(maps: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    """maps: M x K x K x d refined feature maps -> M x K x K score maps, first sentence first."""
    if maps.ndim != 4 or maps.shape[0] < 1:
        raise InvalidArgumentError("need M >= 1 feature maps of shape K x K x d")
    return _sync(maps, head, range(maps.shape[0]))


def reverse_sync_maps(maps: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    """Mirror of :func:`forward_sync_maps`, starting from the last sentence."""
    if maps.ndim != 4 or maps.shape[0] < 1:
        raise InvalidArgumentError("need M >= 1 feature maps of shape K x K x d")
    return _sync(maps, head, range(maps.shape[0] - 1, -1, -1))


def pseudo_label_from_map(scores, iou_min: float = 0.5, iou_max: float = 1.0) -> torch.Tensor:
    """Soft IoU label map centred on the best valid cell of ``scores`` (K x K)."""
    scores = torch.as_tensor(scores).detach()
    k = scores.shape[-1]
    masked = scores.masked_fill(~map_mask(k, scores.device), float("-inf"))
    flat = int(torch.argmax(masked))
    label = soft_label_map((flat // k, flat % k), k, iou_min, iou_max)
    return torch.as_tensor(label, dtype=scores.dtype)


def pseudo_labels(score_maps: torch.Tensor, iou_min: float = 0.5, iou_max: float = 1.0) -> torch.Tensor:
    return torch.stack([pseudo_label_from_map(p, iou_min, iou_max) for p in score_maps])


def bce_alignment_loss(scores: torch.Tensor, labels: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy summed over valid cells (and over a leading sentence axis, if any)."""
    if scores.shape != labels.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(scores.shape)} vs {tuple(labels.shape)}")
    k = scores.shape[-1]
    p = scores.clamp(eps, 1.0 - eps)
    labels = labels.to(p.dtype)
    bce = -(labels * p.log() + (1.0 - labels) * (1.0 - p).log())
    return (bce * map_mask(k, p.device)).sum()


def time_loss(forward_term, reverse_term):
    return forward_term + reverse_term


def sync_head_loss(sync_scores: torch.Tensor, main_scores: torch.Tensor) -> torch.Tensor:
    """Fits a direction head to the (detached) main score maps, averaged over valid cells."""
    k = sync_scores.shape[-1]
    mask = map_mask(k, sync_scores.device)
    target = main_scores.detach()
    bce = F.binary_cross_entropy(sync_scores.clamp(BCE_EPS, 1 - BCE_EPS), target, reduction="none")
    return (bce * mask).sum() / (mask.sum() * sync_scores.shape[0])
