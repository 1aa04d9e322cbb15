"""Prototype alignment regularisation and total-loss assembly."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from .protoseg import DEFAULT_ALPHA, apply_texture_attention, cosine_distance, foreground_prototype, masked_average


@dataclass
class LossBreakdown:
    l_seg: torch.Tensor
    l_par: torch.Tensor
    lambda_par: float
    total: torch.Tensor

    def as_record(self) -> dict:
        return {
            "l_seg": float(self.l_seg.detach()),
            "l_par": float(self.l_par.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(l_seg, l_par, lambda_par: float = 1.0) -> LossBreakdown:
    if lambda_par < 0:
        raise ValueError("lambda_par must be nonnegative")
    l_seg = torch.as_tensor(l_seg)
    l_par = torch.as_tensor(l_par)
    return LossBreakdown(l_seg, l_par, lambda_par, l_seg + lambda_par * l_par)


def query_prototypes(
    features: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    attention: torch.Tensor | None = None,
    textured_class: int = 1,
) -> dict[int, torch.Tensor]:
    """Masked-average prototypes per class present in ``labels``.

    With ``attention`` given, ``textured_class`` is pooled with attention
    weights like the support foreground prototype.
    """
    protos = {}
    for c in range(n_classes):
        m = labels == c
        if not m.any():
            continue
        if attention is not None and c == textured_class:
            protos[c] = foreground_prototype([(features, apply_texture_attention(attention, m), m)])
        else:
            protos[c] = masked_average(features, m, m)
    return protos


def par_loss(
    query_features: torch.Tensor,
    query_labels: torch.Tensor,
    supports: Sequence[tuple[torch.Tensor, torch.Tensor]],
    n_classes: int,
    alpha: float = DEFAULT_ALPHA,
    query_attention: torch.Tensor | None = None,
    diagnostics: Counter | None = None,
) -> torch.Tensor:
    """Segment each support from prototypes of the predicted query mask.

    ``supports`` holds ``(features, gt_mask)`` pairs. Classes missing from
    the hard query prediction are dropped from the reverse pass, together
    with the support pixels annotated with them. Returns the mean over
    supports of the per-pixel cross-entropy.
    """
    labels = query_labels.detach()
    protos = query_prototypes(query_features, labels, n_classes, query_attention)
    if diagnostics is not None:
        diagnostics["par_skipped_class"] += n_classes - len(protos)
    zero = query_features.sum() * 0.0
    if len(protos) < 2:
        return zero
    classes = sorted(protos)
    stacked = torch.stack([protos[c] for c in classes])
    remap = torch.full((n_classes,), -1, dtype=torch.long)
    remap[torch.tensor(classes)] = torch.arange(len(classes))
    losses = []
    for feats, gt in supports:
        target = remap[gt.long()]
        keep = target >= 0
        if not keep.any():
            continue
        logits = -alpha * cosine_distance(feats, stacked, diagnostics)
        log_probs = torch.log_softmax(logits, dim=0)
        picked = log_probs.gather(0, target.clamp_min(0)[None])[0]
        losses.append(-picked[keep].mean())
    if not losses:
        return zero
    return torch.stack(losses).mean()
