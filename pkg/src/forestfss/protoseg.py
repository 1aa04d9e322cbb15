"""Texture-weighted prototypes and cosine-metric query segmentation.

Shapes: feature maps are ``D x H x W``, attention and masks ``H x W``.
Prototypes for an episode are stacked as ``(n_classes, D)`` with row 0 the
background.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

DEFAULT_ALPHA = 20.0
MAX_DISTANCE = 2.0


def _plane(x: torch.Tensor) -> torch.Tensor:
    return x[0] if x.dim() == 3 else x


def apply_texture_attention(attention: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the attention map outside the binary mask."""
    attention = _plane(attention)
    if attention.shape != mask.shape:
        raise ValueError(f"attention {tuple(attention.shape)} and mask {tuple(mask.shape)} differ")
    return attention * mask.to(attention.dtype)


def masked_average(features: torch.Tensor, weight: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``sum(weight * F) / sum(mask)`` over pixels, for one ``D x H x W`` map."""
    denom = mask.to(features.dtype).sum()
    if denom <= 0:
        raise ValueError("mask selects no pixels")
    return (features * weight.to(features.dtype)).sum(dim=(-2, -1)) / denom


def foreground_prototype(
    supports: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    normalize_by_attention: bool = False,
) -> torch.Tensor:
    """Average over supports of attention-weighted masked pooling.

    Each support is ``(features, weighted_attention, mask)``. The per-support
    denominator is the mask area, so low attention shrinks a pixel's share
    without renormalising; ``normalize_by_attention`` divides by the summed
    attention instead.
    """
    if not supports:
        raise ValueError("need at least one support")
    protos = []
    for feats, t_hat, mask in supports:
        if not mask.any():
            raise ValueError("support has an empty foreground mask")
        t_hat = _plane(t_hat)
        if normalize_by_attention:
            denom = t_hat.sum()
            if denom <= 0:
                raise ValueError("attention vanishes on the support foreground")
            protos.append((feats * t_hat).sum(dim=(-2, -1)) / denom)
        else:
            protos.append(masked_average(feats, t_hat, mask))
    return torch.stack(protos).mean(dim=0)


def background_prototype(supports: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Plain masked average pooling over the complement of each foreground mask."""
    if not supports:
        raise ValueError("need at least one support")
    protos = []
    for feats, mask in supports:
        comp = ~mask.bool()
        if not comp.any():
            raise ValueError("support has no background pixels")
        protos.append(masked_average(feats, comp, comp))
    return torch.stack(protos).mean(dim=0)


def cosine_distance(
    features: torch.Tensor, prototypes: torch.Tensor, diagnostics: Counter | None = None
) -> torch.Tensor:
    """``1 - cos`` between every pixel of ``D x H x W`` features and each prototype.

    Returns ``n x H x W`` in [0, 2]. A zero-norm vector on either side gets
    distance 2 and increments ``diagnostics['zero_norm']``.
    """
    d, h, w = features.shape
    flat = features.reshape(d, h * w)
    dots = prototypes @ flat
    norms = prototypes.norm(dim=1)[:, None] * flat.norm(dim=0)[None, :]
    valid = norms > 0
    if diagnostics is not None:
        diagnostics["zero_norm"] += int((~valid).sum())
    cos = dots / torch.where(valid, norms, torch.ones_like(norms))
    dist = torch.where(valid, 1.0 - cos, torch.full_like(cos, MAX_DISTANCE))
    return dist.clamp(0.0, MAX_DISTANCE).reshape(-1, h, w)


@dataclass
class PredictedMask:
    labels: torch.Tensor  # H x W, long
    probabilities: torch.Tensor  # n x H x W
    log_probs: torch.Tensor  # n x H x W
    distances: torch.Tensor  # n x H x W


def predict_mask(
    features: torch.Tensor,
    prototypes: torch.Tensor | Sequence[torch.Tensor],
    alpha: float = DEFAULT_ALPHA,
    diagnostics: Counter | None = None,
) -> PredictedMask:
    """Softmax over ``-alpha * distance``; labels are the argmax, ties to the lowest index."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not torch.is_tensor(prototypes):
        prototypes = torch.stack(list(prototypes))
    if prototypes.shape[0] < 2:
        raise ValueError("need at least two prototypes")
    dist = cosine_distance(features, prototypes, diagnostics)
    logits = -alpha * dist
    log_probs = torch.log_softmax(logits, dim=0)
    # torch.argmax returns the first maximal index
    labels = torch.argmax(dist.neg(), dim=0)
    return PredictedMask(labels, log_probs.exp(), log_probs, dist)


def segmentation_loss(pred: PredictedMask | torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy of the true class.

    ``pred`` is a PredictedMask or an ``n x H x W`` probability tensor.
    """
    log_probs = pred.log_probs if isinstance(pred, PredictedMask) else torch.log(pred)
    if log_probs.shape[1:] != gt.shape:
        raise ValueError(f"prediction {tuple(log_probs.shape[1:])} and target {tuple(gt.shape)} differ")
    gt = gt.long()
    if gt.numel() and int(gt.max()) >= log_probs.shape[0]:
        raise ValueError(f"target class {int(gt.max())} has no prototype")
    picked = log_probs.gather(0, gt[None])[0]
    return -picked.mean()
