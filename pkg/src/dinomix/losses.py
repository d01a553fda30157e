"""Segmentation, auxiliary balancing and composite losses."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    sup_aux: float
    unsup: float
    unsup_aux: float
    distill: float
    total: float

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


def seg_loss(logits: torch.Tensor, target: torch.Tensor, keep_mask: Optional[torch.Tensor] = None):
    """``0.5 * soft Dice loss + 0.5 * cross-entropy`` over kept voxels.

    ``logits`` is ``(B, C, ...)`` and ``target`` ``(B, ...)`` of class ids.
    Dice is computed per class over the whole batch and averaged over classes.
    An empty ``keep_mask`` gives a zero loss.
    """
    if logits.dim() != target.dim() + 1 or logits.shape[2:] != target.shape[1:] or logits.shape[0] != target.shape[0]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    n_cls = logits.shape[1]
    if keep_mask is None:
        w = torch.ones_like(target, dtype=logits.dtype)
    else:
        if keep_mask.shape != target.shape:
            raise ValueError(f"keep_mask shape {tuple(keep_mask.shape)} vs target {tuple(target.shape)}")
        w = keep_mask.to(logits.dtype)
    n_kept = w.sum()
    if n_kept <= 0:
        return logits.sum() * 0.0

    log_p = F.log_softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_cls).movedim(-1, 1).to(logits.dtype)
    ce = -(log_p * onehot).sum(dim=1)
    ce = (ce * w).sum() / n_kept

    p = log_p.exp() * w.unsqueeze(1)
    t = onehot * w.unsqueeze(1)
    dims = [0] + list(range(2, logits.dim()))
    inter = (p * t).sum(dim=dims)
    denom = p.sum(dim=dims) + t.sum(dim=dims)
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 0.5 * (1 - dice.mean()) + 0.5 * ce


def aux_keep_mask(target: np.ndarray, ratios, rng: np.random.Generator) -> np.ndarray:
    """Keep each voxel of class ``c`` independently with probability ``ratios[c]``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    target = np.asarray(target)
    if target.size and int(target.max()) >= len(ratios):
        raise ValueError(f"no imbalance ratio for class {int(target.max())}")
    return rng.random(target.shape) < ratios[target]


def total_loss(sup, sup_aux, unsup, unsup_aux, distill, lambda_unsup: float):
    """``sup + sup_aux + distill + lambda_unsup * (unsup + unsup_aux)``.

    Works on floats and on tensors (keeping the autograd graph).
    """
    terms = dict(sup=sup, sup_aux=sup_aux, unsup=unsup, unsup_aux=unsup_aux, distill=distill)
    for name, v in terms.items():
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name!r}: {value}")
    return sup + sup_aux + distill + lambda_unsup * (unsup + unsup_aux)
