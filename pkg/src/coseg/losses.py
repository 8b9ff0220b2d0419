"""Combined dice loss over the co-segmentation targets.

The loss is the negated sum of per-target soft dice scores:

    L = - sum_t (2 * sum(p_t * g_t) + eps) / (sum(p_t) + sum(g_t) + eps)

the soft relaxation of the hard overlap metric (elementwise products
replace set intersection, sums replace cardinalities).  Perfect
predictions on two targets give L = -2.  The stabilizer ``eps`` keeps
the empty/empty case finite and equal to -1 per target.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def soft_dice(pred: torch.Tensor, target: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Soft dice score of one prediction/ground-truth pair, in (0, 1]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    intersection = (pred * target).sum()
    return (2.0 * intersection + epsilon) / (pred.sum() + target.sum() + epsilon)


def dice_loss(preds, masks, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Negated sum of soft dice scores, one term per target.

    ``preds`` and ``masks`` map the same target keys to tensors of
    identical shape; predictions are probabilities in [0, 1].  The
    result is differentiable in ``preds`` and invariant to the target
    ordering.
    """
    if set(preds.keys()) != set(masks.keys()):
        raise ValueError(
            f"targets mismatch: preds {sorted(map(str, preds))} vs masks {sorted(map(str, masks))}"
        )
    if not preds:
        raise ValueError("no targets to score")
    total = None
    for key in sorted(preds, key=str):
        term = soft_dice(preds[key], masks[key], cfg.epsilon)
        total = term if total is None else total + term
    return -total
