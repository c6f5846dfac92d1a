"""Training objectives.

All norms are unreduced sums of squares (no element averaging), so the
default trade-off weights keep their intended relative scaling; per-batch
values are summed over the batch and divided by the batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .generator import masked_mean_std


@dataclass
class LossWeights:
    lambda_c: float = 2.0
    lambda_adv: float = 10.0

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar loss values for one training step; adversarial entries are
    None when no discriminator is in play."""

    style: float
    content: float
    g_adv: float | None
    d_adv: float | None
    total_g: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "style": self.style,
                "content": self.content,
                "g_adv": self.g_adv,
                "d_adv": self.d_adv,
                "total_g": self.total_g,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        row = json.loads(line)
        return cls(
            style=row["style"],
            content=row["content"],
            g_adv=row["g_adv"],
            d_adv=row["d_adv"],
            total_g=row["total_g"],
        )


def style_loss_from_features(harm_feats, bg_feats, level_masks):
    """Statistics-matching loss on precomputed encoder pyramids."""
    if len(level_masks) != len(harm_feats):
        raise ValueError(
            f"expected {len(harm_feats)} level masks, got {len(level_masks)}"
        )
    total = None
    for hf, bf, mask in zip(harm_feats, bg_feats, level_masks):
        h_mean, h_std = masked_mean_std(hf, mask)
        b_mean, b_std = masked_mean_std(bf, torch.ones_like(mask))
        term = ((h_mean - b_mean) ** 2).sum(dim=1) + ((h_std - b_std) ** 2).sum(dim=1)
        total = term if total is None else total + term
    return total.mean()


def style_loss(harmonized, background, level_masks, encoder):
    """Multi-scale statistics matching: for every encoder level, the
    squared distance between the masked-foreground mean/std of the
    harmonized image's features and the whole-image mean/std of the
    background's features.

    ``level_masks`` holds one binary mask per level at that level's
    resolution; an empty level mask falls back to (0, 1) statistics with a
    warning rather than failing.
    """
    return style_loss_from_features(encoder(harmonized), encoder(background), level_masks)


def content_loss_from_features(harm_bottleneck, comp_bottleneck):
    return ((harm_bottleneck - comp_bottleneck) ** 2).flatten(1).sum(dim=1).mean()


def content_loss(harmonized, composite, encoder):
    """Squared distance between bottleneck features of the harmonized image
    and of the original composite."""
    return content_loss_from_features(encoder(harmonized)[-1], encoder(composite)[-1])


def _check_grid(pred, target, name):
    if pred.shape != target.shape:
        raise ValueError(f"{name} {tuple(pred.shape)} does not match target {tuple(target.shape)}")


def d_loss(pred_harmonized, pred_composite, pred_background, target):
    """Least-squares discriminator objective: predictions on the harmonized
    image and the composite should match the patch-level mask, predictions
    on the background painting should be all zero. The harmonized input must
    already be detached from the generator when updating D."""
    _check_grid(pred_harmonized, target, "harmonized prediction")
    _check_grid(pred_composite, target, "composite prediction")
    _check_grid(pred_background, target, "background prediction")
    per_sample = (
        ((pred_harmonized - target) ** 2).flatten(1).sum(dim=1)
        + ((pred_composite - target) ** 2).flatten(1).sum(dim=1)
        + (pred_background**2).flatten(1).sum(dim=1)
    )
    return per_sample.mean()


def g_adv_loss(pred_harmonized):
    """The generator wants the discriminator to see no inharmonious patches,
    i.e. to predict all zeros on the harmonized image."""
    return (pred_harmonized**2).flatten(1).sum(dim=1).mean()


def total_g_loss(style, content, g_adv, weights: LossWeights):
    return style + weights.lambda_c * content + weights.lambda_adv * g_adv
