"""Class-balanced cross-entropy on (possibly soft) edge targets.

The per-map loss weighs the positive and negative log-likelihood sums by the
soft-masked positive/negative pixel fractions; a per-network total applies it
to the fused prediction and to the sigmoid of every side logit map.

Two weighting conventions are provided. The default ties the positive term's
weight to the positive fraction (and symmetrically for negatives); the "hed"
alternative swaps the fractions so that the rare class gets the large weight,
as is common in boundary-detection losses. They differ materially on
imbalanced maps, so the choice is exposed all the way up to the CLI.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

ALPHA_CONVENTIONS = ("paper", "hed")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.1            # positive/negative balance factor
    log_clamp: float = 1e-6     # clamp on E and 1-E before the logs
    alpha_convention: str = "paper"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not 0 < self.log_clamp < 0.5:
            raise ValueError("log_clamp must be a small positive value")
        if self.alpha_convention not in ALPHA_CONVENTIONS:
            raise ValueError(
                f"alpha_convention must be one of {ALPHA_CONVENTIONS}"
            )


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=like.dtype, device=like.device)
    if t.shape != like.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(like.shape)}")
    return t


def balanced_bce(e, y_soft, y_hard, cfg: LossConfig) -> torch.Tensor:
    """Weighted negative log-likelihood of a probability map against a soft target.

    Weights derive from soft-masked pixel counts:
    pos = sum(y_hard * y_soft), neg = sum((1 - y_hard) * (1 - y_soft)).
    Degenerate maps with pos + neg == 0 yield a defined zero loss.
    """
    e = torch.as_tensor(e)
    y_soft = _as_tensor(y_soft, e)
    y_hard = _as_tensor(y_hard, e)

    pos = (y_hard * y_soft).sum()
    neg = ((1.0 - y_hard) * (1.0 - y_soft)).sum()
    total = pos + neg
    if float(total) == 0.0:
        warnings.warn(
            "balanced_bce: degenerate target (no positive or negative mass); "
            "returning zero loss",
            stacklevel=2,
        )
        return e.sum() * 0.0

    if cfg.alpha_convention == "paper":
        alpha = cfg.lam * pos / total
        beta = neg / total
    else:  # "hed": weight each class by the opposite class' share
        alpha = cfg.lam * neg / total
        beta = pos / total

    e_safe = e.clamp(cfg.log_clamp, 1.0 - cfg.log_clamp)
    pos_term = (y_soft * torch.log(e_safe)).sum()
    neg_term = ((1.0 - y_soft) * torch.log(1.0 - e_safe)).sum()
    return -alpha * pos_term - beta * neg_term


def _total_loss(outputs, y_soft, y_hard, cfg: LossConfig) -> torch.Tensor:
    total = balanced_bce(outputs.fused, y_soft, y_hard, cfg)
    for logit in list(outputs.f2c) + list(outputs.c2f):
        total = total + balanced_bce(torch.sigmoid(logit), y_soft, y_hard, cfg)
    return total


def total_loss_recurrent(outputs, y_soft, y_hard, cfg: LossConfig) -> torch.Tensor:
    """Fused term plus one term per side logit map: 2T + 1 terms."""
    return _total_loss(outputs, y_soft, y_hard, cfg)


def total_loss_nonrecurrent(outputs, y_soft, y_hard, cfg: LossConfig) -> torch.Tensor:
    """Fused term plus one term per side logit map: 9 terms for 4 stages."""
    return _total_loss(outputs, y_soft, y_hard, cfg)
