"""Training objectives: adaptive Chamfer on the primitive, the weighted
reconstruction loss, the cross-reconstruction loss, and the alpha schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EMD_EXACT_LIMIT, adaptive_chamfer, chamfer, emd
from .tensor import Tensor, make_op

__all__ = [
    "LossWeights",
    "loss_acd",
    "loss_mse_pointwise",
    "loss_rec",
    "combine_rec",
    "loss_cross",
    "alpha_schedule",
]


@dataclass(frozen=True)
class LossWeights:
    mu1: float = 1e3  # point-wise MSE
    mu2: float = 1e1  # Chamfer
    mu3: float = 1.0  # EMD
    alpha: float = 1.0

    def __post_init__(self):
        if min(self.mu1, self.mu2, self.mu3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def loss_acd(prim, sphere, alpha: float) -> Tensor:
    return adaptive_chamfer(prim, sphere, alpha)


def loss_mse_pointwise(target, recon) -> Tensor:
    """Mean squared L2 error between index-aligned rows."""
    p = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    s = recon if isinstance(recon, Tensor) else Tensor(np.asarray(recon))
    if p.shape != s.shape:
        raise ValueError(f"MSE needs index-aligned sets of equal shape, got {p.shape} and {s.shape}")
    diff = s.data - p.data
    rows = int(np.prod(p.shape[:-1]))
    value = (diff * diff).sum() / rows

    def backward(g):
        gs = diff * (2.0 * g / rows)
        return -gs, gs

    return make_op(np.asarray(value, dtype=s.dtype), (p, s), backward)


def combine_rec(mse, cd, emd_value, w: LossWeights):
    return w.mu1 * mse + w.mu2 * cd + w.mu3 * emd_value


def loss_rec(target, recon, w: LossWeights = LossWeights(), emd_method: str = "auto",
             exact_limit: int = EMD_EXACT_LIMIT) -> tuple[Tensor, dict[str, float]]:
    """Weighted MSE + Chamfer + EMD reconstruction loss.

    ``emd_method`` is "exact", "auction", "auto" (exact up to ``exact_limit``
    points) or "chamfer-fallback" (drop the EMD term). Returns the loss and the
    unweighted component values.
    """
    mse = loss_mse_pointwise(target, recon)
    cd = chamfer(target, recon)
    parts = {"mse": mse.item(), "cd": cd.item(), "emd": 0.0}
    total = mse * w.mu1 + cd * w.mu2
    if emd_method != "chamfer-fallback" and w.mu3 > 0:
        e = emd(recon, target, method=emd_method, limit=exact_limit)
        parts["emd"] = e.item()
        total = total + e * w.mu3
    return total, parts


def loss_cross(recon_a_to_b, target_b) -> Tensor:
    """Chamfer between a cross reconstruction and the shape whose latent decoded it."""
    return chamfer(recon_a_to_b, target_b)


def alpha_schedule(stage: int, step: int = 0, mode: str = "step", stage1_steps: int | None = None) -> float:
    """Weight of the reverse adaptive-Chamfer term.

    "step" mode: 1 throughout pre-training, 0 during fine-tuning. "linear"
    mode decays from 1 to 0 across the ``stage1_steps`` pre-training steps.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2:
        return 0.0
    if mode == "step":
        return 1.0
    if mode == "linear":
        if not stage1_steps:
            raise ValueError("linear alpha mode needs stage1_steps")
        return float(min(1.0, max(0.0, 1.0 - step / stage1_steps)))
    raise ValueError(f"unknown alpha mode {mode!r}")
