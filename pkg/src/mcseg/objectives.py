"""
Training losses: sharpening, Dice, cycled pseudo-label consistency,
Gaussian ramp-up and the combined objective.

All loss functions take torch tensors shaped ``(N, 1, H, W, D)`` (any shape
works as long as both arguments agree) and keep autograd intact.
"""

import math
from dataclasses import dataclass

import torch

CONSISTENCY_MODES = ("none", "sPL", "CPL")


@dataclass(frozen=True)
class SharpeningConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class RampUpSchedule:
    lambda_max: float = 0.1
    ramp_iterations: int = 2000

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if self.ramp_iterations < 0:
            raise ValueError("ramp_iterations must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_c: float
    lam: float
    total: float


def sharpen(p: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Push probabilities toward 0/1: ``p^(1/T) / (p^(1/T) + (1-p)^(1/T))``.

    Evaluated as ``sigmoid((log p - log(1-p)) / T)`` so that large ``1/T``
    cannot underflow both powers to zero.  Both logs are taken of values
    clamped to the smallest normal float, which keeps every intermediate
    finite.  For T near 1 or above the clamped logit no longer saturates the
    sigmoid, so 0 and 1 are pinned onto themselves explicitly.

    The result is differentiable.  Callers that use it as a target detach it.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    p = torch.as_tensor(p)
    tiny = torch.finfo(p.dtype).tiny
    log_p = torch.log(p.clamp_min(tiny))
    log_q = torch.log((1.0 - p).clamp_min(tiny))
    out = torch.sigmoid((log_p - log_q) / temperature)
    out = torch.where(p <= 0, torch.zeros_like(out), out)
    return torch.where(p >= 1, torch.ones_like(out), out)


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """``1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)`` over the whole stack."""
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    y = y.to(p.dtype)
    intersect = (p * y).sum()
    return 1.0 - (2.0 * intersect + eps) / (p.sum() + y.sum() + eps)


def consistency_loss(p_a: torch.Tensor, p_b: torch.Tensor, temperature: float = 0.1):
    """Cycled pseudo-label MSE: each raw map regresses onto the other's sharpened copy."""
    if p_a.shape != p_b.shape:
        raise ValueError(f"shape mismatch: {tuple(p_a.shape)} vs {tuple(p_b.shape)}")
    spl_a = sharpen(p_a.detach(), temperature)
    spl_b = sharpen(p_b.detach(), temperature)
    return ((p_a - spl_b) ** 2).mean() + ((p_b - spl_a) ** 2).mean()


def sharpened_agreement_loss(p_a: torch.Tensor, p_b: torch.Tensor, temperature: float = 0.1):
    """MSE between the two sharpened maps, gradient reaching both raw predictions."""
    if p_a.shape != p_b.shape:
        raise ValueError(f"shape mismatch: {tuple(p_a.shape)} vs {tuple(p_b.shape)}")
    return ((sharpen(p_a, temperature) - sharpen(p_b, temperature)) ** 2).mean()


def ramp_weight(t: float, sched: RampUpSchedule) -> float:
    """Gaussian warm-up ``lambda_max * exp(-5 (1 - min(t, L)/L)^2)``."""
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    if sched.ramp_iterations == 0:
        return float(sched.lambda_max)
    phase = 1.0 - min(float(t), sched.ramp_iterations) / sched.ramp_iterations
    return float(sched.lambda_max * math.exp(-5.0 * phase * phase))


def total_loss(p_a, p_b, y, labeled, t, *, temperature=0.1, sched=RampUpSchedule(),
               dice_epsilon=1e-5, mode="CPL"):
    """Combined objective for one batch.

    Args:
        p_a, p_b: decoder outputs for the whole batch, ``(N, 1, ...)``.
        y: ground truth for the whole batch; rows of unlabeled elements are ignored.
        labeled: boolean selector of length N.
        t: iteration index feeding the ramp-up.
        mode: "CPL" (cycled pseudo labels), "sPL" (sharpened agreement) or "none".

    Returns:
        ``(total, LossReport)`` where ``total`` is the differentiable scalar.
    """
    if mode not in CONSISTENCY_MODES:
        raise ValueError(f"unknown consistency mode {mode!r}")
    labeled = torch.as_tensor(labeled, dtype=torch.bool)
    if labeled.numel() != p_a.shape[0]:
        raise ValueError("labeled selector length must equal batch size")
    if not labeled.any():
        raise ValueError("batch has no labeled elements; segmentation loss undefined")
    y_l = y[labeled]
    l_seg = dice_loss(p_a[labeled], y_l, dice_epsilon) + dice_loss(p_b[labeled], y_l, dice_epsilon)
    if mode == "none":
        # still logged, never weighted
        lam = 0.0
        with torch.no_grad():
            l_c = consistency_loss(p_a, p_b, temperature)
    else:
        lam = ramp_weight(t, sched)
        if mode == "CPL":
            l_c = consistency_loss(p_a, p_b, temperature)
        else:
            l_c = sharpened_agreement_loss(p_a, p_b, temperature)
    total = l_seg + lam * l_c
    seg_f, c_f = float(l_seg.detach()), float(l_c.detach())
    return total, LossReport(seg_f, c_f, lam, seg_f + lam * c_f)
