"""Region-aware training loss: masked/non-masked diffusion terms, a
finite-difference gradient penalty on the encoder, the mask-decoder term,
and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .video import DimensionError

NORM_EPS = 1e-24  # smoothing for the channel norm so zero features stay differentiable


@dataclass
class LossWeights:
    lam: float = 2.0  # mask-region diffusion term
    beta: float = 1.0  # gradient penalty
    gamma: float = 1.0  # mask-decoder term
    delta: float = 1e-2  # finite-difference step
    perturb_full_frame: bool = False  # ablation: perturb everywhere, not just the mask

    def __post_init__(self):
        if min(self.lam, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class LossBreakdown:
    non_mask: float
    mask: float
    grad: float
    mpd: float
    total: float

    def as_row(self) -> dict:
        return {
            "non_mask": self.non_mask,
            "mask": self.mask,
            "grad": self.grad,
            "mpd": self.mpd,
            "total": self.total,
        }


def masked_diffusion_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error of mask * pred vs mask * target over all elements.

    Call with ``1 - mask`` for the non-mask variant; for binary masks the
    two variants sum exactly to the plain full-tensor MSE.
    """
    if pred.shape != target.shape:
        raise DimensionError("pred/target shape mismatch")
    try:
        diff = (pred - target) * mask
    except RuntimeError as exc:
        raise DimensionError(f"mask does not broadcast against predictions: {exc}") from exc
    return diff.square().mean()


def channel_norm(features: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-cell l2 norm across channels, smoothed at zero.

    ``features`` either matches ``weight``'s shape (one channel) or has
    one extra trailing channel axis.
    """
    if features.ndim == weight.ndim + 1:
        sq = features.square().sum(dim=-1)
    elif features.shape == weight.shape:
        sq = features.square()
    else:
        raise DimensionError("feature/weight shapes are incompatible")
    return torch.sqrt(sq + NORM_EPS)


def grad_penalty(
    encoder_fn,
    enc_input: torch.Tensor,
    perturb_mask: torch.Tensor,
    weight_mask: torch.Tensor,
    delta: float,
    base_features: torch.Tensor | None = None,
) -> torch.Tensor:
    """Finite-difference sensitivity of the encoder inside the edit region.

    delta_f = (encoder_fn(input + delta * perturb_mask) - encoder_fn(input)) / delta,
    reduced to a per-cell channel norm and averaged under ``weight_mask``.
    ``base_features`` lets callers reuse an already-computed clean pass.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    f0 = encoder_fn(enc_input) if base_features is None else base_features
    f1 = encoder_fn(enc_input + delta * perturb_mask)
    delta_f = (f1 - f0) / delta
    return (weight_mask * channel_norm(delta_f, weight_mask)).mean()


def mpd_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """MSE between sigmoid(logits) and the binarized latent mask."""
    if logits.shape != gt.shape:
        raise DimensionError("logit/target shape mismatch")
    target = (gt >= 0.5).to(logits.dtype)
    return (torch.sigmoid(logits) - target).square().mean()


def ra_total(non_mask, mask, grad, mpd, w: LossWeights) -> LossBreakdown:
    """Weighted total over the four parts (floats or torch scalars).

    The breakdown is recorded in float so ``total`` satisfies
    total = non_mask + lam * mask + beta * grad + gamma * mpd exactly.
    """
    nm, mk, gd, md = (float(p) for p in (non_mask, mask, grad, mpd))
    for value in (nm, mk, gd, md):
        if value != value or abs(value) == float("inf"):
            raise ValueError("loss parts must be finite")
        if value < 0:
            raise ValueError("loss parts must be >= 0")
    total = nm + w.lam * mk + w.beta * gd + w.gamma * md
    return LossBreakdown(non_mask=nm, mask=mk, grad=gd, mpd=md, total=total)
