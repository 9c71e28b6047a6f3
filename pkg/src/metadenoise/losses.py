"""Training losses. All reductions are means so loss weights do not depend on patch size."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError, DomainError


@dataclass
class LossWeights:
    lambda_G: float = 0.01
    lambda_in: float = 10.0
    lambda_out: float = 10.0

    def __post_init__(self):
        for name in ("lambda_G", "lambda_in", "lambda_out"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def primary_loss(pred_clean: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """L1 between predicted clean image and ground truth."""
    _same_shape(pred_clean, clean)
    return (pred_clean - clean).abs().mean()


def rec_loss(pred_noisy: torch.Tensor, noisy: torch.Tensor) -> torch.Tensor:
    """Unmasked L1 reconstruction of the noisy input (ablation auxiliary loss)."""
    _same_shape(pred_noisy, noisy)
    return (pred_noisy - noisy).abs().mean()


def masked_rec_loss(pred_noisy: torch.Tensor, noisy: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """L1 reconstruction gated per pixel by ``mask`` (N,1,H,W), averaged over every pixel.

    The denominator is the full element count, so an all-ones mask reproduces
    :func:`rec_loss` exactly.
    """
    _same_shape(pred_noisy, noisy)
    if mask.ndim != noisy.ndim or mask.shape[1] != 1 or mask.shape[-2:] != noisy.shape[-2:] \
            or mask.shape[0] != noisy.shape[0]:
        raise DimensionError(f"mask {tuple(mask.shape)} incompatible with image {tuple(noisy.shape)}")
    return ((pred_noisy - noisy).abs() * mask).mean()


def gradient_loss(mask: torch.Tensor, noisy: torch.Tensor) -> torch.Tensor:
    """Match horizontal and vertical forward differences of the mask to those of the gray input.

    Each direction is averaged over its own valid positions (one fewer along
    the differenced axis) and the two means are summed.
    """
    if mask.shape[1] != 1 or mask.shape[0] != noisy.shape[0] or mask.shape[-2:] != noisy.shape[-2:]:
        raise DimensionError(f"mask {tuple(mask.shape)} incompatible with image {tuple(noisy.shape)}")
    gray = noisy.mean(dim=1, keepdim=True)
    dx_m = mask[..., :, 1:] - mask[..., :, :-1]
    dx_i = gray[..., :, 1:] - gray[..., :, :-1]
    dy_m = mask[..., 1:, :] - mask[..., :-1, :]
    dy_i = gray[..., 1:, :] - gray[..., :-1, :]
    total = mask.new_zeros(())
    if dx_m.numel():
        total = total + (dx_m - dx_i).abs().mean()
    if dy_m.numel():
        total = total + (dy_m - dy_i).abs().mean()
    return total


def collapse_score(mask: torch.Tensor) -> torch.Tensor:
    """Per-image population standard deviation of mask values; near 0 means a collapsed mask."""
    if mask.ndim == 2:
        return mask.std(unbiased=False)
    if mask.ndim == 3:
        mask = mask.unsqueeze(0)
    return mask.flatten(1).std(dim=1, unbiased=False)


def aux_loss(kind: str, pred_noisy, noisy, mask):
    if kind == "masked":
        return masked_rec_loss(pred_noisy, noisy, mask)
    if kind == "plain":
        return rec_loss(pred_noisy, noisy)
    raise DomainError(f"unknown auxiliary loss {kind!r}")
