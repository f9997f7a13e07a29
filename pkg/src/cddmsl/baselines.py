"""Ablation baselines: direct visual alignment and caption pseudo-labeling."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import losses
from .detector import FeatureMap, roi_pool

CODE_EPS = 1e-12  # smooths the Euclidean distance at zero


@dataclass(frozen=True)
class TokenCodebook:
    codes: torch.Tensor  # (M, D), frozen

    def __post_init__(self):
        if self.codes.dim() != 2 or len(self.codes) == 0:
            raise ValueError("empty codebook")
        if len(torch.unique(self.codes, dim=0)) != len(self.codes):
            raise ValueError("codebook rows must be distinct")
        self.codes.requires_grad_(False)

    def __len__(self):
        return len(self.codes)


def make_codebook(size: int = 32, dim: int = 64, seed: int = 7, dtype=torch.float32) -> TokenCodebook:
    gen = torch.Generator().manual_seed(seed)
    codes = torch.randn(size, dim, generator=gen, dtype=torch.float64)
    codes = codes / codes.norm(dim=1, keepdim=True)
    return TokenCodebook(codes.to(dtype))


def visual_tokens(regions: torch.Tensor) -> torch.Tensor:
    """Raw region features (R, D_v, P, P) mean-pooled over the P*P cells; no v2l."""
    return regions.mean(dim=(2, 3))


def dva_loss(batch: losses.PairBatch, tau: float = 0.07, symmetric: bool = False) -> torch.Tensor:
    """Same contrastive objective as CDDMSL, on projected raw visual features."""
    return losses.instance_contrastive(batch, tau, symmetric)


def _sq_dists(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    return ((z[:, None, :] - codes[None, :, :].to(z.dtype)) ** 2).sum(dim=-1)


def quantize_tokens(z: torch.Tensor, codebook: TokenCodebook) -> torch.Tensor:
    """Nearest code per row by Euclidean distance; ties go to the lowest index."""
    if len(codebook) == 0:
        raise ValueError("empty codebook")
    with torch.no_grad():
        return torch.argmin(_sq_dists(z.detach(), codebook.codes), dim=1)


def code_logits(z: torch.Tensor, codebook: TokenCodebook, tau: float) -> torch.Tensor:
    return -torch.sqrt(_sq_dists(z, codebook.codes) + CODE_EPS) / tau


def caption_pl_from_features(z_original: torch.Tensor, z_stylized: torch.Tensor,
                             codebook: TokenCodebook, tau: float = 0.07) -> torch.Tensor:
    """Cross-entropy of stylized-region code logits against pseudo-tokens of the original."""
    if z_original.shape != z_stylized.shape:
        raise ValueError("misaligned original/stylized pair")
    targets = quantize_tokens(z_original, codebook)
    return F.cross_entropy(code_logits(z_stylized, codebook, tau), targets)


def caption_pl_loss(original_images, stylized_images, backbone, v2l, codebook: TokenCodebook,
                    proposals, tau: float = 0.07, pool: int = 4) -> torch.Tensor:
    """Token-space consistency for one aligned batch of image pairs.

    ``proposals`` is a per-image list of boxes taken from the original images
    and reused on their stylized counterparts. Descriptive features are
    L2-normalised before quantisation; the original branch carries no
    gradient.
    """
    if original_images.shape != stylized_images.shape:
        raise ValueError("misaligned original/stylized pair")
    with torch.no_grad():
        f_orig = FeatureMap(backbone(original_images), backbone.stride)
        z_orig = F.normalize(v2l(roi_pool(f_orig, proposals, pool)), dim=1)
    f_sty = FeatureMap(backbone(stylized_images), backbone.stride)
    z_sty = F.normalize(v2l(roi_pool(f_sty, proposals, pool)), dim=1)
    return caption_pl_from_features(z_orig, z_sty, codebook, tau)
