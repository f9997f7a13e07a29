"""Frozen vision-to-language mapper, projection head and KD reference encoder."""
from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def params_checksum(module: nn.Module) -> str:
    """sha256 over every named parameter and buffer, in name order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class V2L(nn.Module):
    """One self-attention block plus MLP over the P*P region tokens, mean-pooled.

    Outputs are unit-norm, matching the scale of the prompt embeddings.

    Weights come from ``seed`` and are frozen on construction; gradients
    still flow to the input.
    """

    def __init__(self, in_dim=64, out_dim=64, pool=4, heads=4, seed=1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.norm1 = nn.LayerNorm(in_dim)
            self.attn = nn.MultiheadAttention(in_dim, heads, batch_first=True)
            self.norm2 = nn.LayerNorm(in_dim)
            self.mlp = nn.Sequential(nn.Linear(in_dim, 2 * in_dim), nn.GELU(), nn.Linear(2 * in_dim, in_dim))
            self.out = nn.Linear(in_dim, out_dim)
        self.register_buffer("pos", 0.1 * torch.randn(pool * pool, in_dim, generator=gen))
        self.in_dim, self.out_dim, self.pool = in_dim, out_dim, pool
        freeze(self)

    def train(self, mode: bool = True):
        # always deterministic (no dropout); stays in eval mode
        return super().train(False)

    def forward(self, regions: torch.Tensor) -> torch.Tensor:
        if regions.dim() != 4 or regions.shape[1] != self.in_dim or regions.shape[2] * regions.shape[3] != len(self.pos):
            raise ValueError(f"v2l expects (R, {self.in_dim}, {self.pool}, {self.pool}), got {tuple(regions.shape)}")
        tokens = regions.flatten(2).transpose(1, 2) + self.pos.to(regions.dtype)
        t = self.norm1(tokens).transpose(0, 1)
        # the functional form skips nn.MultiheadAttention's no-grad fast path, so the live
        # (grad) and reference (no-grad) branches of the KD term round identically
        a = self.attn
        attended = F.multi_head_attention_forward(
            t, t, t, a.embed_dim, a.num_heads, a.in_proj_weight, a.in_proj_bias, None, None, False,
            0.0, a.out_proj.weight, a.out_proj.bias, training=False, need_weights=False)[0]
        tokens = tokens + attended.transpose(0, 1)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return F.normalize(self.out(tokens.mean(dim=1)), dim=1, eps=1e-12)


def v2l_map(regions: torch.Tensor, v2l: V2L) -> torch.Tensor:
    return v2l(regions)


class ProjectionHead(nn.Module):
    """Trainable 2-layer head g into the contrastive space."""

    def __init__(self, in_dim=64, out_dim=256, hidden=256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, z):
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"projection expects dim {self.in_dim}, got {z.shape[-1]}")
        return self.fc2(F.relu(self.fc1(z)))


def project(z: torch.Tensor, g: ProjectionHead) -> torch.Tensor:
    return g(z)


class ReferenceEncoder(nn.Module):
    """Immutable copy of a backbone."""

    def __init__(self, backbone: nn.Module):
        super().__init__()
        self.encoder = freeze(copy.deepcopy(backbone))
        self.stride = getattr(backbone, "stride", None)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, images):
        with torch.no_grad():
            return self.encoder(images)


def freeze_snapshot(backbone: nn.Module) -> ReferenceEncoder:
    return ReferenceEncoder(backbone)


def reference_encode(images: torch.Tensor, ref: ReferenceEncoder) -> torch.Tensor:
    return ref(images)
