"""Pairwise patch inconsistency volumes, their targets, and the inter-patch BCE loss.

Shapes use a leading batch axis: features (N, C, H', W'), embeddings
(N, H', W', Ce), volumes (N, H', W', H', W').
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

TARGET_MODES = ("xor", "and")
EPS = 1e-6


class MLP(nn.Module):
    def __init__(self, d_in: int, d_out: int, hidden: Sequence[int] = ()):
        super().__init__()
        dims = [d_in, *hidden, d_out]
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i:
                layers.append(nn.GELU())
            layers.append(nn.Linear(a, b))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class EmbeddingHeads(nn.Module):
    """Two independent position-wise MLPs mapping C-dim patch features to Ce-dim embeddings."""

    def __init__(self, channels: int, embed_dim: int, hidden: Sequence[int] = ()):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.phi1 = MLP(channels, embed_dim, hidden)
        self.phi2 = MLP(channels, embed_dim, hidden)


def embed_pair(features: torch.Tensor, heads: EmbeddingHeads) -> tuple[torch.Tensor, torch.Tensor]:
    if features.ndim != 4 or features.shape[1] != heads.channels:
        raise ValueError(f"features {tuple(features.shape)} incompatible with heads expecting C={heads.channels}")
    f = features.permute(0, 2, 3, 1)
    return heads.phi1(f), heads.phi2(f)


def volume_from_embeddings(e1: torch.Tensor, e2: torch.Tensor, scale: float) -> torch.Tensor:
    if e1.shape != e2.shape:
        raise ValueError(f"embedding shapes differ: {tuple(e1.shape)} vs {tuple(e2.shape)}")
    dots = torch.einsum("nijc,nhkc->nijhk", e1, e2) / scale
    # 1 - sigmoid(x) == sigmoid(-x), without cancellation near 1
    return torch.sigmoid(-dots)


def consistency_volume(features: torch.Tensor, heads: EmbeddingHeads, scale: float | None = None) -> torch.Tensor:
    """v[n,i,j,h,k] = 1 - sigmoid(phi1(f_ij) . phi2(f_hk) / scale); scale defaults to sqrt(Ce)."""
    e1, e2 = embed_pair(features, heads)
    return volume_from_embeddings(e1, e2, math.sqrt(heads.embed_dim) if scale is None else scale)


def target_volume(grid_mask, mode: str = "xor"):
    """Pairwise target from a (…, H', W') grid mask; works on numpy arrays or tensors.

    xor: M_ij (1 - M_hk) + (1 - M_ij) M_hk   (patches disagree)
    and: M_ij M_hk                            (both patches tampered)
    """
    if mode not in TARGET_MODES:
        raise ValueError(f"target mode must be one of {TARGET_MODES}, got {mode!r}")
    m = grid_mask
    a = m[..., :, :, None, None]
    b = m[..., None, None, :, :]
    if mode == "and":
        return a * b
    return a * (1 - b) + (1 - a) * b


def bce(target, pred, eps: float = EPS):
    """Elementwise binary cross-entropy with the prediction clamped to [eps, 1 - eps]."""
    if isinstance(pred, torch.Tensor):
        p = pred.clamp(eps, 1 - eps)
        return -(target * torch.log(p) + (1 - target) * torch.log1p(-p))
    p = np.clip(pred, eps, 1 - eps)
    return -(target * np.log(p) + (1 - target) * np.log1p(-p))


def ipc_loss(v: torch.Tensor, v_tgt: torch.Tensor, reduce_batch: bool = True) -> torch.Tensor:
    """Mean BCE over the H'W'H'W' entries of each volume; averaged over the batch unless told otherwise."""
    if v.shape != v_tgt.shape:
        raise ValueError(f"volume shapes differ: {tuple(v.shape)} vs {tuple(v_tgt.shape)}")
    per = bce(v_tgt, v).flatten(start_dim=v.ndim - 4).mean(-1)
    return per.mean() if reduce_batch else per
