"""RGB-only detector: strided conv encoder, 3x3 conv decoder, pooled classification head.

The encoder is a small ConvNeXt-flavoured stack (patchify stem, 2x2 strided
downsampling, channel LayerNorm, residual 3x3 blocks).  It consumes RGB only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .consistency import EmbeddingHeads
from .samples import ConfigError


@dataclass
class ModelConfig:
    channels: int = 64
    stride: int = 16
    encoder_depth: int = 4
    dropout_rate: float = 0.1
    embed_dim: int = 32
    # hidden widths of the phi MLPs; () makes them single linear maps
    embed_hidden: tuple[int, ...] = (64,)
    # width of the stem; doubles at every downsampling stage up to ``channels``
    stem_channels: int = 16
    # stem kernel side; values above the stem stride make the patches overlap
    stem_kernel: int = 4
    stem_norm: bool = True
    # "embed" scales the dot product by sqrt(embed_dim), "feature" by sqrt(channels)
    scale_dim: str = "embed"
    # 0 keeps the default head init, otherwise initial weight of the affine map
    head_init_weight: float = 8.0
    # pooling of the localization map before the affine head: "mean" or "max"
    head_pool: str = "max"
    max_grid_cells: int = 4096

    def __post_init__(self):
        self.embed_hidden = tuple(self.embed_hidden)
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ConfigError(f"stride must be a power of 2, got {self.stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.head_pool not in ("mean", "max"):
            raise ConfigError("head_pool must be 'mean' or 'max'")
        if self.scale_dim not in ("embed", "feature"):
            raise ConfigError("scale_dim must be 'embed' or 'feature'")
        if self.encoder_depth < 1 + self.n_down:
            raise ConfigError(f"encoder_depth must be >= {1 + self.n_down} for stride {self.stride}")

    @property
    def stem_stride(self) -> int:
        return min(self.stride, 4)

    @property
    def n_down(self) -> int:
        return int(math.log2(self.stride // self.stem_stride))

    @property
    def scale(self) -> float:
        return math.sqrt(self.embed_dim if self.scale_dim == "embed" else self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_hidden"] = list(self.embed_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def grid_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    return -(-height // stride), -(-width // stride)


def pad_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Edge-replicate (N, C, H, W) on the right/bottom up to the next multiple of ``stride``.

    Pixel values are never resampled.
    """
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


def pad_mask_to_stride(mask: np.ndarray, stride: int) -> np.ndarray:
    h, w = mask.shape
    return np.pad(mask, ((0, (-h) % stride), (0, (-w) % stride)), constant_values=0.0)


class ChannelNorm(nn.Module):
    """LayerNorm over channels at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = ChannelNorm(channels)
        self.pw = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return x + self.pw(F.gelu(self.norm(self.conv(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = [min(cfg.channels, cfg.stem_channels * 2**i) for i in range(cfg.n_down + 1)]
        widths[-1] = cfg.channels
        k = max(cfg.stem_kernel, cfg.stem_stride)
        # pad so output size is exactly input / stem_stride
        pad = (k - cfg.stem_stride) // 2
        layers: list[nn.Module] = [nn.Conv2d(3, widths[0], k, stride=cfg.stem_stride, padding=pad)]
        if cfg.stem_norm:
            layers.append(ChannelNorm(widths[0]))
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.GELU(), nn.Conv2d(cin, cout, 2, stride=2), ChannelNorm(cout)]
        for _ in range(cfg.encoder_depth - 1 - cfg.n_down):
            layers.append(ResBlock(cfg.channels))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Decoder(nn.Module):
    """Single 3x3 conv to one channel, then sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, feats):
        return torch.sigmoid(self.conv(feats))[:, 0]


class ClassifierHead(nn.Module):
    """Dropout on the localization map, global pooling, one affine map to a logit."""

    def __init__(self, init_weight: float = 0.0, pool: str = "max"):
        super().__init__()
        self.pool = pool
        self.fc = nn.Linear(1, 1)
        if init_weight:
            with torch.no_grad():
                self.fc.weight.fill_(init_weight)
                self.fc.bias.fill_(-init_weight / 2)

    def forward(self, loc_map, dropout_rate: float = 0.0, train: bool = False,
                generator: Optional[torch.Generator] = None):
        if train and dropout_rate > 0:
            keep = torch.rand(loc_map.shape, generator=generator, dtype=loc_map.dtype) >= dropout_rate
            loc_map = loc_map * keep / (1.0 - dropout_rate)
        flat = loc_map.flatten(start_dim=-2)
        pooled = (flat.amax(-1) if self.pool == "max" else flat.mean(-1)).unsqueeze(-1)
        return torch.sigmoid(self.fc(pooled))[..., 0]


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg.channels)
        self.head = ClassifierHead(cfg.head_init_weight, cfg.head_pool)
        self.heads = EmbeddingHeads(cfg.channels, cfg.embed_dim, cfg.embed_hidden)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) normalised image -> (N, C, H', W') feature grid."""
        h, w = x.shape[-2:]
        s = self.cfg.stride
        if h < s or w < s:
            raise ValueError(f"image {h}x{w} smaller than one stride ({s})")
        gh, gw = grid_shape(h, w, s)
        if gh * gw > self.cfg.max_grid_cells:
            raise ValueError(f"grid {gh}x{gw} exceeds max_grid_cells={self.cfg.max_grid_cells}")
        return self.encoder(pad_to_stride(x, s))

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        return self.decoder(feats)

    def classify(self, loc_map: torch.Tensor, train: bool = False,
                 generator: Optional[torch.Generator] = None, dropout_rate: Optional[float] = None) -> torch.Tensor:
        rate = self.cfg.dropout_rate if dropout_rate is None else dropout_rate
        return self.head(loc_map, rate, train, generator)

    def forward(self, x, train: bool = False, generator: Optional[torch.Generator] = None):
        feats = self.encode(x)
        loc = self.decode(feats)
        return self.classify(loc, train, generator), loc, feats


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array -> (1, 3, H, W) tensor, no value change."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))).to(dtype)[None]
