"""Image encoder stand-in and the anomaly/feature fusion block.

Shapes for an H x W input with downsample factor 4 (H' = H/4):

    anomaly 1 x H x W --project--> 16 x H' x W' --align--> D_I x H' x W'
    image   3 x H x W --encoder--> D_I x H' x W'
    gate    = sigmoid(conv3x3(concat(aligned, features)))      1 x H' x W'
    fused   = (1 + gate) * features + (1 - gate) * aligned
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TOKEN_DIM = 16
PROJECT_HIDDEN = 8
FUSION_MODES = ("sfb", "add")


@dataclass
class FusedFeature:
    values: torch.Tensor  # B x D_I x H' x W'
    gate: torch.Tensor | None  # B x 1 x H' x W', None for additive fusion


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class TinyEncoder(nn.Module):
    """Small frozen convnet producing D_I x H/4 x W/4 image features."""

    def __init__(self, feature_dim: int = 64, downsample: int = 4):
        super().__init__()
        if downsample != 4:
            raise ValueError("TinyEncoder only supports downsample factor 4")
        self.feature_dim = feature_dim
        self.downsample = downsample
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(48, feature_dim, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(feature_dim, feature_dim, 1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W, got {tuple(image.shape)}")
        if image.shape[-2] % self.downsample or image.shape[-1] % self.downsample:
            raise ValueError(f"image dims {tuple(image.shape[-2:])} not divisible by {self.downsample}")
        return self.net(image)


def pretrain_encoder(encoder: TinyEncoder, images: torch.Tensor, steps: int, lr: float = 1e-3,
                     batch_size: int = 8, seed: int = 0) -> list[float]:
    """Autoencoding pass: fit a throwaway transposed-conv decoder to reconstruct images."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    decoder = nn.Sequential(
        nn.ConvTranspose2d(encoder.feature_dim, 32, 2, stride=2),
        nn.GELU(),
        nn.ConvTranspose2d(32, 3, 2, stride=2),
    )
    params = list(encoder.parameters()) + list(decoder.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        batch = images[idx]
        loss = F.mse_loss(decoder(encoder(batch)), batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    freeze(encoder)
    return losses


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


class Projection(nn.Module):
    """Two 2x2 stride-2 convs (1 -> 8 -> 16), each followed by LayerNorm and GELU."""

    def __init__(self, hidden: int = PROJECT_HIDDEN, token_dim: int = TOKEN_DIM):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 2, stride=2)
        self.norm1 = LayerNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, token_dim, 2, stride=2)
        self.norm2 = LayerNorm2d(token_dim)

    def forward(self, anomaly: torch.Tensor) -> torch.Tensor:
        if anomaly.ndim == 3:
            anomaly = anomaly[:, None]
        if anomaly.shape[1] != 1:
            raise ValueError(f"anomaly map must have one channel, got {anomaly.shape[1]}")
        if anomaly.shape[-2] % 4 or anomaly.shape[-1] % 4:
            raise ValueError(f"anomaly spatial dims {tuple(anomaly.shape[-2:])} not divisible by 4")
        x = F.gelu(self.norm1(self.conv1(anomaly)))
        return F.gelu(self.norm2(self.conv2(x)))


class Alignment(nn.Module):
    def __init__(self, token_dim: int = TOKEN_DIM, feature_dim: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(token_dim, feature_dim, 1)

    def forward(self, token: torch.Tensor) -> torch.Tensor:
        if token.shape[1] != self.conv.in_channels:
            raise ValueError(f"token has {token.shape[1]} channels, expected {self.conv.in_channels}")
        return self.conv(token)


class GatedFusion(nn.Module):
    def __init__(self, feature_dim: int = 64, kernel_size: int = 3):
        super().__init__()
        self.gate_conv = nn.Conv2d(2 * feature_dim, 1, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.gate_conv.bias)

    def forward(self, features: torch.Tensor, aligned: torch.Tensor) -> FusedFeature:
        if features.shape != aligned.shape:
            raise ValueError(f"feature {tuple(features.shape)} and token {tuple(aligned.shape)} shapes differ")
        gate = torch.sigmoid(self.gate_conv(torch.cat([aligned, features], dim=1)))
        fused = (1.0 + gate) * features + (1.0 - gate) * aligned
        return FusedFeature(values=fused, gate=gate)


class AdditiveFusion(nn.Module):
    """Ablation baseline: features + aligned token, no gate."""

    def forward(self, features: torch.Tensor, aligned: torch.Tensor) -> FusedFeature:
        if features.shape != aligned.shape:
            raise ValueError(f"feature {tuple(features.shape)} and token {tuple(aligned.shape)} shapes differ")
        return FusedFeature(values=features + aligned, gate=None)


class SemanticFusionBlock(nn.Module):
    def __init__(self, feature_dim: int = 64, mode: str = "sfb"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        self.feature_dim = feature_dim
        self.mode = mode
        self.project = Projection()
        self.align = Alignment(TOKEN_DIM, feature_dim)
        self.fuse = GatedFusion(feature_dim) if mode == "sfb" else AdditiveFusion()

    def forward(self, features: torch.Tensor, anomaly: torch.Tensor) -> FusedFeature:
        return self.fuse(features, self.align(self.project(anomaly)))


# functional forms mirroring the block's three stages

def project(anomaly: torch.Tensor, params: Projection) -> torch.Tensor:
    return params(anomaly)


def align(token: torch.Tensor, params: Alignment) -> torch.Tensor:
    return params(token)


def fuse(features: torch.Tensor, aligned: torch.Tensor, params: nn.Module) -> FusedFeature:
    return params(features, aligned)


def tiny_encoder(image: torch.Tensor, params: TinyEncoder) -> torch.Tensor:
    single = image.ndim == 3
    x = image[None] if single else image
    with torch.no_grad():
        out = params(x)
    return out[0] if single else out
