"""Scene-guided prompt: road prior, morphological refinement, gating, cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthesis import ROAD_CLASS

MORPH_MODES = ("erode_then_dilate", "dilate_only")


@dataclass(frozen=True)
class MorphologyConfig:
    kernel_size: int = 15
    iterations: int = 15
    mode: str = "erode_then_dilate"

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mode not in MORPH_MODES:
            raise ValueError(f"mode must be one of {MORPH_MODES}, got {self.mode!r}")


@dataclass
class PromptEmbedding:
    values: torch.Tensor  # B x d x N
    attention: torch.Tensor  # B x d x d, rows sum to one


def extract_road_mask(logits, road_class: int = ROAD_CLASS) -> torch.Tensor:
    """1 where the argmax class is road; ties resolve to the lowest class index."""
    y = torch.as_tensor(logits)
    if not torch.isfinite(y).all():
        raise ValueError("logits must be finite")
    road = y.select(-3, road_class)
    if road_class == 0:
        best = y.amax(dim=-3)
        return (road >= best).to(torch.uint8)
    lower = y.narrow(-3, 0, road_class).amax(dim=-3)
    upper = y.narrow(-3, road_class, y.shape[-3] - road_class).amax(dim=-3)
    return ((road > lower) & (road >= upper)).to(torch.uint8)


def _as_nchw(mask) -> tuple[torch.Tensor, tuple[int, ...], bool]:
    is_numpy = isinstance(mask, np.ndarray)
    t = torch.as_tensor(np.asarray(mask) if is_numpy else mask)
    shape = tuple(t.shape)
    if t.ndim < 2:
        raise ValueError("mask needs at least two dims")
    return t.reshape(-1, 1, *shape[-2:]).float(), shape, is_numpy


def _dilate(x: torch.Tensor, k: int) -> torch.Tensor:
    r = k // 2
    return F.max_pool2d(F.pad(x, (r, r, r, r), value=0.0), k, stride=1)


def _erode(x: torch.Tensor, k: int) -> torch.Tensor:
    # zero padding: pixels whose window leaves the image see a 0 and erode
    r = k // 2
    return -F.max_pool2d(-F.pad(x, (r, r, r, r), value=0.0), k, stride=1)


def dilate(mask, kernel_size: int, iterations: int = 1):
    return refine_mask(mask, MorphologyConfig(kernel_size, iterations, "dilate_only"))


def erode(mask, kernel_size: int, iterations: int = 1):
    x, shape, is_numpy = _as_nchw(mask)
    x = (x > 0).float()
    for _ in range(iterations):
        x = _erode(x, kernel_size)
    out = x.reshape(shape).to(torch.uint8)
    return out.numpy() if is_numpy else out


def refine_mask(mask, cfg: MorphologyConfig):
    """Opening (n erosions then n dilations) or n dilations with a k x k ones kernel.

    Works on H x W or batched (..., H, W) masks, numpy or torch; returns uint8
    of the same kind and shape.
    """
    x, shape, is_numpy = _as_nchw(mask)
    x = (x > 0).float()
    k, n = cfg.kernel_size, cfg.iterations
    if cfg.mode == "erode_then_dilate":
        for _ in range(n):
            x = _erode(x, k)
    for _ in range(n):
        x = _dilate(x, k)
    out = x.reshape(shape).to(torch.uint8)
    return out.numpy() if is_numpy else out


def gate(anomaly, refined) -> torch.Tensor:
    """Hadamard product of the anomaly map with the refined road mask."""
    a = torch.as_tensor(anomaly)
    m = torch.as_tensor(refined)
    if a.shape != m.shape:
        raise ValueError(f"anomaly {tuple(a.shape)} and mask {tuple(m.shape)} shapes differ")
    return a * m.to(a.dtype)


def area_downsample(score_map: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool an (..., H, W) map by ``factor`` into B x 1 x H' x W'."""
    x = score_map.reshape(-1, 1, *score_map.shape[-2:])
    if factor == 1:
        return x
    return F.avg_pool2d(x, factor)


class CrossAttentionPrompt(nn.Module):
    """1x1 projections of the gated and raw maps and channel-wise attention.

    Q = f_q(gated), K = f_k(raw), V = f_v(raw), each d x N;
    A = softmax_rows(Q K^T / sqrt(d)) is d x d; the prompt is A V.
    """

    def __init__(self, embed_dim: int = 64):
        super().__init__()
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.embed_dim = embed_dim
        self.f_q = nn.Conv2d(1, embed_dim, 1)
        self.f_k = nn.Conv2d(1, embed_dim, 1)
        self.f_v = nn.Conv2d(1, embed_dim, 1)
        for conv in (self.f_q, self.f_k, self.f_v):
            nn.init.zeros_(conv.bias)

    def forward(self, gated: torch.Tensor, anomaly: torch.Tensor) -> PromptEmbedding:
        if gated.ndim == 3:
            gated = gated[:, None]
        if anomaly.ndim == 3:
            anomaly = anomaly[:, None]
        if gated.shape != anomaly.shape:
            raise ValueError(f"gated {tuple(gated.shape)} and anomaly {tuple(anomaly.shape)} differ")
        if not (torch.isfinite(gated).all() and torch.isfinite(anomaly).all()):
            raise ValueError("cross-attention inputs must be finite")
        q = self.f_q(gated).flatten(2)
        k = self.f_k(anomaly).flatten(2)
        v = self.f_v(anomaly).flatten(2)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.embed_dim), dim=-1)
        return PromptEmbedding(values=attn @ v, attention=attn)


def cross_attention(gated: torch.Tensor, anomaly: torch.Tensor, params: CrossAttentionPrompt,
                    downsample: int = 1) -> PromptEmbedding:
    """Area-downsample both H x W maps by ``downsample`` and run the attention."""
    return params(area_downsample(gated, downsample), area_downsample(anomaly, downsample))
