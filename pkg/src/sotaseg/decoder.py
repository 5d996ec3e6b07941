"""Promptable two-way-attention mask decoder with low-rank adapters.

The decoder keeps one learned output token. Prompt embeddings (d x N) are
pooled along N into a fixed number of prompt tokens and appended to it. Each
two-way block runs token self-attention, token-to-image cross-attention, a
token MLP and image-to-token cross-attention. The mask is the dot product of
the output token (after a linear hypernetwork) with upsampled image features.

LoRA adapters wrap the linear maps of chosen sublayer kinds:

    SA  - token self-attention projections
    CA  - both cross-attention directions
    MLP - token MLP layers
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import LayerNorm2d

SUBLAYER_KINDS = ("CA", "SA", "MLP")
FINETUNE_MODES = ("lora", "fft")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    alpha: float | None = None  # defaults to 2 * rank
    targets: tuple[str, ...] = ("CA", "MLP")
    finetune: str = "lora"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(2 * self.rank))
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.finetune not in FINETUNE_MODES:
            raise ValueError(f"finetune must be one of {FINETUNE_MODES}")
        bad = set(self.targets) - set(SUBLAYER_KINDS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}; choose from {SUBLAYER_KINDS}")

    @property
    def scaling(self) -> float:
        return float(self.alpha) / self.rank


class LoRALinear(nn.Module):
    """Frozen ``W x + b`` plus ``scaling * up(down(x))``; ``up`` starts at zero."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = float(alpha) / rank
        bound = 1.0 / math.sqrt(d_in)
        down = (torch.rand(rank, d_in, generator=generator) * 2.0 - 1.0) * bound
        self.lora_down = nn.Parameter(down.to(base.weight.dtype))
        self.lora_up = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_down), self.lora_up)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None)
        out = out.to(self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * (self.lora_up @ self.lora_down))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        out.weight.requires_grad_(self.base.weight.requires_grad)
        if out.bias is not None:
            out.bias.requires_grad_(self.base.bias.requires_grad)
        return out

    def adapter_parameter_count(self) -> int:
        return self.rank * (self.in_features + self.out_features)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int = 4):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q = self._heads(self.q_proj(q))
        k = self._heads(self.k_proj(k))
        v = self._heads(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class TokenMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(F.gelu(self.lin1(x)))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = TokenMLP(dim, mlp_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.cross_token_to_image(tokens, image, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_image_to_token(image, tokens, tokens))
        return tokens, image


_SUBLAYER_KIND = {
    "self_attn": "SA",
    "cross_token_to_image": "CA",
    "cross_image_to_token": "CA",
    "mlp": "MLP",
}


@dataclass
class PredictedMask:
    logits: torch.Tensor  # B x H x W

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class MaskDecoder(nn.Module):
    def __init__(self, dim: int = 64, depth: int = 2, num_heads: int = 4, mlp_ratio: int = 2,
                 num_prompt_tokens: int = 8):
        super().__init__()
        if dim % 4:
            raise ValueError("decoder width must be divisible by 4")
        self.dim = dim
        self.num_prompt_tokens = num_prompt_tokens
        self.output_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, num_heads, mlp_ratio * dim) for _ in range(depth))
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 2, 2, stride=2),
            LayerNorm2d(dim // 2),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 2, dim // 4, 2, stride=2),
            nn.GELU(),
        )
        self.hyper = nn.Linear(dim, dim // 4)

    # -- LoRA bookkeeping -------------------------------------------------
    def linear_sites(self) -> Iterator[tuple[str, nn.Module, str, str]]:
        """(qualified name, parent module, attribute, sublayer kind) of each block linear map."""
        for bi, block in enumerate(self.blocks):
            for sub_name, kind in _SUBLAYER_KIND.items():
                sub = getattr(block, sub_name)
                for attr, child in sub.named_children():
                    if isinstance(child, (nn.Linear, LoRALinear)):
                        yield f"blocks.{bi}.{sub_name}.{attr}", sub, attr, kind

    def adapters(self) -> dict[str, LoRALinear]:
        return {name: getattr(p, a) for name, p, a, _ in self.linear_sites() if isinstance(getattr(p, a), LoRALinear)}

    def has_adapters(self) -> bool:
        return bool(self.adapters())

    # -- forward ----------------------------------------------------------
    def prompt_tokens(self, prompt: torch.Tensor) -> torch.Tensor:
        # B x d x N -> B x T x d by mean-pooling contiguous stretches of N
        return F.adaptive_avg_pool1d(prompt, self.num_prompt_tokens).transpose(1, 2)

    def forward(self, fused: torch.Tensor, prompt: torch.Tensor, out_size: tuple[int, int] | None = None
                ) -> PredictedMask:
        if fused.ndim != 4 or fused.shape[1] != self.dim:
            raise ValueError(f"fused features must be B x {self.dim} x H' x W', got {tuple(fused.shape)}")
        if prompt.ndim != 3 or prompt.shape[1] != self.dim:
            raise ValueError(f"prompt must be B x {self.dim} x N, got {tuple(prompt.shape)}")
        b, c, h, w = fused.shape
        tokens = torch.cat([self.output_token.expand(b, 1, c), self.prompt_tokens(prompt)], dim=1)
        image = fused.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens, image = block(tokens, image)
        feats = self.upscale(image.transpose(1, 2).reshape(b, c, h, w))
        kernel = self.hyper(tokens[:, 0])
        logits = torch.einsum("bc,bchw->bhw", kernel, feats)
        if out_size is not None and tuple(logits.shape[-2:]) != tuple(out_size):
            logits = F.interpolate(logits[:, None], size=out_size, mode="bilinear", align_corners=False)[:, 0]
        return PredictedMask(logits=logits)


def decode(fused, prompt, params: MaskDecoder, out_size: tuple[int, int] | None = None) -> PredictedMask:
    # accepts raw tensors or the FusedFeature / PromptEmbedding wrappers
    values = fused if isinstance(fused, torch.Tensor) else fused.values
    prompt_values = prompt if isinstance(prompt, torch.Tensor) else prompt.values
    return params(values, prompt_values, out_size)


def wrap_lora(params: MaskDecoder, cfg: LoRAConfig) -> MaskDecoder:
    """Attach adapters to every linear map of the targeted kinds; freeze the rest.

    Mutates and returns ``params``.
    """
    if not cfg.targets:
        raise ValueError("LoRA targets must be non-empty")
    sites = [s for s in params.linear_sites() if s[3] in cfg.targets]
    for name, parent, attr, _ in sites:
        lin = getattr(parent, attr)
        if isinstance(lin, LoRALinear):
            raise ValueError(f"{name} already carries an adapter")
        d_out, d_in = lin.weight.shape
        if cfg.rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {cfg.rank} exceeds min dims of {name} ({d_in}, {d_out})")
    for p in params.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(cfg.seed)
    for name, parent, attr, _ in sites:
        setattr(parent, attr, LoRALinear(getattr(parent, attr), cfg.rank, float(cfg.alpha), gen))
    return params


def merge_lora(params: MaskDecoder) -> MaskDecoder:
    """Fold every adapter into its base weight and drop it. Mutates ``params``."""
    wrapped = [(p, a) for _, p, a, _ in params.linear_sites() if isinstance(getattr(p, a), LoRALinear)]
    if not wrapped:
        raise ValueError("no LoRA adapters to merge")
    for parent, attr in wrapped:
        setattr(parent, attr, getattr(parent, attr).merged())
    return params


def adapter_parameter_count(params: MaskDecoder) -> int:
    return sum(a.adapter_parameter_count() for a in params.adapters().values())


def trainable_parameters(params: MaskDecoder) -> list[nn.Parameter]:
    return [p for p in params.parameters() if p.requires_grad]
