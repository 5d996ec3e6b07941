"""Closed-set base segmentor and the inlier-confidence anomaly score.

The segmentor is a small U-Net standing in for a mask-classification model.
Only its logits matter downstream: :func:`ood_score` turns them into a
per-pixel anomaly map, and :func:`extract_road_mask` (in ``prompt``) reads
the road class off the argmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

NORMALIZATIONS = ("sigmoid", "tanh", "softmax")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the last good state."""

    def __init__(self, message: str, last_good_state: dict | None = None, step: int = -1):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step


@dataclass
class AnomalyMap:
    values: torch.Tensor  # [0,1], per-image min-max of raw_values
    raw_values: torch.Tensor


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.GELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.GELU(),
    )


class BaseSegmentor(nn.Module):
    """Encoder-decoder convnet with four stride-2 stages and skip connections."""

    def __init__(self, num_classes: int = 6, widths: Sequence[int] = (16, 32, 48, 64, 96)):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("widths needs one entry per resolution level (5)")
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        w = self.widths
        self.stem = _block(3, w[0])
        self.down = nn.ModuleList(_block(w[i], w[i + 1]) for i in range(4))
        self.up = nn.ModuleList(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in reversed(range(4)))
        self.fuse = nn.ModuleList(_block(2 * w[i], w[i]) for i in reversed(range(4)))
        self.head = nn.Conv2d(w[0], num_classes, 1)

    @property
    def stride(self) -> int:
        return 16

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W image batch, got {tuple(x.shape)}")
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ValueError(f"image dims {tuple(x.shape[-2:])} must be divisible by {self.stride}")
        skips = [self.stem(x)]
        h = skips[0]
        for block in self.down:
            h = block(F.avg_pool2d(h, 2))
            skips.append(h)
        h = skips.pop()
        for up, fuse in zip(self.up, self.fuse):
            h = fuse(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


def base_forward(image, model: BaseSegmentor) -> torch.Tensor:
    """C x H x W (or B x C x H x W) logits for an image (batch) in eval mode."""
    x = torch.as_tensor(image, dtype=torch.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    model.train(was_training)
    return out[0] if single else out


def ood_score(logits, kind: str = "sigmoid") -> AnomalyMap:
    """Anomaly map ``1 - sum_k norm(logit_k)`` with per-image min-max rescaling.

    Accepts C x H x W or B x C x H x W. Constant maps (span <= FLAT_SPAN)
    rescale to zeros. Note
    that ``kind="softmax"`` makes the class sum identically 1, so the raw map
    is constant zero.
    """
    y = torch.as_tensor(logits)
    if not torch.isfinite(y).all():
        raise ValueError("logits must be finite")
    if kind == "sigmoid":
        conf = torch.sigmoid(y)
    elif kind == "tanh":
        conf = torch.tanh(y)
    elif kind == "softmax":
        conf = torch.softmax(y, dim=-3)
    else:
        raise ValueError(f"unknown normalization {kind!r}; expected one of {NORMALIZATIONS}")
    raw = 1.0 - conf.sum(dim=-3)
    return AnomalyMap(values=minmax_normalize(raw), raw_values=raw)


# spans at or below this are float rounding noise and count as a constant map
FLAT_SPAN = 1e-6


def minmax_normalize(raw: torch.Tensor) -> torch.Tensor:
    flat = raw.reshape(*raw.shape[:-2], -1)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    span = hi - lo
    varied = span > FLAT_SPAN
    safe = torch.where(varied, span, torch.ones_like(span))
    return torch.where(varied, (raw - lo) / safe, torch.zeros_like(raw))


def oracle_segmentor(
    sample, confusion_rate: float = 0.0, seed: int = 0, num_classes: int | None = None, margin: float = 10.0
) -> torch.Tensor:
    """Test double: +margin at the true class, -margin elsewhere.

    A ``confusion_rate`` fraction of inlier pixels has its positive logit moved
    to a different class; OOD pixels get uniformly low logits.
    """
    if not 0.0 <= confusion_rate < 1.0:
        raise ValueError("confusion_rate must lie in [0, 1)")
    labels = np.asarray(sample.class_labels, dtype=np.int64)
    c = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    if c <= labels.max():
        raise ValueError("num_classes smaller than the labels present")
    return _oracle_logits(labels, np.asarray(sample.ood_mask, bool), c, confusion_rate, seed, margin)


def _oracle_logits(labels, ood, num_classes, confusion_rate, seed, margin):
    rng = np.random.default_rng(seed)
    target = labels.copy()
    flip = rng.uniform(size=labels.shape) < confusion_rate
    shift = rng.integers(1, num_classes, size=labels.shape)
    target[flip] = (labels[flip] + shift[flip]) % num_classes
    logits = np.full((num_classes,) + labels.shape, -margin, dtype=np.float32)
    np.put_along_axis(logits, target[None], margin, axis=0)
    logits[:, ood] = -margin
    return torch.from_numpy(logits)


@dataclass
class BaseTrainConfig:
    num_classes: int = 6
    widths: tuple[int, ...] = (16, 32, 48, 64, 96)
    steps: int = 500
    batch_size: int = 8
    lr: float = 2e-3
    loss: str = "ova"  # per-class sigmoid cross-entropy, or "softmax"
    seed: int = 0
    log_every: int = 10

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if self.loss not in ("ova", "softmax"):
            raise ValueError(f"loss must be 'ova' or 'softmax', got {self.loss!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class BaseTrainResult:
    model: BaseSegmentor
    curve: list[tuple[int, float]] = field(default_factory=list)


def closed_set_loss(logits: torch.Tensor, labels: torch.Tensor, ood: torch.Tensor, kind: str) -> torch.Tensor:
    """Per-pixel cross-entropy over inlier pixels only."""
    valid = (~ood).float()
    denom = valid.sum().clamp_min(1.0)
    if kind == "softmax":
        per_pixel = F.cross_entropy(logits, labels, reduction="none")
    else:
        onehot = F.one_hot(labels, logits.shape[1]).permute(0, 3, 1, 2).float()
        per_pixel = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none").sum(dim=1)
    return (per_pixel * valid).sum() / denom


def stack_samples(samples) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    labels = torch.from_numpy(np.stack([s.class_labels for s in samples]).astype(np.int64))
    ood = torch.from_numpy(np.stack([s.ood_mask for s in samples]).astype(bool))
    return images, labels, ood


def train_base(dataset, config: BaseTrainConfig) -> BaseTrainResult:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    model = BaseSegmentor(config.num_classes, config.widths)
    result = BaseTrainResult(model=model)
    if config.steps == 0:
        return result
    images, labels, ood = stack_samples(list(dataset))
    if int(labels.max()) >= config.num_classes:
        raise ValueError("dataset labels exceed configured num_classes")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    n = images.shape[0]
    order = torch.randperm(n, generator=gen)
    cursor = 0
    model.train()
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order = torch.randperm(n, generator=gen)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        logits = model(images[idx])
        loss = closed_set_loss(logits, labels[idx], ood[idx], config.loss)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite base loss at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            result.curve.append((step, float(loss.detach())))
            log.debug("base step %d loss %.4f", step, result.curve[-1][1])
    model.eval()
    return result


def inlier_accuracy(model: BaseSegmentor, samples) -> float:
    images, labels, ood = stack_samples(samples)
    correct = total = 0
    for i in range(0, images.shape[0], 16):
        pred = base_forward(images[i:i + 16], model).argmax(dim=1)
        valid = ~ood[i:i + 16]
        correct += int((pred == labels[i:i + 16])[valid].sum())
        total += int(valid.sum())
    return correct / max(total, 1)
