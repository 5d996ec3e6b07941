"""Dice + binary cross-entropy objective, poly schedule, and the head training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .base import BaseSegmentor, TrainingDiverged
from .decoder import LoRAConfig
from .fusion import pretrain_encoder, TinyEncoder, freeze
from .metrics import ComponentEvalConfig, EvalReport
from .pipeline import ModelConfig, PipelineBundle, Scene, batch_evaluate

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    max_iter: int = 2000
    batch_size: int = 8
    seed: int = 0
    freeze_base: bool = True
    freeze_encoder: bool = True
    lora: LoRAConfig = LoRAConfig()
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (dice, bce)
    betas: tuple[float, float] = (0.9, 0.999)
    targets: str = "all"
    log_every: int = 10
    val_every: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.lora, dict):
            object.__setattr__(self, "lora", LoRAConfig(**self.lora))
        object.__setattr__(self, "loss_weights", tuple(float(v) for v in self.loss_weights))
        object.__setattr__(self, "betas", tuple(float(v) for v in self.betas))
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` over all elements."""
    p = torch.as_tensor(probabilities)
    t = torch.as_tensor(target).to(p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"probabilities {tuple(p.shape)} and target {tuple(t.shape)} differ")
    return 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits, computed as ``softplus(x) - t x``."""
    x = torch.as_tensor(logits)
    t = torch.as_tensor(target).to(x.dtype)
    if x.shape != t.shape:
        raise ValueError(f"logits {tuple(x.shape)} and target {tuple(t.shape)} differ")
    return (F.softplus(x) - t * x).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, weights: tuple[float, float]):
    """Per-sample Dice averaged over the batch plus pixel-mean BCE.

    Returns ``(total, dice, bce)``.
    """
    prob = torch.sigmoid(logits)
    dice = torch.stack([dice_loss(p, t) for p, t in zip(prob, target)]).mean()
    bce = bce_loss(logits, target)
    return weights[0] * dice + weights[1] * bce, dice, bce


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.lr0 * (1.0 - iteration / cfg.max_iter)


@dataclass
class SotaTrainResult:
    bundle: PipelineBundle
    curve: list[tuple[int, float]] = field(default_factory=list)
    val_reports: list[tuple[int, EvalReport]] = field(default_factory=list)


def _stack(samples, targets: str):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    target = torch.from_numpy(np.stack([s.training_target(targets) for s in samples]).astype(np.float32))
    return images, target


def _cat_scenes(parts: list[Scene]) -> Scene:
    return Scene(*(torch.cat([getattr(p, f) for p in parts]) for f in Scene.__dataclass_fields__))


def _index_scene(scene: Scene, idx: torch.Tensor) -> Scene:
    return Scene(*(getattr(scene, f)[idx] for f in Scene.__dataclass_fields__))


def train_sota(dataset, base: BaseSegmentor, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(),
               val_dataset=None, eval_cfg: ComponentEvalConfig = ComponentEvalConfig()) -> SotaTrainResult:
    """Train fusion block, prompt projections and decoder (adapters or full) end to end.

    With the base segmentor and encoder frozen their outputs are computed once
    and reused; this is exact because frozen stages are deterministic.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    samples = list(dataset)
    images, target = _stack(samples, cfg.targets)

    torch.manual_seed(cfg.seed)
    encoder = TinyEncoder(model_cfg.feature_dim, model_cfg.downsample)
    if model_cfg.encoder_pretrain_steps > 0:
        pretrain_encoder(encoder, images, model_cfg.encoder_pretrain_steps, seed=cfg.seed)
    bundle = PipelineBundle.build(base, model_cfg, cfg.lora, encoder=encoder)
    if cfg.freeze_base:
        freeze(bundle.base)

    params = [p for p in bundle.head.parameters() if p.requires_grad]
    if not cfg.freeze_encoder:
        for p in bundle.encoder.parameters():
            p.requires_grad_(True)
        params += list(bundle.encoder.parameters())
    if not cfg.freeze_base:
        for p in bundle.base.parameters():
            p.requires_grad_(True)
        params += list(bundle.base.parameters())
    cached = cfg.freeze_base and cfg.freeze_encoder
    scene = None
    if cached:
        scene = _cat_scenes([bundle.frozen_stage(images[i:i + 32]) for i in range(0, len(samples), 32)])

    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.betas)
    gen = torch.Generator().manual_seed(cfg.seed)
    result = SotaTrainResult(bundle=bundle)
    n = len(samples)
    order = torch.randperm(n, generator=gen)
    cursor = 0
    last_good = copy.deepcopy(bundle.head.state_dict())
    bundle.head.train()
    for it in range(cfg.max_iter):
        if cursor + cfg.batch_size > n:
            order = torch.randperm(n, generator=gen)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        if cached:
            batch = _index_scene(scene, idx)
        else:
            batch = _differentiable_stage(bundle, images[idx])
        mask, _, _ = bundle.head(batch.features, batch.anomaly, batch.gated)
        loss, dice, bce = combined_loss(mask.logits, target[idx], cfg.loss_weights)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", last_good_state=last_good, step=it)
        for group in opt.param_groups:
            group["lr"] = poly_lr(it, cfg)
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.max_iter - 1:
            result.curve.append((it, float(loss.detach())))
            last_good = copy.deepcopy(bundle.head.state_dict())
        if val_dataset is not None and cfg.val_every and (it + 1) % cfg.val_every == 0:
            result.val_reports.append((it + 1, batch_evaluate(val_dataset, bundle, eval_cfg, targets=cfg.targets)))
            bundle.head.train()
    bundle.head.eval()
    freeze(bundle.base)
    freeze(bundle.encoder)
    return result


def _differentiable_stage(bundle: PipelineBundle, images: torch.Tensor) -> Scene:
    from .base import ood_score
    from .prompt import extract_road_mask, gate, refine_mask

    logits = bundle.base(images)
    anomaly = ood_score(logits, bundle.cfg.normalization).values
    road = extract_road_mask(logits.detach())
    refined = refine_mask(road, bundle.cfg.morphology)
    gated = gate(anomaly, refined)
    features = bundle.encoder(images)
    return Scene(logits, anomaly, road, refined, gated, features)
