"""Full prediction path and dataset evaluation.

    image -> base segmentor -> logits -> anomaly map
          -> encoder -> features --+
    anomaly ------------------------> fusion block -> fused features -+
    logits -> road mask -> refine -> gate(anomaly) -> cross-attention -> prompt
    fused + prompt -> mask decoder -> merge with anomaly map -> final map
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from . import persist
from .base import BaseSegmentor, base_forward, ood_score
from .decoder import LoRAConfig, MaskDecoder, merge_lora, wrap_lora
from .fusion import FusedFeature, SemanticFusionBlock, TinyEncoder, freeze
from .metrics import ComponentEvalConfig, EvalReport, MetricAccumulator
from .prompt import (
    CrossAttentionPrompt,
    MorphologyConfig,
    PromptEmbedding,
    area_downsample,
    extract_road_mask,
    gate,
    refine_mask,
)

log = logging.getLogger(__name__)

MERGE_MODES = ("average", "max", "decoder_only")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    downsample: int = 4
    fusion: str = "sfb"
    encoder_pretrain_steps: int = 0
    decoder_depth: int = 2
    decoder_heads: int = 4
    num_prompt_tokens: int = 8
    normalization: str = "sigmoid"
    merge_mode: str = "average"
    morphology: MorphologyConfig = MorphologyConfig()
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.morphology, dict):
            object.__setattr__(self, "morphology", MorphologyConfig(**self.morphology))
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.downsample != 4:
            raise ValueError("only downsample factor 4 is supported")

    def to_dict(self) -> dict:
        return asdict(self)


class SotaHead(nn.Module):
    """The trainable part: fusion block, prompt cross-attention and mask decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = SemanticFusionBlock(cfg.feature_dim, cfg.fusion)
        self.prompt = CrossAttentionPrompt(cfg.feature_dim)
        self.decoder = MaskDecoder(cfg.feature_dim, cfg.decoder_depth, cfg.decoder_heads,
                                   num_prompt_tokens=cfg.num_prompt_tokens)

    def forward(self, features: torch.Tensor, anomaly: torch.Tensor, gated: torch.Tensor):
        size = tuple(anomaly.shape[-2:])
        fused = self.fusion(features, anomaly)
        ds = self.cfg.downsample
        prompt = self.prompt(area_downsample(gated, ds), area_downsample(anomaly, ds))
        mask = self.decoder(fused.values, prompt.values, size)
        return mask, fused, prompt


def merge(decoder_prob: torch.Tensor, anomaly: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "average":
        return 0.5 * (decoder_prob + anomaly)
    if mode == "max":
        return torch.maximum(decoder_prob, anomaly)
    if mode == "decoder_only":
        return decoder_prob
    raise ValueError(f"unknown merge mode {mode!r}")


@dataclass
class Scene:
    """Frozen-stage outputs for a batch; everything upstream of the trainable head."""

    logits: torch.Tensor
    anomaly: torch.Tensor
    road: torch.Tensor
    refined: torch.Tensor
    gated: torch.Tensor
    features: torch.Tensor


class PipelineBundle:
    def __init__(self, base: BaseSegmentor, encoder: TinyEncoder, head: SotaHead, cfg: ModelConfig):
        self.base = base
        self.encoder = encoder
        self.head = head
        self.cfg = cfg
        self.validate()

    def validate(self) -> None:
        d = self.cfg.feature_dim
        if self.encoder.feature_dim != d:
            raise ValueError(f"encoder width {self.encoder.feature_dim} != feature_dim {d}")
        if self.head.fusion.feature_dim != d or self.head.decoder.dim != d:
            raise ValueError("fusion/decoder width does not match feature_dim")
        if self.head.prompt.embed_dim != self.head.decoder.dim:
            raise ValueError("prompt embedding dim must equal decoder width")

    @classmethod
    def build(cls, base: BaseSegmentor, cfg: ModelConfig, lora: LoRAConfig | None = None,
              encoder: TinyEncoder | None = None) -> "PipelineBundle":
        torch.manual_seed(cfg.seed)
        if encoder is None:
            encoder = TinyEncoder(cfg.feature_dim, cfg.downsample)
        freeze(encoder)
        head = SotaHead(cfg)
        if lora is not None and lora.finetune == "lora":
            wrap_lora(head.decoder, lora)
        return cls(base, encoder, head, cfg)

    # -- forward ----------------------------------------------------------
    @torch.no_grad()
    def frozen_stage(self, images: torch.Tensor) -> Scene:
        logits = base_forward(images, self.base)
        anomaly = ood_score(logits, self.cfg.normalization).values
        road = extract_road_mask(logits)
        refined = refine_mask(road, self.cfg.morphology)
        gated = gate(anomaly, refined)
        self.encoder.eval()
        features = self.encoder(images)
        return Scene(logits, anomaly, road, refined, gated, features)

    def run(self, images: torch.Tensor) -> tuple[torch.Tensor, dict]:
        images = torch.as_tensor(images, dtype=torch.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
        scene = self.frozen_stage(images)
        was_training = self.head.training
        self.head.eval()
        with torch.no_grad():
            mask, fused, prompt = self.head(scene.features, scene.anomaly, scene.gated)
        self.head.train(was_training)
        prob = mask.probabilities
        final = merge(prob, scene.anomaly, self.cfg.merge_mode)
        inter = {
            "anomaly": scene.anomaly,
            "road_mask": scene.road,
            "refined_mask": scene.refined,
            "gated": scene.gated,
            "gate": fused.gate,
            "attention": prompt.attention,
            "decoder_prob": prob,
            "logits": scene.logits,
        }
        if single:
            final = final[0]
            inter = {k: (v[0] if v is not None else None) for k, v in inter.items()}
        return final, inter

    # -- persistence ------------------------------------------------------
    def state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        weights, adapters = {}, {}
        for prefix, module in (("base", self.base), ("encoder", self.encoder), ("head", self.head)):
            for name, t in module.state_dict().items():
                key = f"{prefix}.{name}"
                arr = t.detach().cpu().numpy().astype(np.float32)
                (adapters if "lora_" in name else weights)[key] = arr
        return weights, adapters

    def meta(self, step: int = 0, lora: LoRAConfig | None = None) -> dict:
        return {
            "component": "pipeline",
            "step": step,
            "model": _jsonable(self.cfg.to_dict()),
            "base": {"num_classes": self.base.num_classes, "widths": list(self.base.widths)},
            "lora": _jsonable(asdict(lora)) if lora is not None else None,
            "config_hash": persist.config_hash(_jsonable(self.cfg.to_dict())),
        }

    def save(self, path, step: int = 0, lora: LoRAConfig | None = None) -> None:
        weights, adapters = self.state()
        persist.save_checkpoint(path, weights, self.meta(step, lora), adapters)

    @classmethod
    def load(cls, path) -> "PipelineBundle":
        weights, adapters, meta = persist.load_checkpoint(path)
        cfg = ModelConfig(**meta["model"])
        base = BaseSegmentor(meta["base"]["num_classes"], meta["base"]["widths"])
        lora = LoRAConfig(**meta["lora"]) if meta.get("lora") else None
        bundle = cls.build(base, cfg, lora if adapters else None)
        tensors = {k: torch.from_numpy(v) for k, v in {**weights, **adapters}.items()}
        for prefix, module in (("base", bundle.base), ("encoder", bundle.encoder), ("head", bundle.head)):
            sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sub, strict=True)
        bundle.base.eval()
        bundle.head.eval()
        bundle.validate()
        return bundle

    def merged(self) -> "PipelineBundle":
        if self.head.decoder.has_adapters():
            merge_lora(self.head.decoder)
        return self


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_base(path, model: BaseSegmentor, step: int = 0, extra: dict | None = None) -> None:
    weights = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    arch = {"num_classes": model.num_classes, "widths": list(model.widths)}
    meta = {"component": "base", "step": step, "base": arch, "config_hash": persist.config_hash(arch)}
    meta.update(extra or {})
    persist.save_checkpoint(path, weights, meta)


def load_base(path) -> BaseSegmentor:
    weights, _, meta = persist.load_checkpoint(path)
    if meta.get("component") != "base":
        raise persist.FormatError(f"{path}: not a base segmentor checkpoint")
    model = BaseSegmentor(meta["base"]["num_classes"], meta["base"]["widths"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in weights.items()}, strict=True)
    return model.eval()


def predict(image, bundle: PipelineBundle) -> tuple[torch.Tensor, dict]:
    """Final anomaly map (H x W in [0,1]) and the diagnostic intermediates."""
    return bundle.run(image)


# ---------------------------------------------------------------- evaluation

ScoreFn = Callable[[torch.Tensor], torch.Tensor]


def pipeline_scores(bundle: PipelineBundle, source: str = "final") -> ScoreFn:
    """Batched score function: final map, raw anomaly map, or decoder probability."""

    def fn(images: torch.Tensor) -> torch.Tensor:
        if source == "raw":
            return ood_score(base_forward(images, bundle.base), bundle.cfg.normalization).values
        final, inter = bundle.run(images)
        if source == "final":
            return final
        if source == "decoder":
            return inter["decoder_prob"]
        raise ValueError(f"unknown score source {source!r}")

    return fn


def batch_evaluate(dataset, score_fn: ScoreFn | PipelineBundle, metrics_cfg: ComponentEvalConfig = ComponentEvalConfig(),
                   batch_size: int = 16, on_missing: str = "raise", targets: str = "all") -> EvalReport:
    """Pool pixel scores and component tallies over a dataset.

    ``on_missing="skip"`` continues past samples whose files are missing and
    records them in the report flags.
    """
    if isinstance(score_fn, PipelineBundle):
        score_fn = pipeline_scores(score_fn)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    acc = MetricAccumulator(metrics_cfg)
    skipped: list[int] = []
    for start in range(0, len(dataset), batch_size):
        batch = []
        for i in range(start, min(start + batch_size, len(dataset))):
            try:
                batch.append(dataset[i])
            except FileNotFoundError as exc:
                if on_missing != "skip":
                    raise
                log.warning("skipping sample %d: %s", i, exc)
                skipped.append(i)
        if not batch:
            continue
        images = torch.from_numpy(np.stack([s.image for s in batch]))
        scores = score_fn(images).detach().cpu().numpy()
        for sample, score in zip(batch, scores):
            acc.add(sample.index, score, sample.training_target(targets))
    report = acc.report()
    if skipped:
        report.flags.append(f"skipped:{','.join(map(str, skipped))}")
    return report
