"""Toy-scale directional experiments and ablations.

One seed means: synthesize train/val splits, train the base segmentor,
train the head with the configured fusion and refinement, then score the
val split with the raw anomaly map and the final merged map. Ablation arms
retrain only the head against the same frozen base.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .base import BaseSegmentor, train_base
from .config import RunConfig
from .metrics import EvalReport
from .pipeline import PipelineBundle, batch_evaluate, pipeline_scores
from .synthesis import InMemoryDataset
from .training import train_sota

log = logging.getLogger(__name__)

ABLATIONS = ("additive_fusion", "no_refine")


@dataclass
class SeedResult:
    seed: int
    raw: EvalReport
    final: EvalReport
    offroad_raw: float
    offroad_final: float
    ablations: dict[str, EvalReport] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    bundle: PipelineBundle | None = field(default=None, repr=False)  # kept in memory only

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "raw": self.raw.headline(),
            "final": self.final.headline(),
            "offroad_raw": self.offroad_raw,
            "offroad_final": self.offroad_final,
            "ablations": {k: v.headline() for k, v in self.ablations.items()},
            "seconds": self.seconds,
        }


def splits(cfg: RunConfig):
    synth = cfg.synth_config()
    train = InMemoryDataset.synthesize(synth, cfg.data.train_count)
    val = InMemoryDataset.synthesize(synth, cfg.data.val_count, start=cfg.data.val_start)
    return train, val


def offroad_mean(dataset, score_fn, batch_size: int = 32) -> float:
    """Mean score over pixels that are neither road nor anomalous, pooled over the split."""
    total, count = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        batch = dataset[i:i + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in batch]))
        scores = score_fn(images).detach().cpu().numpy().astype(np.float64)
        for s, score in zip(batch, scores):
            sel = (s.road_region == 0) & (s.ood_mask == 0)
            total += float(score[sel].sum())
            count += int(sel.sum())
    return total / max(count, 1)


def _head_run(train, val, base: BaseSegmentor, cfg: RunConfig) -> tuple[PipelineBundle, EvalReport]:
    result = train_sota(train, base, cfg.train_config(), cfg.model_config())
    report = batch_evaluate(val, pipeline_scores(result.bundle, "final"), cfg.eval, targets=cfg.synth.targets)
    return result.bundle, report


def ablation_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm == "additive_fusion":
        return replace(cfg, model=replace(cfg.model, fusion="add"))
    if arm == "no_refine":
        return replace(cfg, morphology=replace(cfg.morphology, iterations=0))
    raise ValueError(f"unknown ablation arm {arm!r}")


def run_seed(cfg: RunConfig, ablations: tuple[str, ...] = ABLATIONS) -> SeedResult:
    secs = {}
    t0 = time.perf_counter()
    train, val = splits(cfg)
    base = train_base(train, cfg.base_config()).model
    secs["base"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bundle, final = _head_run(train, val, base, cfg)
    secs["head"] = time.perf_counter() - t0
    raw_fn = pipeline_scores(bundle, "raw")
    raw = batch_evaluate(val, raw_fn, cfg.eval, targets=cfg.synth.targets)
    result = SeedResult(
        seed=cfg.seed,
        raw=raw,
        final=final,
        offroad_raw=offroad_mean(val, raw_fn),
        offroad_final=offroad_mean(val, pipeline_scores(bundle, "final")),
        seconds=secs,
        bundle=bundle,
    )
    for arm in ablations:
        t0 = time.perf_counter()
        _, result.ablations[arm] = _head_run(train, val, base, ablation_config(cfg, arm))
        secs[arm] = time.perf_counter() - t0
    log.info("seed %d: %s", cfg.seed, result.to_dict())
    return result


@dataclass
class Summary:
    seeds: list[SeedResult]

    def median(self, getter) -> float:
        return float(statistics.median(getter(r) for r in self.seeds))

    def to_dict(self) -> dict:
        out = {
            "seeds": [r.to_dict() for r in self.seeds],
            "median": {
                "raw_auprc": self.median(lambda r: r.raw.auprc),
                "final_auprc": self.median(lambda r: r.final.auprc),
                "raw_fpr95": self.median(lambda r: r.raw.fpr_at_95tpr),
                "final_fpr95": self.median(lambda r: r.final.fpr_at_95tpr),
                "offroad_reduction": self.median(offroad_reduction),
            },
        }
        for arm in self.seeds[0].ablations:
            out["median"][f"{arm}_auprc"] = self.median(lambda r, a=arm: r.ablations[a].auprc)
        return out


def offroad_reduction(r: SeedResult) -> float:
    """Relative drop of the off-road mean score, final against raw."""
    if r.offroad_raw <= 0:
        return 0.0
    return 1.0 - r.offroad_final / r.offroad_raw


def run_seeds(cfg: RunConfig, seeds=(0, 1, 2), ablations: tuple[str, ...] = ABLATIONS) -> Summary:
    return Summary([run_seed(cfg.with_seed(s), ablations) for s in seeds])
