"""Pixel-level ranking metrics and component-level (sIoU / PPV / F1*) metrics.

Ranking metrics are exact sort-based computations with tied scores grouped,
so they are invariant under any strictly increasing transform of the scores.
Pixel metrics pool every pixel of a dataset; component tallies are summed
over images before F1 is formed, as the public road-anomaly benchmark does.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

DEFAULT_TP_THRESHOLDS = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))


def _pixel_input(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def _require_both(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise ValueError("ranking metric needs at least one positive and one negative")


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    s, y = _pixel_input(scores, labels)
    _require_both(y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at each distinct score, highest threshold first."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last position of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return s_sorted[last], tp[last], fp[last]


def auprc(scores, labels) -> float:
    """Average precision with step interpolation over grouped thresholds."""
    s, y = _pixel_input(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    _, tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """Smallest FPR over score thresholds whose TPR reaches ``tpr_target``."""
    s, y = _pixel_input(scores, labels)
    _require_both(y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    _, tp, fp = _threshold_counts(s, y)
    tpr = tp / n_pos
    # tpr and fpr both grow as the threshold falls: the first hit is optimal
    hit = np.nonzero(tpr >= tpr_target)[0]
    return float(fp[hit[0]] / n_neg)


# ------------------------------------------------------------ components


@dataclass
class Components:
    labels: np.ndarray  # int32 map, 0 = background, 1..n component ids
    sizes: list[int]

    def __len__(self) -> int:
        return len(self.sizes)


def connected_components(mask, connectivity: int = 8, min_size: int = 1) -> Components:
    m = np.asarray(mask).astype(bool)
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise ValueError("connectivity must be 4 or 8")
    lab, n = ndimage.label(m, structure=structure)
    if n == 0:
        return Components(labels=np.zeros(m.shape, np.int32), sizes=[])
    sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
    keep = sizes >= min_size
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[1:][keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return Components(labels=remap[lab], sizes=[int(v) for v in sizes[keep]])


@dataclass(frozen=True)
class ComponentEvalConfig:
    seg_threshold: float = 0.5
    connectivity: int = 8
    tp_thresholds: tuple[float, ...] = DEFAULT_TP_THRESHOLDS
    min_component_size: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "tp_thresholds", tuple(float(t) for t in self.tp_thresholds))
        t = self.tp_thresholds
        if not t or any(not 0.0 < v < 1.0 for v in t):
            raise ValueError("tp_thresholds must be non-empty and inside (0, 1)")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("tp_thresholds must be strictly increasing")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.min_component_size < 1:
            raise ValueError("min_component_size must be >= 1")


@dataclass
class ComponentTally:
    """Per-image component bookkeeping; tallies are indexed like tp_thresholds."""

    siou: list[float] = field(default_factory=list)
    ppv: list[float] = field(default_factory=list)
    tp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)

    @property
    def n_gt(self) -> int:
        return len(self.siou)

    @property
    def n_pred(self) -> int:
        return len(self.ppv)


def component_tally(score_map, gt_mask, cfg: ComponentEvalConfig = ComponentEvalConfig()) -> ComponentTally:
    score = np.asarray(score_map, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if score.shape != gt.shape:
        raise ValueError(f"score map {score.shape} and gt {gt.shape} differ")
    pred = connected_components(score >= cfg.seg_threshold, cfg.connectivity, cfg.min_component_size)
    truth = connected_components(gt, cfg.connectivity, cfg.min_component_size)
    gt_any = truth.labels > 0

    tally = ComponentTally()
    for k in range(1, len(truth) + 1):
        comp = truth.labels == k
        hit_ids = np.unique(pred.labels[comp])
        hit_ids = hit_ids[hit_ids > 0]
        pred_union = np.isin(pred.labels, hit_ids)
        others = gt_any & ~comp
        inter = np.count_nonzero(comp & pred_union)
        union = np.count_nonzero(comp | (pred_union & ~others))
        tally.siou.append(inter / union)
    for j in range(1, len(pred) + 1):
        comp = pred.labels == j
        tally.ppv.append(np.count_nonzero(comp & gt_any) / np.count_nonzero(comp))
    for tau in cfg.tp_thresholds:
        tp = sum(v > tau for v in tally.siou)
        tally.tp.append(tp)
        tally.fn.append(tally.n_gt - tp)
        tally.fp.append(sum(v <= tau for v in tally.ppv))
    return tally


@dataclass
class ComponentSummary:
    siou_mean: float
    ppv_mean: float
    f1_star: float
    f1_per_threshold: list[float]
    empty_both: bool


def summarize_tallies(tallies: Sequence[ComponentTally], cfg: ComponentEvalConfig) -> ComponentSummary:
    """Pool tallies and form sIoU/PPV means and F1*.

    Conventions for empty sides: with no GT and no predicted components at
    all, F1 is 1 at every threshold and both means are 1 (flagged as
    ``empty_both``). Otherwise the mean over an empty side is 0.
    """
    siou = [v for t in tallies for v in t.siou]
    ppv = [v for t in tallies for v in t.ppv]
    empty_both = not siou and not ppv
    if empty_both:
        n = len(cfg.tp_thresholds)
        return ComponentSummary(1.0, 1.0, 1.0, [1.0] * n, True)
    f1 = []
    for i in range(len(cfg.tp_thresholds)):
        tp = sum(t.tp[i] for t in tallies)
        fn = sum(t.fn[i] for t in tallies)
        fp = sum(t.fp[i] for t in tallies)
        denom = 2 * tp + fn + fp
        f1.append(2 * tp / denom if denom else 1.0)
    return ComponentSummary(
        siou_mean=math.fsum(siou) / len(siou) if siou else 0.0,
        ppv_mean=math.fsum(ppv) / len(ppv) if ppv else 0.0,
        f1_star=math.fsum(f1) / len(f1),
        f1_per_threshold=f1,
        empty_both=False,
    )


def component_metrics(score_map, gt_mask, cfg: ComponentEvalConfig = ComponentEvalConfig()):
    """Single-image ``(siou_mean, ppv_mean, f1_star, tally)``."""
    tally = component_tally(score_map, gt_mask, cfg)
    summary = summarize_tallies([tally], cfg)
    return summary.siou_mean, summary.ppv_mean, summary.f1_star, tally


# ------------------------------------------------------------ reports


@dataclass
class EvalReport:
    auroc: float
    auprc: float
    fpr_at_95tpr: float
    siou_mean: float
    ppv_mean: float
    f1_star: float
    f1_per_threshold: list[float]
    tp_thresholds: list[float]
    n_images: int
    n_pixels: int
    flags: list[str] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "fpr_at_95tpr": self.fpr_at_95tpr,
            "siou_mean": self.siou_mean,
            "ppv_mean": self.ppv_mean,
            "f1_star": self.f1_star,
            "f1_per_threshold": self.f1_per_threshold,
            "tp_thresholds": self.tp_thresholds,
            "n_images": self.n_images,
            "n_pixels": self.n_pixels,
            "flags": self.flags,
            "per_image": self.per_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def headline(self) -> dict[str, float]:
        return {
            "AuROC": self.auroc,
            "AuPRC": self.auprc,
            "FPR@95": self.fpr_at_95tpr,
            "sIoU": self.siou_mean,
            "PPV": self.ppv_mean,
            "F1*": self.f1_star,
        }


def reports_table(rows: Iterable[tuple[str, EvalReport]]) -> str:
    """CSV with one row per method, metric columns in percent."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Method", "AuPRC", "FPR@95", "AuROC", "sIoU", "PPV", "F1*"])
    for name, rep in rows:
        writer.writerow(
            [name]
            + [f"{100.0 * v:.2f}" for v in (rep.auprc, rep.fpr_at_95tpr, rep.auroc, rep.siou_mean, rep.ppv_mean, rep.f1_star)]
        )
    return buf.getvalue()


class MetricAccumulator:
    """Collects per-sample scores and tallies; the final fold sorts by sample id.

    Samples may be added in any order (or from several workers); the report
    depends only on the set of (id, scores, labels) added.
    """

    def __init__(self, cfg: ComponentEvalConfig = ComponentEvalConfig()):
        self.cfg = cfg
        self._pixels: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._tallies: dict[int, ComponentTally] = {}

    def add(self, sample_id: int, score_map, gt_mask) -> None:
        if sample_id in self._pixels:
            raise ValueError(f"sample {sample_id} added twice")
        score = np.asarray(score_map, dtype=np.float64)
        gt = np.asarray(gt_mask).astype(np.uint8)
        self._pixels[sample_id] = (score.ravel(), gt.ravel())
        self._tallies[sample_id] = component_tally(score, gt, self.cfg)

    def __len__(self) -> int:
        return len(self._pixels)

    def report(self) -> EvalReport:
        if not self._pixels:
            raise ValueError("no samples accumulated")
        ids = sorted(self._pixels)
        scores = np.concatenate([self._pixels[i][0] for i in ids])
        labels = np.concatenate([self._pixels[i][1] for i in ids])
        tallies = [self._tallies[i] for i in ids]
        summary = summarize_tallies(tallies, self.cfg)
        flags = ["empty_both"] if summary.empty_both else []
        per_image = [
            {
                "id": i,
                "n_gt": t.n_gt,
                "n_pred": t.n_pred,
                "tp": t.tp,
                "fn": t.fn,
                "fp": t.fp,
                "siou": t.siou,
                "ppv": t.ppv,
            }
            for i, t in zip(ids, tallies)
        ]
        return EvalReport(
            auroc=auroc(scores, labels),
            auprc=auprc(scores, labels),
            fpr_at_95tpr=fpr_at_tpr(scores, labels, 0.95),
            siou_mean=summary.siou_mean,
            ppv_mean=summary.ppv_mean,
            f1_star=summary.f1_star,
            f1_per_threshold=summary.f1_per_threshold,
            tp_thresholds=list(self.cfg.tp_thresholds),
            n_images=len(ids),
            n_pixels=int(scores.size),
            flags=flags,
            per_image=per_image,
        )
