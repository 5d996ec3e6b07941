"""Per-image latency of the base anomaly map against the full pipeline."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .base import base_forward, ood_score
from .pipeline import PipelineBundle


@dataclass
class TimingStats:
    median: float
    iqr: float
    n: int

    @classmethod
    def from_samples(cls, seconds) -> "TimingStats":
        s = np.asarray(seconds, dtype=np.float64)
        q1, med, q3 = np.percentile(s, [25, 50, 75])
        return cls(median=float(med), iqr=float(q3 - q1), n=int(s.size))


@dataclass
class BenchReport:
    base_only: TimingStats
    full: TimingStats
    ratio: float
    repetitions: int
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(bundle: PipelineBundle, images, repetitions: int = 3, warmup: int = 1) -> BenchReport:
    """Time each image separately through both paths, ``repetitions`` times."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    images = [torch.as_tensor(im, dtype=torch.float32) for im in images]
    if not images:
        raise ValueError("no images to benchmark")
    norm = bundle.cfg.normalization

    def base_only(im):
        return ood_score(base_forward(im, bundle.base), norm).values

    def full(im):
        return bundle.run(im)[0]

    for _ in range(warmup):
        base_only(images[0])
        full(images[0])
    times = {"base": [], "full": []}
    for _ in range(repetitions):
        for im in images:
            for key, fn in (("base", base_only), ("full", full)):
                t0 = time.perf_counter()
                fn(im)
                times[key].append(time.perf_counter() - t0)
    b = TimingStats.from_samples(times["base"])
    f = TimingStats.from_samples(times["full"])
    return BenchReport(base_only=b, full=f, ratio=f.median / b.median, repetitions=repetitions,
                       n_images=len(images))
