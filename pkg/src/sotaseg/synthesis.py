"""Procedural road scenes with pasted out-of-distribution blobs.

Every sample is a pure function of ``(config.seed, index)``: the random stream
for a sample is a Philox generator keyed by both numbers, so samples can be
produced in any order or in parallel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .persist import unit_float

ROAD_CLASS = 0
MANIFEST_VERSION = 1

# Base colours for inlier classes; road first. Classes beyond the table get
# colours from a fixed generator so the palette never depends on the seed.
_PALETTE = np.array(
    [
        [0.42, 0.40, 0.43],  # road
        [0.20, 0.52, 0.18],  # vegetation
        [0.62, 0.45, 0.33],  # building
        [0.72, 0.70, 0.62],  # sidewalk
        [0.15, 0.22, 0.55],  # vehicle
        [0.55, 0.72, 0.90],  # sky
    ]
)


def class_palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(_PALETTE):
        pal = _PALETTE[:num_classes].copy()
        # keep sky-blue on the last class
        pal[-1] = _PALETTE[-1] if num_classes > 2 else pal[-1]
        return pal
    extra = np.random.default_rng(12345).uniform(0.1, 0.9, size=(num_classes - len(_PALETTE), 3))
    pal = np.concatenate([_PALETTE[:-1], extra, _PALETTE[-1:]], axis=0)
    return pal


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (256, 256)
    num_classes: int = 6
    ood_paste_probability: float = 0.9
    objects_per_scene: tuple[int, int] = (1, 3)
    on_road_fraction: float = 0.6
    noise_level: float = 0.04
    inlier_rects: tuple[int, int] = (0, 3)
    downsample: int = 4
    targets: str = "all"
    seed: int = 0

    def __post_init__(self) -> None:
        # YAML/JSON hand us lists; normalise to tuples so the config stays hashable.
        for name in ("image_size", "objects_per_scene", "inlier_rects"):
            value = getattr(self, name)
            if isinstance(value, int):
                value = (value, value)
            object.__setattr__(self, name, tuple(int(v) for v in value))
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if h % self.downsample or w % self.downsample:
            raise ValueError(
                f"image_size {self.image_size} not divisible by downsample factor {self.downsample}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.ood_paste_probability <= 1.0:
            raise ValueError("ood_paste_probability must lie in [0, 1]")
        if not 0.0 <= self.on_road_fraction <= 1.0:
            raise ValueError("on_road_fraction must lie in [0, 1]")
        lo, hi = self.objects_per_scene
        if lo < 1 or hi < lo:
            raise ValueError(f"objects_per_scene must satisfy 1 <= lo <= hi, got {self.objects_per_scene}")
        lo, hi = self.inlier_rects
        if lo < 0 or hi < lo:
            raise ValueError(f"inlier_rects must satisfy 0 <= lo <= hi, got {self.inlier_rects}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.targets not in ("all", "on_road_only"):
            raise ValueError(f"targets must be 'all' or 'on_road_only', got {self.targets!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SceneSample:
    """One synthetic scene.

    ``class_labels`` keeps the occluded inlier class under pasted blobs, so
    closed-set labels never encode the anomaly; OOD supervision lives only in
    ``ood_mask``.
    """

    image: np.ndarray  # float32, 3 x H x W, multiples of 1/255
    class_labels: np.ndarray  # uint8, H x W
    ood_mask: np.ndarray  # uint8 {0,1}, H x W
    road_region: np.ndarray  # uint8 {0,1}, geometric road polygon
    on_road_object_mask: np.ndarray  # uint8 {0,1}
    ood_instances: np.ndarray  # uint8, 0 = background, i = i-th pasted blob
    index: int = 0

    def training_target(self, targets: str = "all") -> np.ndarray:
        if targets == "all":
            return self.ood_mask
        if targets == "on_road_only":
            return self.on_road_object_mask
        raise ValueError(f"unknown targets mode {targets!r}")

    def equals(self, other: "SceneSample") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("image", "class_labels", "ood_mask", "road_region", "on_road_object_mask", "ood_instances")
        )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _road_edges(h: int, w: int, horizon: int, bottom: tuple[float, float], top: tuple[float, float]):
    """Left/right road boundary (in pixel x) for every row; NaN above the horizon."""
    rows = np.arange(h, dtype=np.float64) + 0.5
    t = np.clip((rows - horizon) / max(h - horizon, 1), 0.0, 1.0)
    left = top[0] + (bottom[0] - top[0]) * t
    right = top[1] + (bottom[1] - top[1]) * t
    left[rows < horizon] = np.nan
    right[rows < horizon] = np.nan
    return left, right


def _blob_mask(h: int, w: int, cy: float, cx: float, radius: float, harmonics: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    theta = np.arctan2(dy, dx)
    r = np.full_like(theta, radius)
    for k, (amp, phase) in enumerate(harmonics, start=1):
        r = r + radius * amp * np.cos(k * theta + phase)
    return np.hypot(dy, dx) < r


def _ood_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.0, 1.0, size=3)
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(0.6, 1.6)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    if rng.uniform() < 0.5:
        pattern = np.sign(np.sin(freq * proj))
    else:
        pattern = np.sign(np.sin(freq * xx)) * np.sign(np.sin(freq * yy))
    second = rng.uniform(0.0, 1.0, size=3)
    mix = (pattern[None] + 1.0) / 2.0
    return base[:, None, None] * mix + second[:, None, None] * (1.0 - mix)


def synthesize_scene(config: SynthConfig, index: int) -> SceneSample:
    rng = sample_rng(config.seed, index)
    h, w = config.image_size
    c = config.num_classes
    palette = class_palette(c)
    sky_class = c - 1
    side_classes = list(range(1, max(2, c - 1)))  # 1..C-2, or {1} when C == 2

    horizon = int(round(h * rng.uniform(0.35, 0.45)))
    cx_top = w * rng.uniform(0.42, 0.58)
    half_top = w * rng.uniform(0.03, 0.07)
    bottom = (w * rng.uniform(0.02, 0.15), w * rng.uniform(0.85, 0.98))
    left, right = _road_edges(h, w, horizon, bottom, (cx_top - half_top, cx_top + half_top))

    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    below = (np.arange(h)[:, None] >= horizon)
    left_b = np.nan_to_num(left, nan=np.inf)[:, None]
    right_b = np.nan_to_num(right, nan=-np.inf)[:, None]
    road = below & (xs >= left_b) & (xs < right_b)

    labels = np.full((h, w), sky_class, dtype=np.uint8)
    left_class = side_classes[index % len(side_classes)]
    right_class = side_classes[(index + 1) % len(side_classes)]
    labels[below & (xs < left_b)] = left_class
    labels[below & (xs >= right_b)] = right_class
    labels[road] = ROAD_CLASS

    # inlier rectangles standing on the road
    n_rects = int(rng.integers(config.inlier_rects[0], config.inlier_rects[1] + 1))
    for j in range(n_rects):
        y1 = int(rng.integers(horizon + 1, h))
        depth = (y1 - horizon) / max(h - horizon, 1)
        rh = max(2, int(round(h * (0.04 + 0.14 * depth) * rng.uniform(0.7, 1.3))))
        rw = max(2, int(round(w * (0.05 + 0.15 * depth) * rng.uniform(0.7, 1.3))))
        row = min(y1, h - 1)
        lo, hi = left[row], right[row]
        if not np.isfinite(lo) or hi - lo <= rw + 1:
            continue
        x0 = int(rng.uniform(lo, hi - rw))
        y0 = max(horizon, y1 - rh)
        labels[y0:y1, x0:x0 + rw] = side_classes[(index + j) % len(side_classes)]

    # inlier appearance: per-sample colour jitter plus a vertical shading term
    jitter = rng.uniform(-0.05, 0.05, size=(c, 3))
    colours = np.clip(palette + jitter, 0.0, 1.0)
    image = colours[labels].transpose(2, 0, 1).astype(np.float64)
    shade = np.linspace(-0.04, 0.04, h)[None, :, None]
    image = image + shade
    image = image + config.noise_level * rng.standard_normal(size=image.shape)

    ood = np.zeros((h, w), dtype=bool)
    on_road = np.zeros((h, w), dtype=bool)
    instances = np.zeros((h, w), dtype=np.uint8)
    if rng.uniform() < config.ood_paste_probability:
        n_obj = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
        placed = 0
        for _ in range(n_obj):
            want_road = rng.uniform() < config.on_road_fraction
            blob = _place_blob(rng, h, w, horizon, left, right, road, ood, want_road)
            if blob is None:
                continue
            placed += 1
            texture = _ood_texture(rng, h, w)
            texture = texture + config.noise_level * rng.standard_normal(size=texture.shape)
            image[:, blob] = texture[:, blob]
            ood |= blob
            instances[blob] = placed
            if want_road:
                on_road |= blob

    image = np.clip(image, 0.0, 1.0)
    image = unit_float(np.round(image * 255.0).astype(np.uint8))
    return SceneSample(
        image=image,
        class_labels=labels,
        ood_mask=ood.astype(np.uint8),
        road_region=road.astype(np.uint8),
        on_road_object_mask=on_road.astype(np.uint8),
        ood_instances=instances,
        index=int(index),
    )


def _place_blob(rng, h, w, horizon, left, right, road, occupied, want_road, tries: int = 60):
    harmonics = np.stack([rng.uniform(0.0, 0.15, size=3), rng.uniform(0, 2 * np.pi, size=3)], axis=1)
    size = rng.uniform(0.05, 0.11)
    reach = 1.0 + harmonics[:, 0].sum()
    for _ in range(tries):
        cy = rng.uniform(horizon + 1, h - 1)
        depth = (cy - horizon) / max(h - horizon, 1)
        radius = max(1.5, size * min(h, w) * (0.4 + 0.6 * depth))
        margin = radius * reach + 1.0
        if cy - margin < horizon or cy + margin > h:
            continue
        row = int(cy)
        lo, hi = left[row], right[row]
        if want_road:
            if hi - lo <= 2 * margin:
                continue
            cx = rng.uniform(lo + margin, hi - margin)
        else:
            spans = []
            if lo - margin > margin:
                spans.append((margin, lo - margin))
            if w - margin > hi + margin:
                spans.append((hi + margin, w - margin))
            if not spans:
                continue
            a, b = spans[int(rng.integers(len(spans)))]
            cx = rng.uniform(a, b)
        blob = _blob_mask(h, w, cy, cx, radius, harmonics)
        if not blob.any():
            continue
        # keep pasted objects disjoint so each one stays a separate component
        grown = blob.copy()
        grown[1:] |= blob[:-1]
        grown[:-1] |= blob[1:]
        grown[:, 1:] |= blob[:, :-1]
        grown[:, :-1] |= blob[:, 1:]
        if (grown & occupied).any():
            continue
        if want_road and not road[blob].all():
            continue
        if not want_road and road[blob].any():
            continue
        return blob
    return None


def iter_scenes(config: SynthConfig, count: int, start: int = 0) -> Iterator[SceneSample]:
    for i in range(start, start + count):
        yield synthesize_scene(config, i)


@dataclass
class Manifest:
    config: SynthConfig
    count: int
    samples: list[dict] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config.to_dict(),
            "count": self.count,
            "samples": self.samples,
        }


SAMPLE_FILES = {
    "image": "images",
    "class_labels": "labels",
    "ood_mask": "ood",
    "road_region": "road",
    "on_road_object_mask": "onroad",
    "ood_instances": "instances",
}


def synthesize_dataset(config: SynthConfig, count: int, out_dir: str | Path, start: int = 0) -> Manifest:
    from . import persist

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in iter_scenes(config, count, start=start):
        entries.append(persist.write_sample(out, sample))
    manifest = Manifest(config=config, count=count, samples=entries)
    persist.write_json(out / "manifest.json", manifest.to_dict())
    return manifest


class SceneDataset(Sequence[SceneSample]):
    """Lazily loaded dataset directory written by :func:`synthesize_dataset`."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / "manifest.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"missing manifest: {path}") from exc
        self.config = SynthConfig.from_dict(data["config"])
        self.entries: list[dict] = data["samples"]
        self.version = data.get("version", MANIFEST_VERSION)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):  # type: ignore[override]
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        from . import persist

        return persist.read_sample(self.root, self.entries[i])


class InMemoryDataset(list):
    """Plain list of samples; synthesised on demand for tests and experiments."""

    @classmethod
    def synthesize(cls, config: SynthConfig, count: int, start: int = 0) -> "InMemoryDataset":
        return cls(iter_scenes(config, count, start=start))
