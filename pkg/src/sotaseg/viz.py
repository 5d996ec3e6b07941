"""Heatmap rendering of score maps.

Scores are clipped to [0, 1] and mapped through the ``inferno`` colormap.
Panels put the input image, the heatmap and a 50/50 overlay side by side.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import colormaps  # noqa: E402
import numpy as np  # noqa: E402

from . import persist  # noqa: E402

COLORMAP = "inferno"
OVERLAY_ALPHA = 0.5


def heatmap(score: np.ndarray, cmap: str = COLORMAP) -> np.ndarray:
    """H x W scores -> H x W x 3 uint8 colors."""
    s = np.asarray(score, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"score map must be 2-D, got shape {s.shape}")
    rgba = colormaps[cmap](np.clip(s, 0.0, 1.0), bytes=True)
    return np.ascontiguousarray(rgba[..., :3])


def _to_hwc_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img


def overlay(image: np.ndarray, score: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    img = _to_hwc_uint8(image).astype(np.float64)
    heat = heatmap(score).astype(np.float64)
    if img.shape != heat.shape:
        raise ValueError(f"image {img.shape} and score {heat.shape} sizes differ")
    return np.round((1.0 - alpha) * img + alpha * heat).astype(np.uint8)


def panel(image: np.ndarray, score: np.ndarray) -> np.ndarray:
    """image | heatmap | overlay."""
    img = _to_hwc_uint8(image)
    return np.concatenate([img, heatmap(score), overlay(img, score)], axis=1)


def render_directory(pred_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Render every ``<name>/final.sota`` under ``pred_dir``.

    Writes ``<name>_heatmap.png`` at the score map's size, and
    ``<name>_panel.png`` when an ``image.png`` sits next to the map.
    """
    pred_dir, out_dir = Path(pred_dir), Path(out_dir)
    maps = sorted(pred_dir.glob("*/final.sota"))
    if not maps:
        raise FileNotFoundError(f"no */final.sota score maps under {pred_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in maps:
        name = path.parent.name
        score = persist.load_tensor(path)
        target = out_dir / f"{name}_heatmap.png"
        persist.save_png(target, heatmap(score))
        written.append(target)
        image_path = path.parent / "image.png"
        if image_path.exists():
            image = persist.load_png(image_path, rgb=True)
            target = out_dir / f"{name}_panel.png"
            persist.save_png(target, panel(image, score))
            written.append(target)
    return written
