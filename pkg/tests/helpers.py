"""Random instance generators shared by unit and acceptance tests."""

import numpy as np


def ranking_instance(rng: np.random.Generator):
    """Scores with plenty of ties and labels holding both classes; length <= 64."""
    n = int(rng.integers(2, 65))
    levels = int(rng.integers(2, 12))
    scores = rng.integers(0, levels, size=n) / levels + (rng.random(n) < 0.3) * rng.random(n)
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    rng.shuffle(labels)
    return scores, labels


def component_scene(rng: np.random.Generator, max_side: int = 24, max_blobs: int = 4):
    """Ground-truth blobs plus a noisy score map that partly covers them."""
    h, w = (int(v) for v in rng.integers(8, max_side + 1, size=2))
    gt = np.zeros((h, w), np.uint8)
    for _ in range(int(rng.integers(0, max_blobs + 1))):
        bh, bw = (int(v) for v in rng.integers(1, 6, size=2))
        y, x = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        gt[y:y + bh, x:x + bw] = 1
    score = np.where(gt > 0, rng.uniform(0.3, 1.0, gt.shape), rng.uniform(0.0, 0.55, gt.shape))
    # spurious blob
    if rng.random() < 0.5:
        y, x = int(rng.integers(0, h - 2)), int(rng.integers(0, w - 2))
        score[y:y + 2, x:x + 2] = 0.9
    return score, gt


def random_mask(rng: np.random.Generator, shape=(32, 32)):
    density = rng.uniform(0.2, 0.8)
    mask = rng.random(shape) < density
    if rng.random() < 0.5:
        # blocky masks exercise erosion interiors better than salt noise
        coarse = rng.random((shape[0] // 4, shape[1] // 4)) < density
        mask = np.kron(coarse, np.ones((4, 4), bool)) | (mask & (rng.random(shape) < 0.1))
    return mask.astype(np.uint8)
