"""Brute-force reference implementations used only by the tests.

Each oracle takes a different route from the library code it checks: pair
counting instead of ranks, explicit threshold scans instead of cumulative
sums, flood fill instead of scipy labelling, per-offset shifts instead of
pooling, plain loops instead of tensor algebra.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------- ranking


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ap_exhaustive(scores, labels) -> float:
    n_pos = sum(1 for y in labels if y)
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(1 for y in sel if y)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return ap


def fpr_scan(scores, labels, target=0.95) -> float:
    n_pos = sum(1 for y in labels if y)
    n_neg = len(labels) - n_pos
    best = math.inf
    for t in set(scores):
        tp = sum(1 for s, y in zip(scores, labels) if y and s >= t)
        fp = sum(1 for s, y in zip(scores, labels) if not y and s >= t)
        if tp / n_pos >= target:
            best = min(best, fp / n_neg)
    return best


# ---------------------------------------------------------------- morphology


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = mask[y + dy, x + dx], zero outside the image."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = mask[yd, xd]
    return out


def dilate_enum(mask: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    m = mask.astype(bool)
    out = np.zeros_like(m)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= _shift(m, dy, dx)
    return out


def erode_enum(mask: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    m = mask.astype(bool)
    out = np.ones_like(m)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out &= _shift(m, dy, dx)
    return out


def refine_enum(mask: np.ndarray, k: int, n: int, mode: str) -> np.ndarray:
    m = mask.astype(bool)
    if mode == "erode_then_dilate":
        for _ in range(n):
            m = erode_enum(m, k)
    for _ in range(n):
        m = dilate_enum(m, k)
    return m.astype(np.uint8)


def dilate_set(points: set, k: int, shape) -> set:
    """Minkowski sum of a pixel set with the k x k square, clipped to the image."""
    r = k // 2
    h, w = shape
    return {
        (y + dy, x + dx)
        for (y, x) in points
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if 0 <= y + dy < h and 0 <= x + dx < w
    }


def erode_set(points: set, k: int, shape) -> set:
    r = k // 2
    h, w = shape
    return {
        (y, x)
        for y in range(h)
        for x in range(w)
        if all((y + dy, x + dx) in points for dy in range(-r, r + 1) for dx in range(-r, r + 1))
    }


# ---------------------------------------------------------------- components


def flood_fill_components(mask, connectivity: int) -> list[set]:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    if connectivity == 8:
        nbrs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = np.zeros_like(m)
    comps = []
    for y in range(h):
        for x in range(w):
            if m[y, x] and not seen[y, x]:
                comp = set()
                queue = deque([(y, x)])
                seen[y, x] = True
                while queue:
                    cy, cx = queue.popleft()
                    comp.add((cy, cx))
                    for dy, dx in nbrs:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
                comps.append(comp)
    return comps


def component_metrics_sets(score, gt, seg_threshold, connectivity, taus):
    """sIoU / PPV / F1* by explicit set arithmetic on pixel coordinates."""
    pred_comps = flood_fill_components(np.asarray(score) >= seg_threshold, connectivity)
    gt_comps = flood_fill_components(gt, connectivity)
    gt_all = set().union(*gt_comps) if gt_comps else set()
    sious = []
    for k in gt_comps:
        hits = [p for p in pred_comps if p & k]
        khat = set().union(*hits) if hits else set()
        others = gt_all - k
        adjusted = k | (khat - others)
        sious.append(len(k & khat) / len(adjusted))
    ppvs = [len(p & gt_all) / len(p) for p in pred_comps]
    if not gt_comps and not pred_comps:
        return 1.0, 1.0, 1.0
    f1s = []
    for tau in taus:
        tp = sum(1 for s in sious if s > tau)
        fn = len(sious) - tp
        fp = sum(1 for v in ppvs if v <= tau)
        f1s.append(2 * tp / (2 * tp + fn + fp) if (2 * tp + fn + fp) else 1.0)
    siou = sum(sious) / len(sious) if sious else 0.0
    ppv = sum(ppvs) / len(ppvs) if ppvs else 0.0
    return siou, ppv, sum(f1s) / len(f1s)


# ---------------------------------------------------------------- dense algebra


def fuse_elementwise(features: np.ndarray, aligned: np.ndarray, gate: np.ndarray) -> np.ndarray:
    c, h, w = features.shape
    out = np.empty_like(features)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                m = gate[0, y, x]
                out[ch, y, x] = (1 + m) * features[ch, y, x] + (1 - m) * aligned[ch, y, x]
    return out


def cross_attention_dense(gated, anomaly, wq, bq, wk, bk, wv, bv):
    """Loop form of Q/K/V projection, row softmax and reweighting; maps are flat length-N."""
    d = len(wq)
    n = len(gated)
    q = [[wq[i] * gated[j] + bq[i] for j in range(n)] for i in range(d)]
    k = [[wk[i] * anomaly[j] + bk[i] for j in range(n)] for i in range(d)]
    v = [[wv[i] * anomaly[j] + bv[i] for j in range(n)] for i in range(d)]
    attn = []
    for i in range(d):
        logits = [sum(q[i][t] * k[j][t] for t in range(n)) / math.sqrt(d) for j in range(d)]
        top = max(logits)
        ex = [math.exp(v_ - top) for v_ in logits]
        z = sum(ex)
        attn.append([e / z for e in ex])
    out = [[sum(attn[i][j] * v[j][t] for j in range(d)) for t in range(n)] for i in range(d)]
    return np.array(attn), np.array(out)


def ood_score_loop(logits: np.ndarray) -> np.ndarray:
    c, h, w = logits.shape
    raw = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            raw[y, x] = 1.0 - sum(1.0 / (1.0 + math.exp(-logits[k, y, x])) for k in range(c))
    return raw


# ---------------------------------------------------------------- finite differences


def central_difference_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(fn, tensors, eps: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences of a scalar fn.

    ``fn`` takes the tensors positionally; each tensor is checked in turn.
    """
    import torch

    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    fn(*tensors).backward()
    errs = []
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [u.detach() for u in tensors]
            args[i] = torch.from_numpy(x)
            with torch.no_grad():
                return float(fn(*args))

        numeric = central_difference_grad(f, t.detach().numpy().copy(), eps)
        errs.append(rel_err(t.grad.numpy(), numeric))
    return max(errs)
