"""Slow, obviously-correct reference implementations used only by the tests."""
import math

import numpy as np


def maxpool_ref(grid):
    grid = np.asarray(grid)
    out = np.empty_like(grid)
    c, h, w = grid.shape
    for k in range(c):
        for y in range(h):
            for x in range(w):
                out[k, y, x] = grid[k, max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].max()
    return out


def bilinear_ref(img, new_h, new_w):
    h, w = img.shape
    out = np.zeros((new_h, new_w))
    for i in range(new_h):
        for j in range(new_w):
            sy = min(max((i + 0.5) * h / new_h - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / new_w - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def peaks_ref(heat, threshold, top_k):
    """Scan every cell; returns (class, y, x, score) sorted by score then (c, y, x)."""
    c, h, w = heat.shape
    found = []
    for k in range(c):
        for y in range(h):
            for x in range(w):
                v = heat[k, y, x]
                if v < threshold:
                    continue
                ok = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and heat[k, yy, xx] > v:
                            ok = False
                if ok:
                    found.append((k, y, x, float(v)))
    found.sort(key=lambda t: (-t[3], t[0], t[1], t[2]))
    return found[:top_k]


def iou_ref(a, b):
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    area = lambda r: max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def nms_ref(boxes, scores, classes, thr):
    """O(n^2) greedy suppression; returns kept indices in score order."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    kept = []
    for i in order:
        if all(classes[j] != classes[i] or iou_ref(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def ap101_ref(tp_flags, n_gt):
    """Hand-walk of the interpolated PR curve."""
    tp = fp = 0
    rec, prec = [], []
    for f in tp_flags:
        tp += f
        fp += 1 - f
        rec.append(tp / n_gt)
        prec.append(tp / (tp + fp))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        cand = [p for rr, p in zip(rec, prec) if rr >= r - 1e-12]
        total += max(cand) if cand else 0.0
    return total / 101
