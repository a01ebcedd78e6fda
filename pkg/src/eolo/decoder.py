"""Inference decoding: peaks -> boxes -> (optional NMS) -> per-pixel instance assignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import BoundingBox, Point, bilinear_resize, iou_matrix, maxpool3x3

IOU_TIE_TOL = 1e-9


@dataclass(frozen=True)
class DecodeConfig:
    top_k: int = 100
    score_threshold: float = 0.3
    seg_threshold: float = 0.5
    iou_assign_threshold: float = 0.0
    nms_iou: float | None = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        for name in ("score_threshold", "seg_threshold", "iou_assign_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.nms_iou is not None and not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must lie in [0, 1], got {self.nms_iou}")


@dataclass
class Detection:
    class_id: int
    center: Point
    score: float
    box: BoundingBox | None = None

    @property
    def cell(self) -> tuple[int, int]:
        return int(self.center.y), int(self.center.x)


@dataclass
class InstanceResult:
    detection: Detection
    mask: np.ndarray
    # mask resolution relative to the head maps (1 unless refined)
    scale: int = 1
    pred_id: int | None = None

    @property
    def class_id(self) -> int:
        return self.detection.class_id

    @property
    def score(self) -> float:
        return self.detection.score


def extract_peaks(center_map: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> list[Detection]:
    """Cells equal to their 3x3 neighbourhood max and at least ``score_threshold``.

    Sorted by score descending; equal scores fall back to ``(class, y, x)``.
    """
    heat = np.asarray(center_map)
    cand = heat >= cfg.score_threshold
    if not cand.any():
        return []
    n, h, w = heat.shape
    live = np.flatnonzero(cand.reshape(n, -1).any(axis=1))
    # -inf border makes shrunk border windows implicit
    pad = np.full((len(live), h + 2, w + 2), -np.inf, dtype=heat.dtype)
    pad[:, 1:-1, 1:-1] = heat[live]
    flat = pad.reshape(-1)
    pw = w + 2
    raw = np.flatnonzero(cand[live])
    k, rem = np.divmod(raw, h * w)
    y, x = np.divmod(rem, w)
    idx = (k * (h + 2) + y + 1) * pw + x + 1
    v = flat[idx]
    is_peak = np.ones(len(idx), dtype=bool)
    for off in (-pw - 1, -pw, -pw + 1, -1, 1, pw - 1, pw, pw + 1):
        is_peak &= flat[idx + off] <= v
    c, y, x = live[k[is_peak]], y[is_peak], x[is_peak]
    scores = heat[c, y, x]
    # nonzero is already (c, y, x)-lexicographic, so a stable sort on -score suffices
    order = np.argsort(-scores, kind="stable")[: cfg.top_k]
    return [
        Detection(int(c[i]), Point(float(x[i]), float(y[i])), float(scores[i]))
        for i in order
    ]


def attach_boxes(peaks: Sequence[Detection], size_map: np.ndarray) -> list[Detection]:
    if not peaks:
        return []
    size_map = np.asarray(size_map)
    cells = np.array([det.cell for det in peaks], dtype=np.intp)
    d = np.maximum(size_map[:, cells[:, 0], cells[:, 1]], 0.0).T.astype(np.float64)
    cx, cy = cells[:, 1].astype(np.float64), cells[:, 0].astype(np.float64)
    boxes = np.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], axis=1).tolist()
    return [
        Detection(det.class_id, det.center, det.score, BoundingBox(*b))
        for det, b in zip(peaks, boxes)
    ]


def nms(detections: Sequence[Detection], nms_iou: float) -> list[Detection]:
    """Greedy per-class suppression; input must be sorted by score descending."""
    if len(detections) <= 1:
        return list(detections)
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    classes = np.array([d.class_id for d in detections])
    ious = iou_matrix(boxes, boxes)
    keep = np.ones(len(detections), dtype=bool)
    for i in range(len(detections)):
        if not keep[i]:
            continue
        later = np.arange(i + 1, len(detections))
        kill = later[(classes[later] == classes[i]) & (ious[i, later] > nms_iou)]
        keep[kill] = False
    return [d for d, k in zip(detections, keep) if k]


def assign_pixels(
    detections: Sequence[Detection],
    seg_map: np.ndarray,
    size_map: np.ndarray,
    cfg: DecodeConfig = DecodeConfig(),
    diagnostics: dict | None = None,
) -> list[InstanceResult]:
    """Split each class's foreground between its detections.

    A foreground pixel goes to the only detection whose (1-cell dilated) box
    contains it; with several such candidates, the pixel's own regressed box
    is compared by IoU against each candidate box and the best one wins
    (earlier detection on ties). Detections that receive no pixel are dropped.
    """
    seg_map = np.asarray(seg_map)
    size_map = np.asarray(size_map)
    _, h, w = seg_map.shape
    if not detections:
        if diagnostics is not None:
            diagnostics.setdefault("unassigned_pixels", 0)
        return []
    det_cls = np.array([d.class_id for d in detections], dtype=np.intp)
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    # paint every dilated box: candidate count and sum of detection indices per cell
    lo = np.clip(np.ceil(boxes[:, :2] - 1), 0, None).astype(np.intp)
    hi = np.floor(boxes[:, 2:] + 1).astype(np.intp) + 1
    classes, slot = np.unique(det_cls, return_inverse=True)
    fg = seg_map[classes] >= cfg.seg_threshold
    count = np.zeros(fg.shape, dtype=np.int32)
    idsum = np.zeros(fg.shape, dtype=np.intp)
    for i, k in enumerate(slot):
        region = (k, slice(lo[i, 1], hi[i, 1]), slice(lo[i, 0], hi[i, 0]))
        count[region] += 1
        idsum[region] += i
    n_fg = int(np.count_nonzero(fg))
    flat = np.flatnonzero(fg & (count > 0))
    n_cand = count.reshape(-1)[flat]
    owner = np.where(n_cand == 1, idsum.reshape(-1)[flat], -1)
    c, rem = np.divmod(flat, h * w)
    ys, xs = np.divmod(rem, w)
    multi = np.nonzero(n_cand > 1)[0]
    if len(multi):
        mc, my, mx = c[multi], ys[multi], xs[multi]
        cols = np.nonzero(np.isin(slot, mc))[0]
        cb = boxes[cols]
        inside = (
            (mc[:, None] == slot[None, cols])
            & (mx[:, None] >= cb[None, :, 0] - 1)
            & (mx[:, None] <= cb[None, :, 2] + 1)
            & (my[:, None] >= cb[None, :, 1] - 1)
            & (my[:, None] <= cb[None, :, 3] + 1)
        )
        d = np.maximum(size_map[:, my, mx], 0.0)
        pix_boxes = np.stack([mx - d[0], my - d[1], mx + d[2], my + d[3]], axis=1)
        scores = np.where(inside, iou_matrix(pix_boxes, cb), -1.0)
        top = scores.max(axis=1)
        # regressed boxes are floats: treat IoUs within IOU_TIE_TOL as ties, earliest wins
        best = cols[np.argmax(scores >= (top - IOU_TIE_TOL)[:, None], axis=1)]
        ok = top > cfg.iou_assign_threshold
        owner[multi[ok]] = best[ok]
    unassigned = n_fg - int((owner >= 0).sum())

    hit = owner >= 0
    masks = np.zeros((len(detections), h * w), dtype=bool)
    masks[owner[hit], rem[hit]] = True
    masks = masks.reshape(len(detections), h, w)
    counts = np.bincount(owner[hit], minlength=len(detections))
    # class-major, then detection (score) order
    order = np.lexsort((np.arange(len(detections)), det_cls))
    results = [InstanceResult(detections[i], masks[i]) for i in order if counts[i]]

    if diagnostics is not None:
        diagnostics["unassigned_pixels"] = diagnostics.get("unassigned_pixels", 0) + unassigned
    return results


def _blend_hi_res(hi_res: Sequence[np.ndarray], base_hw: tuple[int, int]) -> np.ndarray:
    maps = [np.asarray(m) for m in hi_res]
    for m in maps:
        mh, mw = m.shape[-2:]
        if mh % base_hw[0] or mw % base_hw[1] or mh // base_hw[0] != mw // base_hw[1]:
            raise ValueError(f"hi-res shape {m.shape[-2:]} is not an integer multiple of {base_hw}")
    fine = max(maps, key=lambda m: m.shape[-1])
    fh, fw = fine.shape[-2:]
    return np.mean([bilinear_resize(m, fh, fw) for m in maps], axis=0)


def refine_mask(
    result: InstanceResult,
    hi_res_seg: np.ndarray | Sequence[np.ndarray] | None,
    cfg: DecodeConfig = DecodeConfig(),
) -> InstanceResult:
    """Sharpen an instance mask with finer segmentation maps.

    The coarse mask is upsampled bilinearly to the finest map given, weighted
    by that map's class probability and thresholded again. Several maps are
    resampled to the finest resolution and averaged first.
    """
    if hi_res_seg is None:
        return result
    if isinstance(hi_res_seg, np.ndarray):
        hi_res_seg = [hi_res_seg]
    if len(hi_res_seg) == 0:
        return result
    base_hw = result.mask.shape
    prob = _blend_hi_res(hi_res_seg, base_hw)
    fh, fw = prob.shape[-2:]
    up = bilinear_resize(result.mask[None].astype(np.float64), fh, fw)[0]
    mask = up * prob[result.class_id] >= cfg.seg_threshold
    return InstanceResult(result.detection, mask, scale=fh // base_hw[0], pred_id=result.pred_id)


def decode(
    center_map: np.ndarray,
    size_map: np.ndarray,
    seg_map: np.ndarray,
    cfg: DecodeConfig = DecodeConfig(),
    hi_res_seg: Sequence[np.ndarray] | None = None,
    diagnostics: dict | None = None,
) -> list[InstanceResult]:
    if center_map.shape[-2:] != size_map.shape[-2:] or center_map.shape != seg_map.shape:
        raise ValueError(
            f"inconsistent map shapes: center {center_map.shape}, size {size_map.shape}, seg {seg_map.shape}"
        )
    if size_map.shape[0] != 4:
        raise ValueError(f"size map must have 4 channels, got {size_map.shape[0]}")
    dets = attach_boxes(extract_peaks(center_map, cfg), size_map)
    if cfg.nms_iou is not None:
        dets = nms(dets, cfg.nms_iou)
    results = assign_pixels(dets, seg_map, size_map, cfg, diagnostics)
    if hi_res_seg:
        refined = [refine_mask(r, hi_res_seg, cfg) for r in results]
        results = [r for r in refined if r.mask.any()]
    return results
