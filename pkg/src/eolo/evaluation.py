"""Mask IoU matching and COCO-style average precision."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decoder import InstanceResult
from .encoder import InstanceAnnotation

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"S": (0.0, 32.0**2), "M": (32.0**2, 96.0**2), "L": (96.0**2, float("inf"))}
TABLE_COLUMNS = ("Backbone", "FPS", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


def _default_thresholds() -> tuple:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = field(default_factory=_default_thresholds)
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))
    max_dets: int = 100
    # input pixels per head-map cell, used to express areas in input pixels
    stride: int = 8

    def __post_init__(self):
        t = np.asarray(self.iou_thresholds, dtype=np.float64)
        if t.size == 0 or (t <= 0).any() or (t > 1).any() or (np.diff(t) <= 0).any():
            raise ValueError("iou_thresholds must be strictly increasing in (0, 1]")


@dataclass
class EvalResult:
    ap_per_threshold: dict
    mean_ap: float
    ap_by_area: dict
    pr_curves: dict = field(default_factory=dict, repr=False)
    n_predictions: int = 0
    n_truths: int = 0

    def ap_at(self, thr: float) -> float:
        for k, v in self.ap_per_threshold.items():
            if abs(float(k) - thr) < 1e-9:
                return v
        raise KeyError(thr)

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "ap_per_threshold": {f"{k:.2f}": v for k, v in self.ap_per_threshold.items()},
            "ap_by_area": dict(self.ap_by_area),
            "n_predictions": self.n_predictions,
            "n_truths": self.n_truths,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def table_row(self) -> dict:
        def get(thr):
            try:
                return self.ap_at(thr)
            except KeyError:
                return None

        return {
            "AP": self.mean_ap,
            "AP50": get(0.5),
            "AP75": get(0.75),
            "AP_S": self.ap_by_area.get("S"),
            "AP_M": self.ap_by_area.get("M"),
            "AP_L": self.ap_by_area.get("L"),
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _mask_iou_matrix(dets: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.stack([m.reshape(-1) for m in dets]).astype(np.float64)
    g = np.stack([m.reshape(-1) for m in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _pred_mask(pred: InstanceResult, shape: tuple) -> np.ndarray:
    """Bring a (possibly refined) prediction back to the truth resolution."""
    m = pred.mask
    if m.shape == shape:
        return m
    s = pred.scale
    if m.shape != (shape[0] * s, shape[1] * s):
        raise ValueError(f"prediction mask shape {m.shape} incompatible with truth shape {shape}")
    return m.reshape(shape[0], s, shape[1], s).mean(axis=(1, 3)) >= 0.5


def interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """101-point interpolated AP from a score-ordered TP/FP sequence."""
    if n_gt == 0:
        return float("nan"), np.zeros(0), np.zeros(0)
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # precision envelope, right to left
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    hit = idx < len(env)
    q[hit] = env[idx[hit]]
    return float(q.mean()), recall, precision


def evaluate(
    predictions: Mapping,
    truths: Mapping,
    cfg: EvalConfig = EvalConfig(),
) -> EvalResult:
    """Per class and IoU threshold: greedy score-ordered one-to-one matching, then AP.

    ``predictions`` and ``truths`` map image id to lists of
    :class:`InstanceResult` and :class:`InstanceAnnotation`. AP is averaged
    over classes that have at least one truth, then over thresholds.
    """
    extra = set(predictions) - set(truths)
    if extra:
        raise ValueError(f"predictions reference unknown image ids {sorted(extra)}")
    ids = [p.pred_id for preds in predictions.values() for p in preds if p.pred_id is not None]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate prediction ids")

    thresholds = tuple(float(t) for t in cfg.iou_thresholds)
    px_per_cell = cfg.stride * cfg.stride
    classes = sorted({t.class_id for ts in truths.values() for t in ts})

    # per class: list of (score, image, det index, det area) and per-image IoU matrices
    per_class_stats = {}
    for cls in classes:
        dets, ious, gt_areas = [], {}, {}
        n_gt = 0
        for img, ts in truths.items():
            gts = [t for t in ts if t.class_id == cls]
            preds = sorted(
                (p for p in predictions.get(img, []) if p.class_id == cls),
                key=lambda p: -p.score,
            )[: cfg.max_dets]
            n_gt += len(gts)
            if not gts and not preds:
                continue
            shape = gts[0].mask.shape if gts else preds[0].mask.shape
            pmasks = [_pred_mask(p, shape) for p in preds]
            ious[img] = _mask_iou_matrix(pmasks, [g.mask for g in gts])
            gt_areas[img] = np.array([g.area * px_per_cell for g in gts], dtype=np.float64)
            for j, (p, m) in enumerate(zip(preds, pmasks)):
                dets.append((p.score, img, j, float(m.sum()) * px_per_cell))
        # stable order: score descending, ties by insertion order
        order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
        per_class_stats[cls] = ([dets[i] for i in order], ious, gt_areas, n_gt)

    ranges = {"all": (0.0, float("inf")), **cfg.area_ranges}
    ap = {name: np.full((len(thresholds), len(classes)), np.nan) for name in ranges}
    curves = {}
    for ci, cls in enumerate(classes):
        dets, ious, gt_areas, _ = per_class_stats[cls]
        for ti, thr in enumerate(thresholds):
            for name, (lo, hi) in ranges.items():
                tp, n_gt = _match(dets, ious, gt_areas, thr, lo, hi)
                value, rec, prec = interpolated_ap(tp, n_gt)
                ap[name][ti, ci] = value
                if name == "all":
                    curves[(cls, thr)] = (rec, prec)

    def mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if a.size else 0.0

    per_thr = {thr: mean(ap["all"][ti]) for ti, thr in enumerate(thresholds)}
    by_area = {name: mean(ap[name]) for name in cfg.area_ranges}
    return EvalResult(
        ap_per_threshold=per_thr,
        mean_ap=mean(np.array(list(per_thr.values()))) if classes else 0.0,
        ap_by_area=by_area,
        pr_curves=curves,
        n_predictions=sum(len(v) for v in predictions.values()),
        n_truths=sum(len(v) for v in truths.values()),
    )


def _match(dets, ious, gt_areas, thr, lo, hi):
    """TP flags for non-ignored detections and the count of non-ignored truths."""
    gt_ignore = {img: (a < lo) | (a >= hi) for img, a in gt_areas.items()}
    taken = {img: np.zeros(len(a), dtype=bool) for img, a in gt_areas.items()}
    n_gt = int(sum((~g).sum() for g in gt_ignore.values()))
    flags = []
    for score, img, j, area in dets:
        row = ious[img][j] if ious[img].size else np.zeros(0)
        ign = gt_ignore[img]
        free = ~taken[img]
        match = -1
        for pool in (free & ~ign, free & ign):
            cand = np.where(pool & (row >= thr), row, -1.0)
            if cand.size and cand.max() >= 0:
                match = int(np.argmax(cand))
                break
        if match >= 0:
            taken[img][match] = True
            if ign[match]:
                continue
            flags.append(1.0)
        else:
            if area < lo or area >= hi:
                continue
            flags.append(0.0)
    return np.array(flags), n_gt


def format_table(
    rows: Mapping[str, EvalResult],
    fps: Mapping[str, float] | None = None,
    backbones: Mapping[str, str] | None = None,
) -> str:
    """Aligned text table with one row per named result, values in percent."""
    fps = fps or {}
    backbones = backbones or {}
    header = ("Method",) + TABLE_COLUMNS
    lines = [header]
    for name, res in rows.items():
        vals = res.table_row()
        cells = [name, backbones.get(name, "-"), f"{fps[name]:.0f}" if name in fps else "-"]
        for col in TABLE_COLUMNS[2:]:
            v = vals[col]
            cells.append("-" if v is None else f"{100 * v:.1f}")
        lines.append(tuple(cells))
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    out = []
    for k, r in enumerate(lines):
        out.append("  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths))))
        if k == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out)


def results_from_truths(truths: Sequence[InstanceAnnotation]) -> list[InstanceResult]:
    """Perfect predictions (score 1) for a list of truths; handy for sanity checks."""
    from .core import Point
    from .decoder import Detection

    return [
        InstanceResult(Detection(t.class_id, Point(*t.center), 1.0, t.bbox), t.mask.copy())
        for t in truths
    ]
