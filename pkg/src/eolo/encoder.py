"""Ground-truth encoding: center heatmaps, per-pixel 4D size targets, class masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import BoundingBox, Box4D, Point, center_cell, centroid, distances_to_box, tight_box

KERNEL_KINDS = ("circle-fixed", "circle-gaussian", "ellipse-gaussian")


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 1.0
    kernel_kind: str = "ellipse-gaussian"
    # radius used by circle-fixed, in cells
    fixed_radius: float = 2.0
    # overlap pixels: "smaller-box" gives the pixel to the instance with the smaller bbox
    overlap_rule: str = "smaller-box"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.kernel_kind not in KERNEL_KINDS:
            raise ValueError(f"kernel_kind must be one of {KERNEL_KINDS}, got {self.kernel_kind!r}")
        if not self.fixed_radius > 0:
            raise ValueError("fixed_radius must be > 0")
        if self.overlap_rule not in ("smaller-box", "first"):
            raise ValueError(f"unknown overlap_rule {self.overlap_rule!r}")


@dataclass
class InstanceAnnotation:
    class_id: int
    mask: np.ndarray
    center: Point = field(init=False)
    bbox: BoundingBox = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ValueError(f"instance mask must be 2-D, got shape {self.mask.shape}")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        self.center = centroid(self.mask)
        self.bbox = tight_box(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class TargetSet:
    center_heatmap: np.ndarray  # (C, H, W)
    size_map: np.ndarray  # (4, H, W)
    size_valid: np.ndarray  # (H, W) bool
    center_points: list  # (class_id, (y, x) cell, exact Point)
    seg_map: np.ndarray  # (C, H, W)
    # index of the instance whose 4D target each pixel carries, -1 for background
    owner: np.ndarray
    # (N, 4) object-level size target per center, measured from the center cell
    center_sizes: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.center_heatmap.shape

    @property
    def n_centers(self) -> int:
        return len(self.center_points)

    def center_cells(self) -> np.ndarray:
        """``(N, 2)`` integer array of ``(y, x)`` center cells."""
        if not self.center_points:
            return np.zeros((0, 2), dtype=np.intp)
        return np.array([cell for _, cell, _ in self.center_points], dtype=np.intp)


def _kernel_radii(radii: Box4D, cfg: KernelConfig) -> Box4D:
    d = Box4D(*(max(float(r), 1.0) for r in radii))
    if cfg.kernel_kind == "ellipse-gaussian":
        return d
    if cfg.kernel_kind == "circle-gaussian":
        r = sum(d) / 4.0
    else:
        r = cfg.fixed_radius
    return Box4D(r, r, r, r)


def ellipse_gaussian_splat(
    heatmap: np.ndarray,
    center: Point,
    radii: Box4D,
    cfg: KernelConfig = KernelConfig(),
) -> np.ndarray:
    """Max-combine one center kernel into a ``(H, W)`` channel, in place.

    The horizontal radius is ``d_l`` left of the center and ``d_r`` right of
    it (``d_t``/``d_b`` vertically). Radii below one cell are raised to one.
    The rounded center cell is set to exactly 1.
    """
    h, w = heatmap.shape
    cy, cx = center_cell(center)
    if not (0 <= cy < h and 0 <= cx < w):
        raise ValueError("center out of bounds")
    d_l, d_t, d_r, d_b = _kernel_radii(radii, cfg)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    rx = np.where(xs < center.x, d_l, d_r)
    ry = np.where(ys < center.y, d_t, d_b)
    ex = ((xs - center.x) / rx) ** 2
    ey = ((ys - center.y) / ry) ** 2
    cand = np.exp(-(ey[:, None] + ex[None, :]) / (2.0 * cfg.sigma**2))
    np.maximum(heatmap, cand, out=heatmap)
    heatmap[cy, cx] = 1.0
    return heatmap


def pixel_distances(box: BoundingBox, h: int, w: int) -> np.ndarray:
    """``(4, H, W)`` distances from every pixel anchor to the edges of ``box``."""
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    out = np.empty((4, h, w))
    out[0] = xs - box.x1
    out[1] = ys - box.y1
    out[2] = box.x2 - xs
    out[3] = box.y2 - ys
    return out


def encode_targets(
    annotations: Sequence[InstanceAnnotation],
    shape: tuple[int, int, int],
    cfg: KernelConfig = KernelConfig(),
) -> TargetSet:
    n_classes, h, w = shape
    heat = np.zeros((n_classes, h, w))
    size = np.zeros((4, h, w))
    seg = np.zeros((n_classes, h, w))
    owner = np.full((h, w), -1, dtype=np.intp)
    centers = []

    for ann in annotations:
        if ann.mask.shape != (h, w):
            raise ValueError(f"annotation mask shape {ann.mask.shape} does not match map shape {(h, w)}")
        if not 0 <= ann.class_id < n_classes:
            raise ValueError(f"class_id {ann.class_id} outside [0, {n_classes})")

    if cfg.overlap_rule == "smaller-box":
        # later writes win, so paint largest first; stable sort keeps lower index on ties
        order = sorted(range(len(annotations)), key=lambda k: (-annotations[k].bbox.area, -k))
    else:
        order = list(reversed(range(len(annotations))))

    for k in order:
        ann = annotations[k]
        dist = pixel_distances(ann.bbox, h, w)
        size[:, ann.mask] = dist[:, ann.mask]
        owner[ann.mask] = k

    for k, ann in enumerate(annotations):
        seg[ann.class_id][ann.mask] = 1.0
        cy, cx = center_cell(ann.center)
        ellipse_gaussian_splat(heat[ann.class_id], ann.center, distances_to_box(ann.center, ann.bbox), cfg)
        centers.append((ann.class_id, (cy, cx), ann.center))

    # the center cell carries the object-level target measured from the cell itself
    center_sizes = np.zeros((len(annotations), 4))
    for k, ann in enumerate(annotations):
        cy, cx = centers[k][1]
        center_sizes[k] = distances_to_box(Point(cx, cy), ann.bbox)
        size[:, cy, cx] = center_sizes[k]
        owner[cy, cx] = k

    valid = owner >= 0
    return TargetSet(heat, size, valid, centers, seg, owner, center_sizes)


def downsample_annotation(mask: np.ndarray, stride: int) -> np.ndarray:
    """Block-reduce a binary mask; a cell is foreground when at least half its block is."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"mask shape {mask.shape} not divisible by stride {stride}")
    if stride == 1:
        return mask.copy()
    blocks = mask.reshape(h // stride, stride, w // stride, stride).sum(axis=(1, 3))
    return 2 * blocks >= stride * stride
