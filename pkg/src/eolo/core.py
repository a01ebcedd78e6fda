"""Grid maps, box geometry and the small resampling kernels shared by the head.

Maps are plain ``numpy`` arrays of shape ``(C, H, W)``. All geometry lives in
output-stride units: a pixel with index ``(y, x)`` has the anchor point
``Point(x, y)``, and the tight box of a mask spans ``[min, max + 1]`` on each
axis.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

GridMap = np.ndarray

GMAP_MAGIC = b"EOLOGMAP"


class Point(NamedTuple):
    x: float
    y: float


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)


class Box4D(NamedTuple):
    """Distances from an anchor to the left, top, right and bottom box edges."""

    d_l: float
    d_t: float
    d_r: float
    d_b: float


def check_gridmap(values, channels: int | None = None) -> GridMap:
    """Validate a ``(C, H, W)`` array and return it as a float array."""
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise ValueError(f"grid map must be 3-D (C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"grid map dimensions must be >= 1, got {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[0]}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def box_from_4d(anchor: Point, d: Box4D) -> BoundingBox:
    d_l, d_t, d_r, d_b = d
    if not all(np.isfinite(v) and v >= 0 for v in d):
        raise ValueError(f"Box4D distances must be finite and >= 0, got {tuple(d)}")
    return BoundingBox(anchor.x - d_l, anchor.y - d_t, anchor.x + d_r, anchor.y + d_b)


def distances_to_box(anchor: Point, box: BoundingBox) -> Box4D:
    return Box4D(anchor.x - box.x1, anchor.y - box.y1, box.x2 - anchor.x, box.y2 - anchor.y)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape ``(N, 4)`` and ``(M, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def centroid(mask: np.ndarray) -> Point:
    """Center of gravity of a binary ``(H, W)`` mask, in pixel-index coordinates."""
    ys, xs = np.nonzero(np.asarray(mask))
    if len(xs) == 0:
        raise ValueError("empty instance")
    return Point(float(xs.mean()), float(ys.mean()))


def tight_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(np.asarray(mask))
    if len(xs) == 0:
        raise ValueError("empty instance")
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def center_cell(p: Point) -> tuple[int, int]:
    """Round a continuous point to its ``(y, x)`` cell, halves rounding up."""
    return int(np.floor(p.y + 0.5)), int(np.floor(p.x + 0.5))


def maxpool3x3(grid: GridMap) -> GridMap:
    """3x3 max pooling over the last two axes; border windows shrink instead of padding."""
    a = np.asarray(grid)
    out = a.copy()
    # separable: rows then columns
    np.maximum(out[..., 1:, :], a[..., :-1, :], out=out[..., 1:, :])
    np.maximum(out[..., :-1, :], a[..., 1:, :], out=out[..., :-1, :])
    rows = out.copy()
    np.maximum(out[..., :, 1:], rows[..., :, :-1], out=out[..., :, 1:])
    np.maximum(out[..., :, :-1], rows[..., :, 1:], out=out[..., :, :-1])
    return out


def _resize_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(grid: GridMap, new_h: int, new_w: int) -> GridMap:
    """Bilinear resampling of the last two axes (half-pixel centers, no corner alignment)."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be >= 1, got {(new_h, new_w)}")
    a = np.asarray(grid)
    h, w = a.shape[-2:]
    if (h, w) == (new_h, new_w):
        return a.copy()
    y0, y1, fy = _resize_axis(h, new_h)
    x0, x1, fx = _resize_axis(w, new_w)
    fy = fy[:, None]
    top = a[..., y0, :] * (1 - fy) + a[..., y1, :] * fy
    out = top[..., x0] * (1 - fx) + top[..., x1] * fx
    return out.astype(np.result_type(a.dtype, np.float32), copy=False)


def write_gmap(path: Union[str, Path], grid: GridMap) -> None:
    arr = check_gridmap(grid)
    header = json.dumps({"v": 1, "dtype": "f32le", "shape": list(arr.shape)}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(GMAP_MAGIC + b"\n" + header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_gmap(path: Union[str, Path]) -> GridMap:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != GMAP_MAGIC:
        raise ValueError(f"{path}: not a GMAP file")
    header_line, _, payload = rest.partition(b"\n")
    header = json.loads(header_line)
    if header.get("v") != 1 or header.get("dtype") != "f32le":
        raise ValueError(f"{path}: unsupported GMAP header {header}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 3:
        raise ValueError(f"{path}: GMAP shape must have 3 entries")
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
