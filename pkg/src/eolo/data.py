"""Synthetic scenes, COCO-style annotation files, RLE and PGM mask formats."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import BoundingBox, center_cell
from .encoder import InstanceAnnotation, downsample_annotation

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "ellipse", "capsule")
MAX_ATTEMPTS = 1000


class SceneError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


# --------------------------------------------------------------------- RLE


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    counts: tuple

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            return cls(int(obj["h"]), int(obj["w"]), tuple(int(c) for c in obj["counts"]))
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"malformed RLE object: {obj!r}") from exc


def rle_encode(mask: np.ndarray) -> RleMask:
    """Column-major run lengths, starting with a (possibly empty) run of zeros."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    flat = mask.astype(bool).ravel(order="F")
    if flat.size == 0:
        return RleMask(h, w, ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(h, w, tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    counts = np.asarray(rle.counts, dtype=np.int64)
    if (counts < 0).any():
        raise ValueError("RLE counts must be nonnegative")
    total = rle.height * rle.width
    if counts.sum() != total:
        raise ValueError(f"RLE runs sum to {int(counts.sum())}, expected {total}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((rle.height, rle.width), order="F")


# --------------------------------------------------------------------- PGM


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pix = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w) > (maxval // 2)


# --------------------------------------------------------------- polygons


def rasterize_polygon(coords: Sequence[float], height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill; a pixel is inside when its center is."""
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    centers_x = np.arange(width) + 0.5
    for row in range(height):
        yc = row + 0.5
        crosses = (np.minimum(y0, y1) <= yc) & (yc < np.maximum(y0, y1))
        if not crosses.any():
            continue
        a0, b0, a1, b1 = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(a0 + (yc - b0) * (a1 - a0) / (b1 - b0))
        for left, right in zip(xs[0::2], xs[1::2]):
            mask[row] |= (centers_x >= left) & (centers_x < right)
    return mask


def polygon_area(coords: Sequence[float]) -> float:
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def polygon_perimeter(coords: Sequence[float]) -> float:
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return float(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).sum())


# -------------------------------------------------------------- annotations


@dataclass
class AnnotationSet:
    images: dict  # image id -> (height, width) at input resolution
    instances: dict  # image id -> list[InstanceAnnotation] at output stride
    categories: list  # names, indexed by remapped class id
    category_ids: list = field(default_factory=list)  # original ids, same order

    @property
    def num_classes(self) -> int:
        return len(self.categories)


def _decode_segmentation(ann: dict, h: int, w: int) -> np.ndarray:
    aid = ann.get("id")
    if "rle" in ann:
        seg = ann["rle"]
    elif "polygon" in ann:
        seg = ann["polygon"]
    elif "segmentation" in ann:
        seg = ann["segmentation"]
    else:
        raise AnnotationError(f"annotation {aid}: no rle/polygon/segmentation field")

    if isinstance(seg, dict):
        if "size" in seg and "h" not in seg:
            if isinstance(seg.get("counts"), str):
                raise AnnotationError(f"annotation {aid}: compressed RLE strings are not supported")
            seg = {"h": seg["size"][0], "w": seg["size"][1], "counts": seg["counts"]}
        rle = RleMask.from_json(seg)
        if (rle.height, rle.width) != (h, w):
            raise AnnotationError(f"annotation {aid}: RLE size {(rle.height, rle.width)} != image size {(h, w)}")
        try:
            return rle_decode(rle)
        except ValueError as exc:
            raise AnnotationError(f"annotation {aid}: {exc}") from exc
    if isinstance(seg, list):
        polys = seg if seg and isinstance(seg[0], (list, tuple)) else [seg]
        mask = np.zeros((h, w), dtype=bool)
        for poly in polys:
            if len(poly) < 6 or len(poly) % 2:
                raise AnnotationError(f"annotation {aid}: polygon needs an even number (>= 6) of coordinates")
            mask |= rasterize_polygon(poly, h, w)
        return mask
    raise AnnotationError(f"annotation {aid}: unsupported segmentation type {type(seg).__name__}")


def parse_annotations(doc: dict, stride: int = 1) -> AnnotationSet:
    if not isinstance(doc, dict):
        raise AnnotationError("annotation file must hold a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise AnnotationError(f"annotation file: missing list {key!r}")

    cats = sorted(doc["categories"], key=lambda c: c["id"])
    remap = {c["id"]: i for i, c in enumerate(cats)}
    images = {}
    for img in doc["images"]:
        try:
            images[img["id"]] = (int(img["height"]), int(img["width"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"image record {img!r}: needs id, height, width") from exc
        h, w = images[img["id"]]
        if h % stride or w % stride:
            raise AnnotationError(f"image {img['id']}: size {(h, w)} not divisible by stride {stride}")

    instances = {i: [] for i in images}
    seen = set()
    for ann in doc["annotations"]:
        aid = ann.get("id")
        if aid in seen:
            raise AnnotationError(f"annotation {aid}: duplicate id")
        seen.add(aid)
        if ann.get("image_id") not in images:
            raise AnnotationError(f"annotation {aid}: image_id {ann.get('image_id')!r} does not exist")
        if ann.get("category_id") not in remap:
            raise AnnotationError(f"annotation {aid}: category_id {ann.get('category_id')!r} does not exist")
        if ann.get("iscrowd"):
            logger.warning("annotation %s: crowd annotation skipped", aid)
            continue
        h, w = images[ann["image_id"]]
        mask = downsample_annotation(_decode_segmentation(ann, h, w), stride)
        if not mask.any():
            logger.warning("annotation %s: empty after downsampling, skipped", aid)
            continue
        instances[ann["image_id"]].append(InstanceAnnotation(remap[ann["category_id"]], mask))

    return AnnotationSet(
        images=images,
        instances=instances,
        categories=[str(c.get("name", c["id"])) for c in cats],
        category_ids=[c["id"] for c in cats],
    )


def load_annotations(path, stride: int = 1) -> AnnotationSet:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from exc
    return parse_annotations(doc, stride)


# ----------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    canvas: tuple = (64, 64)
    n_instances: int = 3
    shape_kinds: tuple = SHAPE_KINDS
    class_count: int = 2
    # target coverage of the smaller box by the larger for each paired instance
    overlap_fraction: float = 0.0
    overlap_tol: float = 0.1
    # long/short side ratio range
    aspect_range: tuple = (1.0, 2.0)
    # log-uniform area range in cells; None means (16, H*W/4)
    area_range: tuple | None = None
    pair_same_class: bool = False

    def __post_init__(self):
        if self.n_instances < 0:
            raise ValueError("n_instances must be >= 0")
        if self.canvas[0] < 8 or self.canvas[1] < 8:
            raise ValueError("canvas must be at least 8x8")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if not 1.0 <= self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError("aspect_range must satisfy 1 <= lo <= hi")


@dataclass
class Scene:
    spec: SceneSpec
    instances: list  # InstanceAnnotation
    kinds: list
    pairs: list  # (i, j) index pairs placed to overlap
    measured_overlap: list  # per pair

    def class_maps(self) -> np.ndarray:
        h, w = self.spec.canvas
        out = np.zeros((self.spec.class_count, h, w), dtype=bool)
        for inst in self.instances:
            out[inst.class_id] |= inst.mask
        return out


def render_shape(kind: str, box: tuple, canvas: tuple) -> np.ndarray:
    """Rasterize a filled shape inscribed in ``box = (x1, y1, x2, y2)`` (integer edges)."""
    h, w = canvas
    x1, y1, x2, y2 = box
    mask = np.zeros((h, w), dtype=bool)
    bw, bh = x2 - x1, y2 - y1
    if kind == "rectangle":
        mask[y1:y2, x1:x2] = True
        return mask
    ys = np.arange(y1, y2)[:, None] + 0.5
    xs = np.arange(x1, x2)[None, :] + 0.5
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    if kind == "ellipse":
        inside = ((xs - cx) / (bw / 2.0)) ** 2 + ((ys - cy) / (bh / 2.0)) ** 2 <= 1.0
    elif kind == "capsule":
        r = min(bw, bh) / 2.0
        if bw >= bh:
            px, py = np.clip(xs, x1 + r, x2 - r), np.full_like(ys, cy)
        else:
            px, py = np.full_like(xs, cx), np.clip(ys, y1 + r, y2 - r)
        inside = (xs - px) ** 2 + (ys - py) ** 2 <= r * r
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    mask[y1:y2, x1:x2] = inside
    return mask


def box_coverage(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over the smaller box area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min(a.area, b.area)


def _draw_size(rng, spec: SceneSpec) -> tuple[int, int]:
    h, w = spec.canvas
    lo, hi = spec.area_range or (16.0, h * w / 4.0)
    area = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    aspect = rng.uniform(*spec.aspect_range)
    short = max(2, int(round(math.sqrt(area / aspect))))
    long = max(short, int(round(short * aspect)))
    if rng.random() < 0.5:
        bw, bh = long, short
    else:
        bw, bh = short, long
    return min(bh, h), min(bw, w)


def _boxes_touch(a: tuple, b: tuple) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def generate_scene(spec: SceneSpec) -> Scene:
    """Seeded placement of filled shapes.

    Instances ``(0, 1)``, ``(2, 3)``, ... are placed as overlapping pairs when
    ``overlap_fraction > 0``; all other instance boxes are disjoint. Each
    placement is retried, and the whole scene gives up after 1000 attempts.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    boxes: list[tuple] = []
    kinds: list[str] = []
    classes: list[int] = []
    masks: list[np.ndarray] = []
    pairs, measured = [], []
    attempts = 0
    paired = spec.overlap_fraction > 0

    def budget():
        nonlocal attempts
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneError("constraint unsatisfiable")

    while len(boxes) < spec.n_instances:
        k = len(boxes)
        unit = 2 if paired and k + 1 < spec.n_instances else 1
        budget()
        placed = []
        for member in range(unit):
            bh, bw = _draw_size(rng, spec)
            kind = str(rng.choice(spec.shape_kinds))
            taken = boxes + [p[0] for p in placed]
            if member == 0:
                y1 = int(rng.integers(0, h - bh + 1))
                x1 = int(rng.integers(0, w - bw + 1))
                box = (x1, y1, x1 + bw, y1 + bh)
                if any(_boxes_touch(box, b) for b in taken):
                    break
            else:
                box = _place_partner(rng, spec, taken, len(taken) - 1, bh, bw)
                if box is None:
                    break
            mask = render_shape(kind, box, spec.canvas)
            if member == 1 and spec.pair_same_class:
                cls = placed[0][2]
            else:
                cls = int(rng.integers(0, spec.class_count))
            placed.append((box, kind, cls, mask))
        if len(placed) < unit:
            continue
        insts = [InstanceAnnotation(c, m) for _, _, c, m in placed]
        if not _centers_distinct(insts, masks, classes):
            continue
        if unit == 2:
            cov = box_coverage(insts[0].bbox, insts[1].bbox)
            if abs(cov - spec.overlap_fraction) > spec.overlap_tol or insts[0].bbox == insts[1].bbox:
                continue
            pairs.append((k, k + 1))
            measured.append(cov)
        for box, kind, cls, mask in placed:
            boxes.append(box)
            kinds.append(kind)
            classes.append(cls)
            masks.append(mask)

    instances = [InstanceAnnotation(c, m) for c, m in zip(classes, masks)]
    return Scene(spec, instances, kinds, pairs, measured)


def _centers_distinct(new: list, masks, classes) -> bool:
    """No two same-class instances may share a center cell."""
    seen = {(c, center_cell(InstanceAnnotation(c, m).center)) for m, c in zip(masks, classes)}
    for inst in new:
        key = (inst.class_id, center_cell(inst.center))
        if key in seen:
            return False
        seen.add(key)
    return True


def _place_partner(rng, spec: SceneSpec, boxes, partner: int, bh: int, bw: int):
    """Pick a box position whose coverage with ``boxes[partner]`` hits the target."""
    h, w = spec.canvas
    px1, py1, px2, py2 = boxes[partner]
    ys = np.arange(0, h - bh + 1)[:, None]
    xs = np.arange(0, w - bw + 1)[None, :]
    iw = np.minimum(xs + bw, px2) - np.maximum(xs, px1)
    ih = np.minimum(ys + bh, py2) - np.maximum(ys, py1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    cov = inter / min(bw * bh, (px2 - px1) * (py2 - py1))
    ok = (np.abs(cov - spec.overlap_fraction) <= spec.overlap_tol) & (inter > 0)
    for j, b in enumerate(boxes):
        if j == partner:
            continue
        ok &= ~((xs < b[2]) & (b[0] < xs + bw) & (ys < b[3]) & (b[1] < ys + bh))
    cand = np.argwhere(ok)
    if len(cand) == 0:
        return None
    y1, x1 = cand[int(rng.integers(len(cand)))]
    return (int(x1), int(y1), int(x1) + bw, int(y1) + bh)


def upsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(mask, dtype=bool), stride, axis=0), stride, axis=1)


def dataset_document(
    scenes: Iterable[Scene], stride: int, class_names: Sequence[str] | None = None
) -> dict:
    """Annotation-file JSON for scenes, masks upsampled to input resolution and RLE-encoded."""
    scenes = list(scenes)
    n_classes = scenes[0].spec.class_count if scenes else len(class_names or [])
    names = list(class_names) if class_names else [f"class{i}" for i in range(n_classes)]
    images, anns = [], []
    next_id = 1
    for img_id, scene in enumerate(scenes, start=1):
        h, w = scene.spec.canvas
        images.append({"id": img_id, "height": h * stride, "width": w * stride})
        for inst in scene.instances:
            rle = rle_encode(upsample_mask(inst.mask, stride))
            anns.append(
                {
                    "id": next_id,
                    "image_id": img_id,
                    "category_id": inst.class_id + 1,
                    "rle": rle.to_json(),
                    "area": int(inst.mask.sum()) * stride * stride,
                }
            )
            next_id += 1
    return {
        "images": images,
        "annotations": anns,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(names)],
    }
