"""Command line front end: ``eolo synth|encode|fit|decode|roundtrip|eval|bench``.

Every command prints one JSON document on stdout and logs to stderr.
Exit codes: 0 success, 1 check failed (e.g. AP below ``--min-ap``),
2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import read_gmap, write_gmap
from .data import (
    SHAPE_KINDS,
    AnnotationError,
    RleMask,
    SceneError,
    SceneSpec,
    dataset_document,
    generate_scene,
    load_annotations,
    rle_decode,
    rle_encode,
    write_pgm,
)
from .decoder import DecodeConfig, Detection, InstanceResult, decode
from .encoder import InstanceAnnotation, KernelConfig, encode_targets
from .evaluation import EvalConfig, evaluate, format_table
from .losses import TRACE_HEADER, DivergenceError, LossConfig, fit_maps

log = logging.getLogger("eolo")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

KERNEL_ALIASES = {
    "circle": "circle-gaussian",
    "ellipse": "ellipse-gaussian",
    "circle-fixed": "circle-fixed",
    "circle-gaussian": "circle-gaussian",
    "ellipse-gaussian": "ellipse-gaussian",
}


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _env(name: str, default, cast=int):
    raw = os.environ.get(f"EOLO_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise InputError(f"EOLO_{name}={raw!r} is not a valid {cast.__name__}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=None, separators=(", ", ": ")) + "\n")
    sys.stdout.flush()


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror or exc}")
    return out


def _parallel(fn, items, threads: int):
    """Map over items with a bounded pool; results come back in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _kernel_cfg(args) -> KernelConfig:
    try:
        kind = KERNEL_ALIASES[args.kernel]
    except KeyError:
        raise InputError(f"unknown kernel {args.kernel!r}; choose from {sorted(KERNEL_ALIASES)}")
    return KernelConfig(sigma=args.sigma, kernel_kind=kind)


def _decode_cfg(args) -> DecodeConfig:
    return DecodeConfig(
        top_k=args.top_k,
        score_threshold=args.score_threshold,
        seg_threshold=args.seg_threshold,
        iou_assign_threshold=args.iou_assign,
        nms_iou=args.nms,
    )


def _load_dataset(args):
    path = Path(args.annotations)
    if path.is_dir():
        path = path / "annotations.json"
    if not path.exists():
        raise InputError(f"annotation file {path} not found")
    try:
        ds = load_annotations(path, stride=args.stride)
    except (AnnotationError, ValueError) as exc:
        raise InputError(str(exc))
    n_classes = max(args.classes, ds.num_classes)
    return ds, n_classes


def _image_shape(ds, img_id, stride: int) -> tuple[int, int]:
    h, w = ds.images[img_id]
    return h // stride, w // stride


def _write_maps(folder: Path, center, size, seg) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    write_gmap(folder / "center.gmap", center)
    write_gmap(folder / "size.gmap", size)
    write_gmap(folder / "seg.gmap", seg)


def _instances_json(results, stride: int) -> list:
    out = []
    for r in results:
        box = r.detection.box
        out.append(
            {
                "class_id": int(r.class_id),
                "score": round(float(r.score), 6),
                "box": [round(float(v) * stride, 4) for v in box],
                "mask_rle": rle_encode(r.mask).to_json(),
            }
        )
    return out


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    if args.input_size % args.stride:
        raise InputError(f"input size {args.input_size} not divisible by stride {args.stride}")
    canvas = (args.input_size // args.stride,) * 2
    shapes = tuple(s.strip() for s in args.shapes.split(",") if s.strip())
    aspect = tuple(float(v) for v in args.aspect.split(","))
    if len(aspect) != 2:
        raise InputError("--aspect takes LO,HI")
    if not 0 <= args.min_instances <= args.max_instances:
        raise InputError("need 0 <= --min-instances <= --max-instances")
    rng = np.random.default_rng(args.seed)
    scenes = []
    for _ in range(args.images):
        n = int(rng.integers(args.min_instances, args.max_instances + 1))
        scene_seed = int(rng.integers(0, 2**31 - 1))
        try:
            spec = SceneSpec(
                seed=scene_seed,
                canvas=canvas,
                n_instances=n,
                shape_kinds=shapes,
                class_count=args.classes,
                overlap_fraction=args.overlap,
                overlap_tol=args.overlap_tol,
                aspect_range=aspect,
                pair_same_class=args.same_class_pairs,
            )
            scenes.append(generate_scene(spec))
        except SceneError as exc:
            raise InputError(f"scene {len(scenes) + 1}: {exc}")
        except ValueError as exc:
            raise InputError(str(exc))

    doc = dataset_document(scenes, args.stride, [f"class{i}" for i in range(args.classes)])
    (out / "annotations.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    ann_iter = iter(doc["annotations"])
    for scene in scenes:
        for inst in scene.instances:
            ann = next(ann_iter)
            write_pgm(masks / f"img{ann['image_id']:05d}_ann{ann['id']:06d}.pgm", inst.mask)

    measured = [m for s in scenes for m in s.measured_overlap]
    summary = {
        "out": str(out),
        "images": len(scenes),
        "instances": len(doc["annotations"]),
        "classes": args.classes,
        "canvas": list(canvas),
        "stride": args.stride,
        "overlap_target": args.overlap,
        "overlapping_pairs": len(measured),
        "overlap_measured_mean": float(np.mean(measured)) if measured else 0.0,
        "overlap_max_abs_error": float(max((abs(m - args.overlap) for m in measured), default=0.0)),
    }
    _emit(summary)
    return EXIT_OK


def cmd_encode(args) -> int:
    ds, n_classes = _load_dataset(args)
    out = _out_dir(args.out)
    kcfg = _kernel_cfg(args)

    def work(img_id):
        h, w = _image_shape(ds, img_id, args.stride)
        ts = encode_targets(ds.instances[img_id], (n_classes, h, w), kcfg)
        folder = out / f"img{img_id:05d}"
        _write_maps(folder, ts.center_heatmap, ts.size_map, ts.seg_map)
        centers = [
            {"class_id": c, "cell": [int(cell[0]), int(cell[1])], "point": [p.x, p.y], "size": s.tolist()}
            for (c, cell, p), s in zip(ts.center_points, ts.center_sizes)
        ]
        (folder / "centers.json").write_text(json.dumps({"image_id": img_id, "centers": centers}) + "\n")
        return len(centers)

    counts = _parallel(work, sorted(ds.images), args.threads)
    _emit({"out": str(out), "images": len(counts), "centers": int(sum(counts)), "kernel": kcfg.kernel_kind})
    return EXIT_OK


def cmd_fit(args) -> int:
    ds, n_classes = _load_dataset(args)
    out = _out_dir(args.out)
    kcfg = _kernel_cfg(args)
    lcfg = LossConfig()
    rng = np.random.default_rng(args.seed)
    img_ids = sorted(ds.images)
    seeds = {i: int(rng.integers(0, 2**31 - 1)) for i in img_ids}

    def work(img_id):
        h, w = _image_shape(ds, img_id, args.stride)
        ts = encode_targets(ds.instances[img_id], (n_classes, h, w), kcfg)
        try:
            fr = fit_maps(
                ts,
                lcfg,
                steps=args.steps,
                lr=args.lr,
                init_noise=args.init_noise,
                rng=np.random.default_rng(seeds[img_id]),
            )
        except DivergenceError as exc:
            return img_id, None, str(exc)
        folder = out / f"img{img_id:05d}"
        _write_maps(folder, fr.center, fr.size, fr.seg)
        rows = fr.trace_rows()
        with open(out / f"trace_img{img_id:05d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            writer.writerows((r[0],) + tuple(f"{v:.9g}" for v in r[1:]) for r in rows)
        if args.figures:
            from .report import plot_fit_trace

            plot_fit_trace(rows, out / f"trace_img{img_id:05d}.png", title=f"image {img_id}")
        return img_id, rows, None

    results = _parallel(work, img_ids, args.threads)
    for img_id, _, err in results:
        if err:
            log.error("image %s: %s", img_id, err)
            _emit({"error": err, "image_id": img_id})
            return EXIT_NUMERIC
    traces = {img_id: rows for img_id, rows, _ in results}
    improved = {i: rows[-1][-1] < rows[0][-1] for i, rows in traces.items()}
    _emit(
        {
            "out": str(out),
            "images": len(traces),
            "steps": args.steps,
            "lr": args.lr,
            "initial_total": {str(i): rows[0][-1] for i, rows in traces.items()},
            "final_total": {str(i): rows[-1][-1] for i, rows in traces.items()},
            "all_decreased": all(improved.values()),
        }
    )
    return EXIT_OK if all(improved.values()) else EXIT_CHECK


def _read_map_dirs(root: Path):
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "center.gmap").exists())
    if not dirs:
        raise InputError(f"no map folders (with center.gmap) under {root}")
    for d in dirs:
        try:
            img_id = int(d.name.lstrip("img"))
        except ValueError:
            img_id = d.name
        try:
            yield img_id, read_gmap(d / "center.gmap"), read_gmap(d / "size.gmap"), read_gmap(d / "seg.gmap")
        except (OSError, ValueError) as exc:
            raise InputError(f"{d}: {exc}")


def cmd_decode(args) -> int:
    root = Path(args.maps)
    if not root.is_dir():
        raise InputError(f"map directory {root} not found")
    cfg = _decode_cfg(args)
    items = list(_read_map_dirs(root))

    def work(item):
        img_id, center, size, seg = item
        diag = {}
        try:
            res = decode(center, size, seg, cfg, diagnostics=diag)
        except ValueError as exc:
            raise InputError(f"image {img_id}: {exc}")
        return {
            "image_id": img_id,
            "unassigned_pixels": diag.get("unassigned_pixels", 0),
            "instances": _instances_json(res, args.stride),
        }

    doc = {"stride": args.stride, "images": _parallel(work, items, args.threads)}
    if args.out:
        Path(args.out).write_text(json.dumps(doc) + "\n")
        _emit({"out": args.out, "images": len(doc["images"]), "instances": sum(len(i["instances"]) for i in doc["images"])})
    else:
        _emit(doc)
    return EXIT_OK


def _add_noise(maps, sigma: float, rng: np.random.Generator):
    center, size, seg = maps
    if sigma <= 0:
        return center, size, seg
    center = np.clip(center + rng.normal(0, sigma, center.shape), 0, 1)
    size = size + rng.normal(0, sigma, size.shape)
    seg = np.clip(seg + rng.normal(0, sigma, seg.shape), 0, 1)
    return center, size, seg


def cmd_roundtrip(args) -> int:
    ds, n_classes = _load_dataset(args)
    kcfg = _kernel_cfg(args)
    dcfg = _decode_cfg(args)
    rng = np.random.default_rng(args.seed)
    img_ids = sorted(ds.images)
    seeds = {i: int(rng.integers(0, 2**31 - 1)) for i in img_ids}

    def work(img_id):
        h, w = _image_shape(ds, img_id, args.stride)
        ts = encode_targets(ds.instances[img_id], (n_classes, h, w), kcfg)
        img_rng = np.random.default_rng(seeds[img_id])
        if args.fit_steps:
            fr = fit_maps(ts, steps=args.fit_steps, lr=args.lr, init_noise=args.init_noise, rng=img_rng)
            maps = (fr.center, fr.size, fr.seg)
        else:
            maps = (ts.center_heatmap, ts.size_map, ts.seg_map)
        maps = _add_noise(maps, args.noise, img_rng)
        return img_id, maps, decode(*maps, dcfg)

    try:
        out = _parallel(work, img_ids, args.threads)
    except DivergenceError as exc:
        _emit({"error": str(exc)})
        return EXIT_NUMERIC
    preds = {i: r for i, _, r in out}
    result = evaluate(preds, ds.instances, EvalConfig(stride=args.stride))
    label = kcfg.kernel_kind
    doc = {
        "kernel": label,
        "noise": args.noise,
        "fit_steps": args.fit_steps,
        "min_ap": args.min_ap,
        "passed": result.mean_ap >= args.min_ap,
        **result.to_dict(),
    }
    if args.report:
        rep = _out_dir(args.report)
        from .report import plot_maps, plot_pr_curves

        (rep / "eval.json").write_text(json.dumps(doc, indent=2) + "\n")
        (rep / "table.txt").write_text(format_table({label: result}) + "\n")
        with open(rep / "ap_per_threshold.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("iou_threshold", "ap"))
            writer.writerows((f"{t:.2f}", f"{v:.6f}") for t, v in result.ap_per_threshold.items())
        plot_pr_curves(result, rep / "pr_curves.png")
        if out:
            img_id, (center, _, seg), res = out[0]
            plot_maps(center, seg, res, rep / f"maps_img{img_id:05d}.png")
    log.info("\n%s", format_table({label: result}))
    _emit(doc)
    return EXIT_OK if doc["passed"] else EXIT_CHECK


def _load_predictions(path: Path, ds, stride: int) -> dict:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}")
    preds = {}
    seen = set()
    for img in doc.get("images", []):
        img_id = img["image_id"]
        if img_id not in ds.images:
            raise InputError(f"predictions reference unknown image {img_id}")
        items = []
        for k, inst in enumerate(img.get("instances", [])):
            pid = inst.get("id")
            if pid is not None:
                if pid in seen:
                    raise InputError(f"duplicate prediction id {pid}")
                seen.add(pid)
            mask = rle_decode(RleMask.from_json(inst["mask_rle"]))
            box = [v / stride for v in inst.get("box", [0, 0, 0, 0])]
            det = Detection(int(inst["class_id"]), None, float(inst["score"]), tuple(box))
            items.append(InstanceResult(det, mask, pred_id=pid))
        preds[img_id] = items
    return preds


def cmd_eval(args) -> int:
    ds, _ = _load_dataset(args)
    preds = _load_predictions(Path(args.predictions), ds, args.stride)
    try:
        result = evaluate(preds, ds.instances, EvalConfig(stride=args.stride))
    except ValueError as exc:
        raise InputError(str(exc))
    table = format_table({args.name: result})
    if args.format == "table":
        sys.stdout.write(table + "\n")
    else:
        _emit(result.to_dict())
    log.info("\n%s", table)
    return EXIT_OK


def bench_maps(n_classes: int, h: int, w: int, n_instances: int, rng: np.random.Generator, noise: float = 0.02):
    """Encoded maps of random rectangles plus low background noise, as float32."""
    anns = []
    for _ in range(n_instances):
        bh = int(rng.integers(2, max(3, h // 4)))
        bw = int(rng.integers(2, max(3, w // 4)))
        y, x = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        m = np.zeros((h, w), dtype=bool)
        m[y : y + bh, x : x + bw] = True
        anns.append(InstanceAnnotation(int(rng.integers(0, n_classes)), m))
    ts = encode_targets(anns, (n_classes, h, w))
    center = np.clip(ts.center_heatmap * 0.9 + rng.uniform(0, noise, ts.center_heatmap.shape), 0, 1)
    seg = np.clip(ts.seg_map * 0.9 + rng.uniform(0, noise, ts.seg_map.shape), 0, 1)
    return center.astype(np.float32), ts.size_map.astype(np.float32), seg.astype(np.float32)


def time_decode(maps, cfg: DecodeConfig, iterations: int, warmup: int = 3) -> dict:
    for _ in range(warmup):
        decode(*maps, cfg)
    times = []
    n_out = 0
    for _ in range(iterations):
        t0 = time.perf_counter()
        res = decode(*maps, cfg)
        times.append((time.perf_counter() - t0) * 1e3)
        n_out = len(res)
    times.sort()
    return {
        "median_ms": statistics.median(times),
        "p95_ms": times[min(len(times) - 1, int(np.ceil(0.95 * len(times))) - 1)],
        "min_ms": times[0],
        "n_detections": n_out,
    }


def cmd_bench(args) -> int:
    if args.iterations < 10:
        raise InputError("--iterations must be >= 10")
    rng = np.random.default_rng(args.seed)
    cfg = DecodeConfig(top_k=100)
    c, h, w = args.classes, args.height, args.width
    cases = []
    base = bench_maps(c, h, w, args.detections, rng)
    cases.append({"label": "base", "shape": [c, h, w], **time_decode(base, cfg, args.iterations)})
    empty = tuple(np.zeros_like(m) for m in base)
    cases.append({"label": "empty", "shape": [c, h, w], **time_decode(empty, cfg, args.iterations)})
    double = bench_maps(c, 2 * h, 2 * w, args.detections, rng)
    cases.append({"label": "double", "shape": [c, 2 * h, 2 * w], **time_decode(double, cfg, args.iterations)})
    report = {
        "iterations": args.iterations,
        "budget_ms": args.budget_ms,
        "within_budget": cases[0]["median_ms"] <= args.budget_ms,
        "scaling_ratio": cases[2]["median_ms"] / cases[0]["median_ms"],
        "cases": [{k: (round(v, 4) if isinstance(v, float) else v) for k, v in cs.items()} for cs in cases],
    }
    if args.report:
        from .report import plot_bench

        rep = _out_dir(args.report)
        (rep / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
        plot_bench(report, rep / "bench.png")
    _emit(report)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _global_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options (env EOLO_<NAME> overrides the default)")
    g.add_argument("--seed", type=int, default=_env("SEED", 0))
    g.add_argument("--stride", type=int, default=_env("STRIDE", 8), choices=(2, 4, 8, 16))
    g.add_argument("--input-size", type=int, default=_env("INPUT_SIZE", 512))
    g.add_argument("--classes", type=int, default=_env("CLASSES", 2))
    g.add_argument("--threads", type=int, default=_env("THREADS", 1))
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _add_kernel_args(p):
    p.add_argument("--kernel", default="ellipse", help="ellipse | circle | circle-fixed")
    p.add_argument("--sigma", type=float, default=1.0)


def _add_decode_args(p):
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.add_argument("--seg-threshold", type=float, default=0.5)
    p.add_argument("--iou-assign", type=float, default=0.0)
    p.add_argument("--nms", type=float, default=None, help="enable NMS at this IoU")


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    parser = argparse.ArgumentParser(prog="eolo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[parent], help="write a synthetic annotation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=6)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--overlap-tol", type=float, default=0.1)
    p.add_argument("--shapes", default=",".join(SHAPE_KINDS))
    p.add_argument("--aspect", default="1,2", help="LO,HI long/short side ratio")
    p.add_argument("--same-class-pairs", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", parents=[parent], help="encode annotations into target maps")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    _add_kernel_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fit", parents=[parent], help="fit head maps to encoded targets by gradient descent")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--init-noise", type=float, default=0.0)
    p.add_argument("--figures", action="store_true", help="also render trace plots")
    _add_kernel_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decode", parents=[parent], help="decode map folders into instances")
    p.add_argument("--maps", required=True)
    p.add_argument("--out")
    _add_decode_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip", parents=[parent], help="encode, (fit,) decode and evaluate")
    p.add_argument("--annotations", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--fit-steps", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--init-noise", type=float, default=0.0)
    p.add_argument("--min-ap", type=float, default=0.95)
    p.add_argument("--report", help="directory for eval.json, table.txt, csv and figures")
    _add_kernel_args(p)
    _add_decode_args(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval", parents=[parent], help="score decoded predictions against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--name", default="EOLO")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[_global_parent()], help="time the decode path on random maps")
    p.set_defaults(classes=80)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--detections", type=int, default=100)
    p.add_argument("--budget-ms", type=float, default=5.0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except InputError as exc:
        print(f"eolo: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
