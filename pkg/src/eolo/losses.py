"""Training losses for the three heads, their gradients, and a per-pixel map fitter.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction map it was given. ``fit_maps`` chains those through
a logistic squashing for the probability heads.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .encoder import TargetSet

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-6
    w_center: float = 1.0
    w_size: float = 1.0
    w_boundary: float = 1.0
    w_seg: float = 1.0
    # "centers": divide the segmentation loss by the number of centers;
    # "pixels": divide by the number of positive segmentation pixels
    seg_norm: str = "centers"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.seg_norm not in ("centers", "pixels"):
            raise ValueError(f"unknown seg_norm {self.seg_norm!r}")


@dataclass
class LossReport:
    l_center: float
    l_size: float
    l_boundary: float
    l_seg: float
    total: float
    n_centers: int
    n_boundary_pixels: int
    grads: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("grads")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _check_shape(pred: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != tuple(shape):
        raise ValueError(f"{name}: prediction shape {pred.shape} does not match target shape {tuple(shape)}")
    return pred


def _norm(target: TargetSet) -> float:
    return float(max(target.n_centers, 1))


def _clamped(pred: np.ndarray, eps: float):
    p = np.clip(pred, eps, 1.0 - eps)
    # derivative of the clamp: zero where it is active
    live = (pred > eps) & (pred < 1.0 - eps)
    return p, live


def center_loss_map(pred: np.ndarray, heat: np.ndarray, cfg: LossConfig = LossConfig()):
    """Per-cell focal terms (positive sign) and their derivatives w.r.t. ``pred``.

    Cells where the target equals 1 are positives; every other cell is a
    negative whose penalty is scaled by ``(1 - Y)**beta``.
    """
    p, live = _clamped(pred, cfg.eps)
    a, b = cfg.alpha, cfg.beta
    pos = heat >= 1.0
    q = 1.0 - p
    log_p, log_q = np.log(p), np.log(q)
    neg_w = np.where(pos, 0.0, (1.0 - np.minimum(heat, 1.0)) ** b)

    val = np.where(pos, -(q**a) * log_p, -neg_w * p**a * log_q)
    d_pos = a * q ** (a - 1) * log_p - q**a / p if a > 0 else -1.0 / p
    d_neg = -neg_w * ((a * p ** (a - 1) * log_q if a > 0 else 0.0) - p**a / q)
    grad = np.where(pos, d_pos, d_neg) * live
    return val, grad


def center_loss(pred: np.ndarray, target: TargetSet, cfg: LossConfig = LossConfig()):
    pred = _check_shape(pred, target.center_heatmap.shape, "center_loss")
    val, grad = center_loss_map(pred, target.center_heatmap, cfg)
    n = _norm(target)
    return float(val.sum() / n), grad / n


def size_loss(pred: np.ndarray, target: TargetSet, cfg: LossConfig = LossConfig()):
    pred = _check_shape(pred, target.size_map.shape, "size_loss")
    grad = np.zeros_like(pred)
    if target.n_centers == 0:
        return 0.0, grad
    n = _norm(target)
    cells = target.center_cells()
    diff = pred[:, cells[:, 0], cells[:, 1]].T - target.center_sizes
    loss = float((diff**2).sum() / n)
    # repeated center cells accumulate
    np.add.at(grad, (slice(None), cells[:, 0], cells[:, 1]), (2.0 * diff / n).T)
    return loss, grad


def boundary_loss(pred: np.ndarray, target: TargetSet, cfg: LossConfig = LossConfig()):
    """Squared error against the per-pixel 4D targets over foreground pixels, divided by N."""
    pred = _check_shape(pred, target.size_map.shape, "boundary_loss")
    n = _norm(target)
    valid = target.size_valid
    diff = (pred - target.size_map) * valid
    return float((diff**2).sum() / n), 2.0 * diff / n


def seg_loss(pred: np.ndarray, target: TargetSet, cfg: LossConfig = LossConfig()):
    pred = _check_shape(pred, target.seg_map.shape, "seg_loss")
    p, live = _clamped(pred, cfg.eps)
    a = cfg.alpha
    pos = target.seg_map >= 0.5
    q = 1.0 - p
    log_p, log_q = np.log(p), np.log(q)
    val = np.where(pos, -(q**a) * log_p, -(p**a) * log_q)
    d_pos = a * q ** (a - 1) * log_p - q**a / p if a > 0 else -1.0 / p
    d_neg = -((a * p ** (a - 1) * log_q if a > 0 else 0.0) - p**a / q)
    grad = np.where(pos, d_pos, d_neg) * live
    if cfg.seg_norm == "pixels":
        n = float(max(int(pos.sum()), 1))
    else:
        n = _norm(target)
    return float(val.sum() / n), grad / n


def total_loss(center_pred, size_pred, seg_pred, target: TargetSet, cfg: LossConfig = LossConfig()) -> LossReport:
    lc, gc = center_loss(center_pred, target, cfg)
    ls, gs = size_loss(size_pred, target, cfg)
    lb, gb = boundary_loss(size_pred, target, cfg)
    lg, gg = seg_loss(seg_pred, target, cfg)
    total = cfg.w_center * lc + cfg.w_size * ls + cfg.w_boundary * lb + cfg.w_seg * lg
    for name, v in (("center", lc), ("size", ls), ("boundary", lb), ("seg", lg)):
        if not np.isfinite(v):
            raise DivergenceError(f"{name} loss is not finite")
    grads = {
        "center": cfg.w_center * gc,
        "size": cfg.w_size * gs + cfg.w_boundary * gb,
        "seg": cfg.w_seg * gg,
    }
    return LossReport(
        l_center=lc,
        l_size=ls,
        l_boundary=lb,
        l_seg=lg,
        total=float(total),
        n_centers=target.n_centers,
        n_boundary_pixels=int(target.size_valid.sum()),
        grads=grads,
    )


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class FitResult:
    center: np.ndarray
    size: np.ndarray
    seg: np.ndarray
    trace: list  # LossReport per step, initial state first

    def trace_rows(self) -> list[tuple]:
        return [
            (i, r.l_center, r.l_size, r.l_boundary, r.l_seg, r.total) for i, r in enumerate(self.trace)
        ]


TRACE_HEADER = ("step", "l_center", "l_size", "l_boundary", "l_seg", "total")


def fit_maps(
    target: TargetSet,
    cfg: LossConfig = LossConfig(),
    steps: int = 500,
    lr: float = 0.5,
    prior: float = 0.1,
    init_noise: float = 0.0,
    rng: np.random.Generator | None = None,
    smoothing: float = 0.0,
) -> FitResult:
    """Gradient descent on free per-pixel parameters until the heads reproduce ``target``.

    Probability heads are ``sigmoid(z)`` of unconstrained logits initialised
    at ``logit(prior)`` (plus optional Gaussian noise of std ``init_noise``).
    Size parameters start at zero and take steps scaled by the inverse of
    their quadratic curvature, so ``lr`` means the same thing for every head.

    ``smoothing > 0`` ties neighbouring logits together: the center head is
    read through a Gaussian blur of that std (in cells) over the free
    parameters, and the gradient is the adjoint blur.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not lr > 0:
        raise ValueError("lr must be > 0")
    n_classes, h, w = target.shape
    rng = rng if rng is not None else np.random.default_rng(0)
    z0 = logit(prior)
    zc = np.full((n_classes, h, w), z0)
    zs = np.full((n_classes, h, w), z0)
    if init_noise > 0:
        zc += rng.normal(0.0, init_noise, zc.shape)
        zs += rng.normal(0.0, init_noise, zs.shape)
    size = np.zeros((4, h, w))

    blur = _blur_operator(smoothing) if smoothing > 0 else None
    n = _norm(target)
    size_step = lr * n / (2.0 * max(cfg.w_size + cfg.w_boundary, 1e-12))

    def center_of(z):
        return sigmoid(blur(z) if blur else z)

    trace = []
    # overflow is caught below and reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            pc_in = blur(zc) if blur else zc
            pc, ps = sigmoid(pc_in), sigmoid(zs)
            report = total_loss(pc, size, ps, target, cfg)
            if not np.isfinite(report.total):
                raise DivergenceError("diverged; reduce lr")
            trace.append(report)
            if step == steps:
                break
            g = report.grads
            gzc = g["center"] * pc * (1.0 - pc)
            if blur:
                gzc = blur(gzc)  # symmetric kernel: adjoint equals itself
            zc -= lr * gzc
            zs -= lr * g["seg"] * ps * (1.0 - ps)
            size -= size_step * g["size"]
            if not (np.isfinite(zc).all() and np.isfinite(zs).all() and np.isfinite(size).all()):
                raise DivergenceError("diverged; reduce lr")

    logger.debug("fit_maps: %d steps, total %.4g -> %.4g", steps, trace[0].total, trace[-1].total)
    return FitResult(center_of(zc), size, sigmoid(zs), trace)


def _blur_operator(sigma: float):
    radius = max(1, int(np.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()

    def blur(a: np.ndarray) -> np.ndarray:
        # zero padding keeps the operator symmetric
        out = np.zeros_like(a)
        h, w = a.shape[-2:]
        tmp = np.zeros_like(a)
        for i, kv in zip(range(-radius, radius + 1), k):
            if abs(i) >= h:
                continue
            if i >= 0:
                tmp[..., : h - i, :] += kv * a[..., i:, :]
            else:
                tmp[..., -i:, :] += kv * a[..., : h + i, :]
        for i, kv in zip(range(-radius, radius + 1), k):
            if abs(i) >= w:
                continue
            if i >= 0:
                out[..., :, : w - i] += kv * tmp[..., :, i:]
            else:
                out[..., :, -i:] += kv * tmp[..., :, : w + i]
        return out

    return blur
