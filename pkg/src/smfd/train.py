"""Optimizer, schedule state machines, augmentation, fold splits and smoke training."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from . import metrics
from .maskops import MERGED_CLASSES, TrainingPair, make_pair
from .nets import NetConfig, backward, build_network, init_weights, run
from .rng import Stream, derive_seed

MIN_DELTA = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam update. Parameters without a gradient are left as-is."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient {name!r} has shape {np.shape(g)}, "
                             f"parameter has {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v = dict(state.m), dict(state.v)
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        mp = m.get(name, np.zeros_like(p))
        vp = v.get(name, np.zeros_like(p))
        m[name] = b1 * mp + (1 - b1) * g
        v[name] = b2 * vp + (1 - b2) * g * g
        mhat = m[name] / (1 - b1**t)
        vhat = v[name] / (1 - b2**t)
        out[name] = (p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return replace(state, step=t, m=m, v=v), out


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class PlateauState:
    lr: float = 1e-3
    best: float = -math.inf
    stall: int = 0
    factor: float = 0.2
    patience: int = 5
    floor: float = 1e-9
    monitored: str = "ssim"


def plateau_step(state: PlateauState, epoch_metric: float) -> PlateauState:
    """Maximize-mode plateau schedule: shrink lr after ``patience`` flat epochs."""
    if epoch_metric > state.best + MIN_DELTA:
        return replace(state, best=epoch_metric, stall=0)
    stall = state.stall + 1
    if stall >= state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.floor), stall=0)
    return replace(state, stall=stall)


@dataclass(frozen=True)
class EarlyStopState:
    best: float = -math.inf
    stall: int = 0
    patience: int = 10
    stopped: bool = False


def early_stop_step(state: EarlyStopState, epoch_metric: float) -> EarlyStopState:
    if state.stopped:
        return state
    if epoch_metric > state.best + MIN_DELTA:
        return replace(state, best=epoch_metric, stall=0)
    stall = state.stall + 1
    return replace(state, stall=stall, stopped=stall >= state.patience)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    max_rotation: float = 30.0
    flip_prob: float = 0.5
    crop_range: tuple[float, float] = (0.8, 1.0)
    brightness_range: tuple[float, float] = (0.7, 1.3)
    contrast_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        if not 0 <= self.max_rotation <= 30:
            raise ValueError("rotation limit must be within 30 degrees")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must be in [0, 1]")
        lo, hi = self.crop_range
        if not 0.8 <= lo <= hi <= 1.0:
            raise ValueError("crop scale must lie in [0.8, 1.0]")
        for lo, hi in (self.brightness_range, self.contrast_range):
            if not 0.7 <= lo <= hi <= 1.3:
                raise ValueError("photometric factors must lie in [0.7, 1.3]")


@dataclass(frozen=True)
class AugmentDraw:
    angle: float = 0.0
    flip: bool = False
    crop: float = 1.0
    crop_y: float = 0.5  # offset as a fraction of the free margin
    crop_x: float = 0.5
    brightness: float = 1.0
    contrast: float = 1.0


def sample_draw(spec: AugmentSpec, seed: int) -> AugmentDraw:
    rs = Stream(seed)
    return AugmentDraw(
        angle=rs.uniform_range(-spec.max_rotation, spec.max_rotation),
        flip=rs.uniform() < spec.flip_prob,
        crop=rs.uniform_range(*spec.crop_range),
        crop_y=rs.uniform(),
        crop_x=rs.uniform(),
        brightness=rs.uniform_range(*spec.brightness_range),
        contrast=rs.uniform_range(*spec.contrast_range),
    )


def _geometric(img, draw, interp):
    h, w = img.shape[:2]
    out = img
    if draw.angle:
        m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), draw.angle, 1.0)
        out = cv2.warpAffine(out, m, (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT,
                             borderValue=0)
    if draw.flip:
        out = out[:, ::-1]
    if draw.crop < 1.0:
        ch, cw = max(1, round(h * draw.crop)), max(1, round(w * draw.crop))
        y0 = int(round((h - ch) * draw.crop_y))
        x0 = int(round((w - cw) * draw.crop_x))
        out = cv2.resize(np.ascontiguousarray(out[y0 : y0 + ch, x0 : x0 + cw]), (w, h),
                         interpolation=interp)
    out = np.ascontiguousarray(out)
    return out.reshape(img.shape)


def _photometric(img, draw):
    out = img * draw.brightness
    if draw.contrast != 1.0:
        mu = out.mean()
        out = (out - mu) * draw.contrast + mu
    return np.clip(out, 0.0, 1.0)


def apply_draw(pair: TrainingPair, draw: AugmentDraw) -> TrainingPair:
    """Apply one draw: geometry to images and mask alike, photometry to images only."""
    sharp = _geometric(np.asarray(pair.sharp, dtype=np.float64), draw, cv2.INTER_LINEAR)
    blurry = _geometric(np.asarray(pair.blurry, dtype=np.float64), draw, cv2.INTER_LINEAR)
    mask = _geometric(pair.mask.labels.astype(np.uint8), draw, cv2.INTER_NEAREST)
    return make_pair(_photometric(sharp, draw), _photometric(blurry, draw), mask)


def augment(pair: TrainingPair, spec: AugmentSpec, draw_seed: int) -> TrainingPair:
    return apply_draw(pair, sample_draw(spec, draw_seed))


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    test: tuple[int, ...]
    folds: tuple[tuple[int, ...], ...]

    def train_val(self, k: int) -> tuple[list[int], list[int]]:
        """Indices for round ``k``: train on the other folds, validate on fold k."""
        train = [i for j, f in enumerate(self.folds) if j != k for i in f]
        return train, list(self.folds[k])


def kfold_split(n: int, seed: int = 0, folds: int = 5, test_fraction: float = 0.2) -> FoldPlan:
    if n < 10:
        raise ValueError(f"need at least 10 samples for a split, got {n}")
    perm = Stream(seed).permutation(n)
    n_test = int(math.floor(n * test_fraction + 0.5))
    pool = perm[n_test:]
    parts = np.array_split(pool, folds)
    return FoldPlan(tuple(int(i) for i in perm[:n_test]),
                    tuple(tuple(int(i) for i in p) for p in parts))


# ---------------------------------------------------------------------------
# smoke training


# Dice loss has small gradients at init; the mask model needs a larger step.
DEFAULT_LR = {"smfd_unet": 1e-3, "mask_generator": 1e-2}


def synthetic_pairs(n: int = 8, size: int = 32, seed: int = 0) -> list[TrainingPair]:
    """Cartoon faces: face disc, hair cap, hat brim, eyes and mouth, with a blurred copy.

    Every merged class appears, so no Dice channel is stuck at an empty target.
    """
    from .degrade import BlurOp, blur, make_kernel

    pairs = []
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for i in range(n):
        rs = Stream(derive_seed(seed, i))
        cy, cx = 0.5 + 0.1 * (rs.uniform() - 0.5), 0.5 + 0.1 * (rs.uniform() - 0.5)
        r = 0.3 + 0.08 * rs.uniform()
        labels = np.zeros((size, size), dtype=np.uint8)
        face = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        hair = face & (yy < cy - 0.55 * r)
        labels[face] = 3
        labels[hair] = 4
        labels[(np.abs(yy - (cy - r - 0.03)) < 0.03) & (np.abs(xx - cx) < 0.8 * r)] = 2
        for ex in (cx - 0.4 * r, cx + 0.4 * r):
            labels[(yy - (cy - 0.15 * r)) ** 2 + (xx - ex) ** 2 < (0.14 * r) ** 2] = 1
        labels[(np.abs(yy - (cy + 0.45 * r)) < 0.06 * r) & (np.abs(xx - cx) < 0.35 * r)] = 1
        palette = np.array([rs.uniform(3) for _ in range(5)]) * 0.6 + 0.2
        sharp = palette[labels] * 255
        op = BlurOp("motion", 5, rs.choice(("horizontal", "vertical", "diagonal")))
        blurry = blur(blur(sharp, make_kernel(op)), make_kernel(BlurOp("gaussian", 3)))
        pairs.append(make_pair(sharp / 255.0, blurry / 255.0, labels))
    return pairs


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    best_weights: dict[str, np.ndarray]
    best_metric: float
    trace: list[tuple[int, float, float]]  # (step, loss, metric)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "metric"])
            for step, loss, metric in self.trace:
                w.writerow([step, repr(loss), repr(metric)])


def _batch(kind: str, data: Sequence[TrainingPair]):
    if kind == "smfd_unet":
        inputs = {"image": np.stack([p.blurry for p in data]),
                  "mask": np.stack([p.mask_onehot for p in data])}
        target = np.stack([p.sharp for p in data])
    else:
        inputs = {"image": np.stack([p.blurry_gray for p in data])}
        target = np.stack([p.mask_onehot for p in data])
    return inputs, target.astype(np.float32)


def _loss(kind, out, target):
    """(loss, dloss/dout, monitored metric)."""
    if kind == "smfd_unet":
        diff = out.astype(np.float64) - target
        loss = float(np.mean(diff**2))
        metric = metrics.ssim(out, target, max_value=1.0)
        return loss, (2.0 * diff / diff.size).astype(np.float32), metric
    loss, grad = metrics.dice_loss_grad(out, target)
    return loss, grad.astype(np.float32), 1.0 - loss


def train_smoke(kind: str, config: NetConfig, data: Sequence[TrainingPair], steps: int = 200,
                seed: int = 0, lr: float | None = None) -> TrainResult:
    """Full-batch Adam on ``data`` for ``steps`` steps.

    The loss is MSE for the deblurring network and Dice loss for the mask
    generator; the monitored metric is SSIM or Dice respectively. The weights
    that produced the best metric are kept as the checkpoint. ``lr`` defaults
    to ``DEFAULT_LR[kind]``.
    """
    size = data[0].sharp.shape[0] if data else config.input_size
    if size > 32 or config.base_channels > 8:
        raise ValueError("smoke training is limited to 32x32 inputs and 8 base channels")
    if data and config.input_size != size:
        config = replace(config, input_size=size)
    graph = build_network(kind, config)
    weights = init_weights(graph, seed)
    trainable = {n for n, s in graph.params.items() if s.trainable}
    best = {k: v.copy() for k, v in weights.items()}
    best_metric = -math.inf
    trace: list[tuple[int, float, float]] = []
    if steps <= 0:
        return TrainResult(weights, best, best_metric, trace)
    inputs, target = _batch(kind, data)
    state = AdamState(lr=DEFAULT_LR[kind] if lr is None else lr)
    for step in range(steps):
        tape = run(graph, weights, inputs, training=True)
        loss, dout, metric = _loss(kind, tape.output, target)
        trace.append((step, loss, metric))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}", trace)
        if metric > best_metric + MIN_DELTA:
            best_metric = metric
            best = {k: v.copy() for k, v in weights.items()}
        pgrads, _ = backward(graph, weights, tape, dout)
        state, weights = adam_step(state, weights, {k: g for k, g in pgrads.items()
                                                    if k in trainable})
        for name, val in tape.running.items():
            weights[name] = val.astype(np.float32)
    return TrainResult(weights, best, best_metric, trace)
