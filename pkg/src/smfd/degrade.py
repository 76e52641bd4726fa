"""Randomized synthetic degradation: heavy blur, resolution loss, noise.

A :class:`DegradationPlan` is sampled from a seed by :func:`sample_plan` and
applied by :func:`apply_plan`. Plans are plain data, so they can be written
to a manifest and replayed later to reproduce the exact output.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import cv2
import numpy as np

from .rng import Stream, derive_seed

KERNEL_SIZES = (15, 21, 25, 31, 35, 41)
DIRECTIONS = ("horizontal", "vertical", "diagonal", "anti_diagonal")
SEQUENCES = ("M", "GM", "MG", "GMG")
SCALE_RANGE = (2.0, 4.0)
NOISE_RANGE = (5.0, 10.0)

# Separate stream for the noise field so it never shares draws with plan sampling.
_NOISE_STREAM = 0x6E6F697365


def gaussian_sigma(kernel_size: int) -> float:
    """Conventional size-to-sigma rule: 0.3 * ((k - 1) / 2 - 1) + 0.8."""
    return 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8


@dataclass(frozen=True)
class BlurOp:
    kind: str
    kernel_size: int
    direction: str | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "motion"):
            raise ValueError(f"unknown blur kind {self.kind!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.kind == "motion" and self.direction not in DIRECTIONS:
            raise ValueError(f"motion blur needs a direction from {DIRECTIONS}")
        if self.kind == "gaussian" and self.direction is not None:
            raise ValueError("gaussian blur takes no direction")

    @property
    def sigma(self) -> float | None:
        return gaussian_sigma(self.kernel_size) if self.kind == "gaussian" else None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "kernel_size": self.kernel_size}
        if self.direction is not None:
            d["direction"] = self.direction
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlurOp":
        return cls(d["kind"], int(d["kernel_size"]), d.get("direction"))


@dataclass(frozen=True)
class BlurLayer:
    sequence: str
    ops: tuple[BlurOp, ...]

    def __post_init__(self):
        if self.sequence not in SEQUENCES:
            raise ValueError(f"unknown sequence {self.sequence!r}")
        letters = "".join("G" if op.kind == "gaussian" else "M" for op in self.ops)
        if letters != self.sequence:
            raise ValueError(f"ops spell {letters!r}, sequence says {self.sequence!r}")

    def to_dict(self) -> dict:
        return {"sequence": self.sequence, "ops": [op.to_dict() for op in self.ops]}

    @classmethod
    def from_dict(cls, d: dict) -> "BlurLayer":
        return cls(d["sequence"], tuple(BlurOp.from_dict(o) for o in d["ops"]))


@dataclass(frozen=True)
class DegradeConfig:
    """Sampling space for :func:`sample_plan`."""

    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    directions: tuple[str, ...] = DIRECTIONS
    max_layers: int = 3
    scale_range: tuple[float, float] = SCALE_RANGE
    noise_range: tuple[float, float] = NOISE_RANGE

    def __post_init__(self):
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive: {self.kernel_sizes}")
        if not 1 <= self.max_layers:
            raise ValueError("max_layers must be at least 1")
        unknown = set(self.directions) - set(DIRECTIONS)
        if not self.directions or unknown:
            raise ValueError(f"bad directions {self.directions}")


@dataclass(frozen=True)
class DegradationPlan:
    layers: tuple[BlurLayer, ...]
    scale: float
    noise_sigma: float
    seed: int

    def validate(self, config: DegradeConfig = DegradeConfig()) -> None:
        if not 1 <= len(self.layers) <= config.max_layers:
            raise ValueError(f"plan has {len(self.layers)} layers, allowed 1..{config.max_layers}")
        lo, hi = config.scale_range
        if not lo <= self.scale <= hi:
            raise ValueError(f"scale {self.scale} outside [{lo}, {hi}]")
        lo, hi = config.noise_range
        if not lo <= self.noise_sigma <= hi:
            raise ValueError(f"noise {self.noise_sigma} outside [{lo}, {hi}]")
        for layer in self.layers:
            for op in layer.ops:
                if op.kernel_size not in config.kernel_sizes:
                    raise ValueError(f"kernel size {op.kernel_size} not in {config.kernel_sizes}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layers": [layer.to_dict() for layer in self.layers],
            "scale": self.scale,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationPlan":
        return cls(tuple(BlurLayer.from_dict(x) for x in d["layers"]),
                   float(d["scale"]), float(d["noise_sigma"]), int(d["seed"]))


# ---------------------------------------------------------------------------
# kernels and blurring


def make_kernel(op: BlurOp) -> np.ndarray:
    k = op.kernel_size
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    c = k // 2
    if op.kind == "gaussian":
        s = op.sigma
        ax = np.arange(k, dtype=np.float64) - c
        xx, yy = np.meshgrid(ax, ax)
        g = np.exp(-(xx**2 + yy**2) / (2 * s * s)) / (2 * math.pi * s * s)
        return g / g.sum()
    kern = np.zeros((k, k))
    idx = np.arange(k)
    if op.direction == "horizontal":
        kern[c, :] = 1.0
    elif op.direction == "vertical":
        kern[:, c] = 1.0
    elif op.direction == "diagonal":
        kern[idx, idx] = 1.0
    else:
        kern[idx, k - 1 - idx] = 1.0
    return kern / k


def blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with reflect-101 borders, clamped to [0, 255].

    ``image`` is (H, W) or (H, W, C) with values on the 0..255 scale.
    """
    kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {kernel.shape}")
    h, w = image.shape[:2]
    if kh > 2 * min(h, w):
        raise ValueError(f"kernel {kh} too large for a {h}x{w} image")
    img = np.asarray(image, dtype=np.float64)
    # filter2D correlates; flipping makes it a true convolution.
    out = cv2.filter2D(img, cv2.CV_64F, np.ascontiguousarray(kernel[::-1, ::-1]),
                       borderType=cv2.BORDER_REFLECT_101)
    if out.ndim < img.ndim:
        out = out[..., None]
    return np.clip(out, 0.0, 255.0)


def valid_filter(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Windowed weighted sums anchored at each window's top-left cell (no padding)."""
    img = np.asarray(image, dtype=np.float64)
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape, axis=(0, 1))
    return np.tensordot(win, kernel, axes=([-2, -1], [0, 1]))


# ---------------------------------------------------------------------------
# sampling and application


def sample_plan(rng_seed: int, config: DegradeConfig = DegradeConfig()) -> DegradationPlan:
    """Draw a plan. Draw order: layer count, then per layer the sequence and
    each op's kernel size (and direction for motion ops), then scale, noise."""
    rs = Stream(rng_seed)
    n_layers = 1 + rs.integer(config.max_layers)
    layers = []
    for _ in range(n_layers):
        seq = rs.choice(SEQUENCES)
        ops = []
        for letter in seq:
            size = rs.choice(config.kernel_sizes)
            if letter == "M":
                ops.append(BlurOp("motion", size, rs.choice(config.directions)))
            else:
                ops.append(BlurOp("gaussian", size))
        layers.append(BlurLayer(seq, tuple(ops)))
    scale = rs.uniform_range(*config.scale_range)
    noise = rs.uniform_range(*config.noise_range)
    return DegradationPlan(tuple(layers), scale, noise, rs.seed)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return np.array(image, dtype=np.float64)
    out = cv2.resize(np.asarray(image, dtype=np.float64), (width, height),
                     interpolation=cv2.INTER_LINEAR)
    if out.ndim < image.ndim:
        out = out[..., None]
    return out


def apply_plan(image: np.ndarray, plan: DegradationPlan) -> np.ndarray:
    """blur layers -> bilinear down/up by ``plan.scale`` -> additive noise -> clamp.

    A scale of 1 skips the resampling round trip; a noise sigma of 0 skips noise.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    for layer in plan.layers:
        for op in layer.ops:
            img = blur(img, make_kernel(op))
    if plan.scale != 1.0:
        lh = max(1, int(round(h / plan.scale)))
        lw = max(1, int(round(w / plan.scale)))
        img = resize_bilinear(resize_bilinear(img, lh, lw), h, w)
    if plan.noise_sigma:
        noise = Stream(derive_seed(plan.seed, _NOISE_STREAM)).normal(img.size)
        img = img + plan.noise_sigma * noise.reshape(img.shape)
    return np.clip(img, 0.0, 255.0)


def degrade(image: np.ndarray, seed: int, config: DegradeConfig = DegradeConfig()):
    """Sample a plan from ``seed`` and apply it. Returns (output, plan)."""
    plan = sample_plan(seed, config)
    return apply_plan(image, plan), plan


# ---------------------------------------------------------------------------
# counting


@dataclass(frozen=True)
class CountConfig:
    kernel_choices: int = len(KERNEL_SIZES)
    directions: int = len(DIRECTIONS)
    max_layers: int = 3
    scale_steps: int = 21
    noise_steps: int = 51


def discretized_steps(lo: float, hi: float, increment: float) -> int:
    """(hi - lo) / increment + 1, e.g. 21 for [2.0, 4.0] in steps of 0.1."""
    return int(round((hi - lo) / increment)) + 1


def per_layer_count(g: int, d: int) -> int:
    m = g * d
    return m + g * m + m * g + g * m * g


def count_plans(config: CountConfig = CountConfig(), brute_force: bool = False,
                limit: int = 10**6) -> int:
    """Number of distinct discretized plans.

    The closed form sums t**n over layer counts n = 1..L, with t the per-layer
    total, and multiplies by the scale and noise step counts. ``brute_force``
    enumerates every plan instead (refused above ``limit``).
    """
    g, d, L = config.kernel_choices, config.directions, config.max_layers
    if not brute_force:
        t = per_layer_count(g, d)
        return sum(t**n for n in range(1, L + 1)) * config.scale_steps * config.noise_steps
    closed = count_plans(config)
    if closed > limit:
        raise ValueError(f"{closed} plans exceeds the enumeration limit {limit}")
    kernels = range(g)
    motions = list(itertools.product(range(g), range(d)))
    layer_options = []
    for seq in SEQUENCES:
        pools = [motions if ch == "M" else [(k,) for k in kernels] for ch in seq]
        layer_options.extend((seq, combo) for combo in itertools.product(*pools))
    seen = set()
    for n in range(1, L + 1):
        for layers in itertools.product(layer_options, repeat=n):
            for s in range(config.scale_steps):
                for e in range(config.noise_steps):
                    seen.add((layers, s, e))
    return len(seen)


PAPER_COUNTS = {
    "per_layer": 1_176,
    "two_layers": 1_382_976,
    "three_layers": 1_626_943_776,
    "blur_total": 1_628_328_728,
    "grand_total": 1_743_940_018_728,
}


def count_report(config: CountConfig = CountConfig()) -> dict:
    """Exact counts next to the figures printed in the source text."""
    t = per_layer_count(config.kernel_choices, config.directions)
    blur_total = sum(t**n for n in range(1, config.max_layers + 1))
    exact = {
        "per_layer": t,
        "two_layers": t**2,
        "three_layers": t**3,
        "blur_total": blur_total,
        "grand_total": blur_total * config.scale_steps * config.noise_steps,
    }
    return {k: {"exact": v, "printed": PAPER_COUNTS[k], "delta": v - PAPER_COUNTS[k]}
            for k, v in exact.items()}
