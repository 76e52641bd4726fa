"""Full-reference image metrics, overlap scores and the Gaussian Frechet distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value: float = 255.0) -> float:
    """10 log10(max^2 / mse); +inf for identical inputs."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / err)


_WIN = 11
_SIGMA = 1.5


def _gauss_window() -> np.ndarray:
    ax = np.arange(_WIN) - _WIN // 2
    g = np.exp(-(ax**2) / (2 * _SIGMA**2))
    return g / g.sum()


def ssim(a, b, max_value: float = 255.0) -> float:
    """Mean single-scale SSIM over valid 11x11 Gaussian windows and channels.

    Inputs are (H, W), (H, W, C) or (N, H, W, C).
    """
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None, ..., None], b[None, ..., None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
    h, w = a.shape[1:3]
    if h < _WIN or w < _WIN:
        raise ValueError(f"SSIM needs spatial extents >= {_WIN}, got {h}x{w}")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    g = _gauss_window()
    scores = []
    for n in range(a.shape[0]):
        for c in range(a.shape[3]):
            x, y = a[n, :, :, c], b[n, :, :, c]

            def filt(z):
                out = cv2.sepFilter2D(z, cv2.CV_64F, g, g, borderType=cv2.BORDER_CONSTANT)
                r = _WIN // 2
                return out[r : h - r, r : w - r]

            mx, my = filt(x), filt(y)
            sxx = filt(x * x) - mx * mx
            syy = filt(y * y) - my * my
            sxy = filt(x * y) - mx * my
            num = (2 * mx * my + c1) * (2 * sxy + c2)
            den = (mx * mx + my * my + c1) * (sxx + syy + c2)
            scores.append(np.mean(num / den))
    return float(np.mean(scores))


def dice_jaccard(pred, truth) -> tuple[float, float, float]:
    """Channel-mean soft Dice, Dice loss and Jaccard.

    Channel axis is last. Counts are sums of elementwise products, so hard
    one-hot masks and probability maps are scored by the same code. A channel
    empty in both inputs scores 1.
    """
    p, t = _same_shape(pred, truth)
    axes = tuple(range(p.ndim - 1))
    inter = (p * t).sum(axis=axes)
    total = p.sum(axis=axes) + t.sum(axis=axes)
    union = total - inter
    empty = total == 0
    dice = np.where(empty, 1.0, 2 * inter / np.where(empty, 1.0, total))
    jac = np.where(empty, 1.0, inter / np.where(empty, 1.0, union))
    d = float(dice.mean())
    return d, 1.0 - d, float(jac.mean())


def dice_loss_grad(pred, truth) -> tuple[float, np.ndarray]:
    """Dice loss and its gradient with respect to ``pred``."""
    p, t = _same_shape(pred, truth)
    axes = tuple(range(p.ndim - 1))
    inter = (p * t).sum(axis=axes)
    total = p.sum(axis=axes) + t.sum(axis=axes)
    safe = np.where(total == 0, 1.0, total)
    dice = np.where(total == 0, 1.0, 2 * inter / safe)
    k = p.shape[-1]
    grad = np.where(total == 0, 0.0, -(2 * t / safe - 2 * inter / safe**2) / k)
    return float(1.0 - dice.mean()), grad


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))

    def check(self, tol: float = 1e-9) -> None:
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean length {d}")
        if np.abs(self.cov - self.cov.T).max() > tol * max(1.0, np.abs(self.cov).max()):
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -tol * max(1.0, np.abs(self.cov).max()):
            raise ValueError("covariance is not positive semi-definite")


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(p: GaussianStats, q: GaussianStats, tol: float = 1e-9) -> float:
    """|mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2)."""
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {p.mean.shape} vs {q.mean.shape}")
    p.check(tol)
    q.check(tol)
    diff = p.mean - q.mean
    rp = _sqrtm_psd(p.cov)
    cross = _sqrtm_psd(rp @ q.cov @ rp)
    d = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2 * np.trace(cross))
    if d < -1e-6:
        raise ValueError(f"negative distance {d}; statistics are inconsistent")
    return max(d, 0.0)


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    dice: float | None = None
    jaccard: float | None = None

    def to_json_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                continue
            out[k] = "inf" if v == math.inf else v
        return out


def evaluate(ref, test, max_value: float = 255.0, ref_labels=None, test_labels=None,
             classes: int | None = None) -> MetricReport:
    """Image metrics, plus overlap scores when label maps are given."""
    rep = MetricReport(mse(ref, test), psnr(ref, test, max_value), ssim(ref, test, max_value))
    if ref_labels is not None and test_labels is not None:
        from .maskops import one_hot

        k = classes or int(max(np.max(ref_labels), np.max(test_labels))) + 1
        d, _, j = dice_jaccard(one_hot(test_labels, k), one_hot(ref_labels, k))
        rep.dice, rep.jaccard = d, j
    return rep
