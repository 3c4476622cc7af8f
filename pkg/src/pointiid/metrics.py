"""Image-quality metrics for intrinsic decompositions.

All computations run in float64. Maps are H×W or H×W×C arrays; an optional
boolean H×W ``mask`` restricts the pixel-wise metrics.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
WHDR_EPS = 1e-4


class MetricWarning(UserWarning):
    """A metric hit a degenerate case and used its documented fallback."""


def _prep(gt, pred, mask=None):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    if mask is None:
        return gt.reshape(-1), pred.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match maps {gt.shape[:2]}")
    return gt[mask].reshape(-1), pred[mask].reshape(-1)


def mse_metric(gt, pred, mask=None) -> float:
    g, p = _prep(gt, pred, mask)
    if g.size == 0:
        return 0.0
    return float(np.mean((g - p) ** 2))


def _best_scale(g: np.ndarray, p: np.ndarray) -> float | None:
    pp = float(p @ p)
    if pp <= 0.0:
        return None
    return float(g @ p) / pp


def si_mse(gt, pred, mask=None) -> float:
    """MSE after scaling ``pred`` by the least-squares optimal scalar."""
    g, p = _prep(gt, pred, mask)
    if g.size == 0:
        return 0.0
    alpha = _best_scale(g, p)
    if alpha is None:
        warnings.warn("si_mse: prediction is identically zero; scale undefined", MetricWarning, stacklevel=2)
        alpha = 0.0
    return float(np.mean((g - alpha * p) ** 2))


def _windows(h: int, w: int, window_frac: float):
    size = max(2, int(round(window_frac * max(h, w))))
    if size > h or size > w:
        yield slice(0, h), slice(0, w)
        return
    step = max(1, size // 2)
    for i in range(0, h - size + 1, step):
        for j in range(0, w - size + 1, step):
            yield slice(i, i + size), slice(j, j + size)


def _window_errors(gt, pred, mask, window_frac):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    h, w = gt.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    for rs, cs in _windows(h, w, window_frac):
        m = mask[rs, cs]
        g = gt[rs, cs][m].reshape(-1)
        p = pred[rs, cs][m].reshape(-1)
        alpha = _best_scale(g, p)
        if alpha is None:
            alpha = 0.0
        yield float(((g - alpha * p) ** 2).sum()), float((g * g).sum()), g.size


def lmse(gt, pred, mask=None, window_frac: float = 0.1) -> float:
    """Local scale-invariant squared error, normalised by the gt energy.

    Square windows of side ``round(window_frac*max(H, W))`` with half-window
    stride; each window's prediction gets its own optimal scale. The summed
    error is divided by the summed ``gt**2`` over the same windows, so an
    all-zero prediction scores 1.
    """
    err = total = 0.0
    for e, t, _ in _window_errors(gt, pred, mask, window_frac):
        err += e
        total += t
    return 0.0 if total == 0.0 else err / total


def si_lmse(gt, pred, mask=None, window_frac: float = 0.1) -> float:
    """Mean over windows of the per-window si-MSE (no energy normalisation)."""
    vals = [e / n for e, _, n in _window_errors(gt, pred, mask, window_frac) if n > 0]
    return float(np.mean(vals)) if vals else 0.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, k1: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D map with ``outer(k1, k1)``."""
    rows = sliding_window_view(img, len(k1), axis=0) @ k1
    return sliding_window_view(rows, len(k1), axis=1) @ k1


def ssim(gt, pred, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, averaged over channels.

    Images smaller than the window use the largest odd window that fits
    (with a MetricWarning).
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    if gt.ndim == 2:
        gt, pred = gt[..., None], pred[..., None]
    h, w = gt.shape[:2]
    if min(h, w) < window:
        reduced = min(h, w) if min(h, w) % 2 else min(h, w) - 1
        warnings.warn(f"ssim: {h}×{w} image smaller than {window}px window; using {reduced}px", MetricWarning, stacklevel=2)
        window = max(1, reduced)
    kern = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for c in range(gt.shape[2]):
        x, y = gt[..., c], pred[..., c]
        mx, my = _filter_valid(x, kern), _filter_valid(y, kern)
        sxx = _filter_valid(x * x, kern) - mx * mx
        syy = _filter_valid(y * y, kern) - my * my
        sxy = _filter_valid(x * y, kern) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def dssim(gt, pred, **kwargs) -> float:
    return (1.0 - ssim(gt, pred, **kwargs)) / 2.0


def psnr(gt, pred, mask=None) -> float:
    """Peak SNR in dB for unit dynamic range, capped at ``PSNR_CAP``."""
    err = mse_metric(gt, pred, mask)
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


@dataclass(frozen=True)
class Judgment:
    point1: tuple[int, int]
    point2: tuple[int, int]
    darker: str
    weight: float = 1.0

    def __post_init__(self):
        if self.darker not in ("1", "2", "E"):
            raise ValueError(f"darker must be '1', '2' or 'E', got {self.darker!r}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise ValueError("judgment weight must be finite and non-negative")


def load_judgments(path: str | Path) -> list[Judgment]:
    """Read ``[{p1: [u, v], p2: [u, v], darker: "1"|"2"|"E", weight}]``."""
    raw = json.loads(Path(path).read_text())
    out = []
    for r in raw:
        darker = str(r["darker"]).upper()
        out.append(Judgment(tuple(int(c) for c in r["p1"]), tuple(int(c) for c in r["p2"]), darker, float(r.get("weight", 1.0))))
    return out


def whdr(reflectance, judgments: Sequence[Judgment], delta: float = 0.10) -> float:
    """Weighted fraction of pairwise darker/equal judgments the map contradicts.

    Points are (u, v) = (column, row); luminance is the RGB mean.
    """
    refl = np.asarray(reflectance, dtype=np.float64)
    h, w = refl.shape[:2]

    def lum(pt):
        u, v = pt
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"judgment point {pt} outside {w}×{h} image")
        return max(WHDR_EPS, float(np.mean(refl[v, u])))

    wrong = total = 0.0
    for j in judgments:
        ratio = lum(j.point1) / lum(j.point2)
        if ratio > 1.0 + delta:
            predicted = "2"
        elif ratio < 1.0 / (1.0 + delta):
            predicted = "1"
        else:
            predicted = "E"
        if predicted != j.darker:
            wrong += j.weight
        total += j.weight
    return wrong / total if total > 0 else float("nan")


def rescale_reflectance(pred, factor: float = 0.5) -> np.ndarray:
    return np.clip(np.asarray(pred, dtype=np.float64) * factor, 0.0, 1.0)


METRICS = {
    "mse": mse_metric,
    "si_mse": si_mse,
    "lmse": lmse,
    "si_lmse": si_lmse,
    "ssim": ssim,
    "dssim": dssim,
    "psnr": psnr,
}
MASKED = {"mse", "si_mse", "lmse", "si_lmse", "psnr"}


def compute(name: str, gt, pred, mask=None) -> float:
    """Evaluate a named metric; SSIM-family metrics zero out masked pixels."""
    fn = METRICS[name]
    if name in MASKED:
        return fn(gt, pred, mask)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m if np.ndim(gt) == 2 else m[..., None]
        gt, pred = np.where(m, gt, 0.0), np.where(m, pred, 0.0)
    return fn(gt, pred)
