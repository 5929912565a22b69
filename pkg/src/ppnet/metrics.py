"""Image-quality metrics: Gaussian-window SSIM and PSNR."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError

__all__ = ["IDENTICAL", "psnr", "ssim", "mse", "EvalReport", "evaluate_rollout", "format_psnr"]

# PSNR of identical images
IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; :data:`IDENTICAL` when ``a == b``."""
    err = mse(a, b)
    if err == 0:
        return IDENTICAL
    return 10.0 * math.log10(max_val * max_val / err)


def format_psnr(value: float) -> str:
    return "identical" if value == IDENTICAL else repr(float(value))


def _gaussian(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sliding_window_view(img, n, axis=-1) @ g
    return sliding_window_view(rows, n, axis=-2) @ g


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean SSIM over channels and all fully-contained 11x11 Gaussian windows.

    Accepts (C, H, W) or (H, W) images.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ssim expects (C, H, W) images, got shape {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ContractError(f"image {a.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian()
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    ssim: np.ndarray
    psnr: np.ndarray
    windows: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    # reserved for externally computed perceptual scores
    lpips: np.ndarray = None

    @property
    def horizon(self) -> int:
        return len(self.ssim)

    def rows(self):
        return [(t + 1, float(s), float(p)) for t, (s, p) in enumerate(zip(self.ssim, self.psnr))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "ssim", "psnr"])
        for t, s, p in self.rows():
            w.writerow([t, repr(s), format_psnr(p)])
        return buf.getvalue()

    def windows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window", "ssim", "psnr"])
        for n, (s, p) in self.windows.items():
            w.writerow([n, repr(s), format_psnr(p)])
        return buf.getvalue()


def _per_step(pred, truth, fn):
    # (Th, C, H, W) or (Th, B, C, H, W); batch entries are averaged per step
    if pred.ndim == 4:
        return np.array([fn(p, t) for p, t in zip(pred, truth)])
    return np.array([np.mean([fn(p, t) for p, t in zip(ps, ts)]) for ps, ts in zip(pred, truth)])


def evaluate_rollout(pred, truth, windows: Sequence[int] = (10, 30)) -> EvalReport:
    """Per-step SSIM/PSNR of a predicted horizon plus means over the first
    ``w`` steps for each ``w`` in ``windows``."""
    pred, truth = _check_pair(pred, truth)
    if pred.ndim not in (4, 5):
        raise DimensionError(f"expected (Th, C, H, W) or (Th, B, C, H, W), got {pred.shape}")
    horizon = pred.shape[0]
    for w in windows:
        if not 1 <= w <= horizon:
            raise ContractError(f"window {w} outside horizon 1..{horizon}")
    s = _per_step(pred, truth, ssim)
    p = _per_step(pred, truth, psnr)
    agg = {int(w): (float(np.mean(s[:w])), float(np.mean(p[:w]))) for w in windows}
    return EvalReport(ssim=s, psnr=p, windows=agg)
