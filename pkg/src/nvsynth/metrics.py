"""Evaluation metrics: per-pixel L1, SSIM, and the four depth errors.

All functions take plain numpy arrays (no gradients). SSIM follows the
standard constants: 11x11 Gaussian window with sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1.0, computed on channel-mean grayscale over valid
window positions only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEPTH_METRIC_NAMES = ("l1_all", "l1_rel", "l1_inv", "sc_inv")


@dataclass
class MetricReport:
    l1: float
    ssim: float
    depth: Optional[dict] = None
    count: int = 1

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.depth is not None and any(v < 0 for v in self.depth.values()):
            raise ValueError("depth metrics must be nonnegative")


def _check_image_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    for name, img in (("prediction", pred), ("ground truth", gt)):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} values must lie in [0,1]")


def l1_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    _check_image_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise ValueError(f"expected [3,H,W] or [H,W] image, got shape {img.shape}")


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean local structural similarity over valid window positions."""
    _check_image_pair(pred, gt)
    x = _to_gray(pred)
    y = _to_gray(gt)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    win = _gaussian_window()

    def filt(a):
        return fftconvolve(a, win, mode="valid")

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> dict:
    """The four depth errors restricted to ``mask`` (all pixels if None).

    l1_all: mean |gt - pred|; l1_rel: mean |gt - pred| / gt;
    l1_inv: mean |1/gt - 1/pred|; sc_inv: sqrt of the variance of
    log(pred) - log(gt) (zero under any uniform rescaling of pred).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("depth metrics need at least one masked pixel")
    p = pred[mask]
    g = gt[mask]
    if (g <= 0).any():
        raise ValueError("l1_rel/l1_inv/sc_inv need positive ground-truth depth on the mask")
    if (p <= 0).any():
        raise ValueError("l1_inv/sc_inv need positive predicted depth on the mask")
    z = np.log(p) - np.log(g)
    sc = np.sum(z * z) / n - (np.sum(z) / n) ** 2
    return {
        "l1_all": float(np.mean(np.abs(g - p))),
        "l1_rel": float(np.mean(np.abs(g - p) / g)),
        "l1_inv": float(np.mean(np.abs(1.0 / g - 1.0 / p))),
        "sc_inv": float(np.sqrt(max(sc, 0.0))),
    }


def summarize(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean across per-sample reports."""
    if not reports:
        raise ValueError("nothing to summarize")
    depth = None
    with_depth = [r for r in reports if r.depth is not None]
    if with_depth:
        depth = {
            k: float(np.mean([r.depth[k] for r in with_depth])) for k in DEPTH_METRIC_NAMES
        }
    return MetricReport(
        l1=float(np.mean([r.l1 for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        depth=depth,
        count=len(reports),
    )


def write_metrics_csv(path, names: list[str], reports: list[MetricReport]) -> None:
    """One row per sample plus a final mean row."""
    summary = summarize(reports)
    has_depth = summary.depth is not None
    header = ["sample", "l1", "ssim", *(DEPTH_METRIC_NAMES if has_depth else ()), "count"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for name, r in zip(names, reports):
            row = [name, repr(r.l1), repr(r.ssim)]
            if has_depth:
                row += [repr(r.depth[k]) if r.depth else "" for k in DEPTH_METRIC_NAMES]
            writer.writerow(row + [r.count])
        row = ["mean", repr(summary.l1), repr(summary.ssim)]
        if has_depth:
            row += [repr(summary.depth[k]) for k in DEPTH_METRIC_NAMES]
        writer.writerow(row + [summary.count])
