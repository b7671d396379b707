"""Training losses: multi-scale reconstruction, perceptual distance,
depth consistency between encoded and transformed latents, and edge-aware
depth smoothness, combined by a weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import LatentPointSet
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Term weights plus per-scale weights (finest first, non-increasing)."""

    lambda_m: float = 1.0  # multi-scale reconstruction
    lambda_v: float = 0.01  # perceptual
    lambda_d: float = 1.0  # depth consistency
    lambda_e: float = 0.1  # edge-aware smoothness
    scale_weights: tuple = (1.0, 0.5, 0.25, 0.125)

    def __post_init__(self):
        for name in ("lambda_m", "lambda_v", "lambda_d", "lambda_e"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        w = self.scale_weights
        if not w or any(x < 0 for x in w):
            raise ValueError("scale weights must be nonnegative and nonempty")
        if any(w[0] < x for x in w):
            raise ValueError("the finest scale must carry the largest weight")


def multiscale_reconstruction(preds: Sequence[Tensor], target: Tensor,
                              weights: Sequence[float]) -> Tensor:
    """Weighted mean-L1 over scales; every prediction is upsampled to the
    target resolution first. ``preds`` run coarse to fine (finest last),
    ``weights`` finest first.
    """
    if len(preds) != len(weights):
        raise ValueError(f"{len(preds)} predictions but {len(weights)} scale weights")
    _, _, h, w = target.shape
    total = Tensor(0.0)
    for pred, wgt in zip(preds, reversed(list(weights))):
        up = pred if pred.shape[2:] == (h, w) else T.resize_bilinear(pred, h, w, align_corners=False)
        total = T.add(total, T.mul(T.tmean(T.absolute(T.sub(up, target))), float(wgt)))
    return total


class PerceptualExtractor:
    """Fixed (non-trainable) convolutional feature pyramid.

    The default is a seeded random three-stage pyramid; a converted set of
    pretrained weights can be loaded from an ``.npz`` file holding arrays
    ``w0, b0, w1, b1, ...`` with conv weights [Cout, Cin, k, k].
    """

    def __init__(self, weights: Sequence[tuple[np.ndarray, np.ndarray]]):
        if not weights:
            raise ValueError("extractor needs at least one stage")
        self.stages = [
            (Tensor(np.asarray(w)), Tensor(np.asarray(b))) for w, b in weights
        ]

    @classmethod
    def fixed_random(cls, seed: int = 0, widths: tuple = (8, 16, 32)) -> "PerceptualExtractor":
        rng = np.random.default_rng([seed, 0xFEA7])
        weights = []
        cin = 3
        for cout in widths:
            scale = 1.0 / np.sqrt(cin * 9)
            weights.append((rng.normal(0.0, scale, (cout, cin, 3, 3)), np.zeros(cout)))
            cin = cout
        return cls(weights)

    @classmethod
    def from_file(cls, path) -> "PerceptualExtractor":
        data = np.load(path)
        weights = []
        i = 0
        while f"w{i}" in data:
            weights.append((data[f"w{i}"], data[f"b{i}"]))
            i += 1
        if not weights:
            raise ValueError(f"{path}: no stage arrays (w0, b0, ...) found")
        return cls(weights)

    def save(self, path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(self.stages):
            arrays[f"w{i}"] = w.data
            arrays[f"b{i}"] = b.data
        np.savez(path, **arrays)

    def features(self, img: Tensor) -> list[Tensor]:
        feats = []
        x = img
        for w, b in self.stages:
            x = T.leaky_relu(T.conv2d(x, w, b, stride=2, padding=1), 0.2)
            feats.append(x)
        return feats


def perceptual_loss(pred: Tensor, target: Tensor, extractor: PerceptualExtractor) -> Tensor:
    """Sum of mean-L1 feature distances; gradient flows to ``pred`` only."""
    target_feats = extractor.features(target.detach())
    pred_feats = extractor.features(pred)
    total = Tensor(0.0)
    for fp, ft in zip(pred_feats, target_feats):
        total = T.add(total, T.tmean(T.absolute(T.sub(fp, ft))))
    return total


def depth_consistency(
    z_t_encoded: LatentPointSet,
    z_t_transformed: LatentPointSet,
    depth_decoder: Callable[[LatentPointSet], Tensor],
) -> Tensor:
    """Mean absolute difference of the two depth decodings.

    Gradients flow into both latents and the decoder parameters.
    """
    if z_t_encoded.points.shape != z_t_transformed.points.shape:
        raise ValueError(
            f"latent shapes differ: {z_t_encoded.points.shape} vs "
            f"{z_t_transformed.points.shape}"
        )
    d_enc = depth_decoder(z_t_encoded)
    d_tra = depth_decoder(z_t_transformed)
    return T.tmean(T.absolute(T.sub(d_enc, d_tra)))


def edge_aware_smoothness(depth_t: Tensor, target_img: Tensor) -> Tensor:
    """Forward-difference depth gradients, downweighted at image edges.

    Normalized by the total count of valid difference positions (last
    column excluded horizontally, last row vertically). The image enters
    as data only; the loss is differentiable in the depth.
    """
    if depth_t.ndim != 4 or depth_t.shape[1] != 1:
        raise ValueError(f"depth must be [B,1,H,W], got {depth_t.shape}")
    b, _, h, w = depth_t.shape
    img = target_img.data
    if img.shape[2:] != (h, w):
        img = T.resize_bilinear(Tensor(img), h, w, align_corners=False).data
    gx = np.abs(np.diff(img, axis=3)).mean(axis=1, keepdims=True)
    gy = np.abs(np.diff(img, axis=2)).mean(axis=1, keepdims=True)
    wx = np.exp(-gx)
    wy = np.exp(-gy)

    dx = T.absolute(T.sub(T.slice_(depth_t, (..., slice(None), slice(1, None))),
                          T.slice_(depth_t, (..., slice(None), slice(0, -1)))))
    dy = T.absolute(T.sub(T.slice_(depth_t, (..., slice(1, None), slice(None))),
                          T.slice_(depth_t, (..., slice(0, -1), slice(None)))))
    n = b * (h * (w - 1) + (h - 1) * w)
    total = T.add(T.tsum(T.mul(dx, Tensor(wx))), T.tsum(T.mul(dy, Tensor(wy))))
    return T.mul(total, 1.0 / n)


LOSS_PARTS = ("reconstruction", "perceptual", "depth_consistency", "edge_smoothness")


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the four losses; non-finite parts abort by name."""
    for name in LOSS_PARTS:
        if name not in parts:
            raise ValueError(f"missing loss part {name!r}")
        value = parts[name]
        if value.size != 1:
            raise ValueError(f"loss part {name!r} is not a scalar")
        if not np.isfinite(value.data).all():
            raise FloatingPointError(f"loss part {name!r} is not finite")
    lam = (weights.lambda_m, weights.lambda_v, weights.lambda_d, weights.lambda_e)
    total = Tensor(0.0)
    for name, l in zip(LOSS_PARTS, lam):
        total = T.add(total, T.mul(parts[name], float(l)))
    return total
