"""Differentiable bilinear sampling and depth-guided warping of feature maps.

Warping a source feature map into the target view: resize the predicted
target depth to the feature resolution, scale the intrinsics to match,
back-project / transform / project to get per-pixel source coordinates,
then bilinearly sample. The gradient w.r.t. the sampling coordinates is
what lets the reconstruction loss train the depth decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, TransformArg, correspondence_field
from .tensor import Tensor, _record


@dataclass
class WarpedFeature:
    """Sampled feature values plus the propagated validity mask.

    Invalid locations hold the border fill value (zero) in all channels.
    """

    features: Tensor
    valid: np.ndarray


def bilinear_sample(source: Tensor, coords: Tensor) -> Tensor:
    """Sample [B,C,H,W] at continuous pixel coordinates [B,2,h,w].

    Coordinates follow the pixel-center convention (pixel (i,j) at
    (j+0.5, i+0.5)). Out-of-bounds neighbours contribute the fill value 0;
    samples fully outside return 0 with zero gradient. Differentiable in
    both the source values and the coordinates.
    """
    if source.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ValueError(
            f"bilinear_sample expects source [B,C,H,W] and coords [B,2,h,w], "
            f"got {source.shape} and {coords.shape}"
        )
    if source.shape[0] != coords.shape[0]:
        raise ValueError(f"batch mismatch: {source.shape[0]} vs {coords.shape[0]}")
    B, C, H, W = source.shape
    _, _, h, w = coords.shape

    u = coords.data[:, 0] - 0.5  # index space
    v = coords.data[:, 1] - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    corners = []
    src_bhwc = np.ascontiguousarray(source.data.transpose(0, 2, 3, 1))
    bidx = np.arange(B)[:, None, None]
    for di, dj, wgt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, fu * (1 - fv)),
        (1, 0, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        ii = i0 + di
        jj = j0 + dj
        inb = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        iic = np.clip(ii, 0, H - 1)
        jjc = np.clip(jj, 0, W - 1)
        vals = src_bhwc[bidx, iic, jjc] * inb[..., None]  # [B,h,w,C]
        corners.append((vals, wgt, inb, iic, jjc))

    out_bhwc = sum(vals * wgt[..., None] for vals, wgt, _, _, _ in corners)
    out = np.ascontiguousarray(out_bhwc.transpose(0, 3, 1, 2))

    def fn(g):
        g_bhwc = g.transpose(0, 2, 3, 1)
        gsrc = gco = None
        if source.requires_grad:
            flat = np.zeros((B * H * W, C))
            base = (np.broadcast_to(bidx, (B, h, w)) * H)
            for vals, wgt, inb, iic, jjc in corners:
                idx = ((base + iic) * W + jjc).ravel()
                contrib = (g_bhwc * (wgt * inb)[..., None]).reshape(-1, C)
                np.add.at(flat, idx, contrib)
            gsrc = flat.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if coords.requires_grad:
            (v00, _, _, _, _), (v01, _, _, _, _), (v10, _, _, _, _), (v11, _, _, _, _) = corners
            du = (1 - fv)[..., None] * (v01 - v00) + fv[..., None] * (v11 - v10)
            dv = (1 - fu)[..., None] * (v10 - v00) + fu[..., None] * (v11 - v01)
            gx = np.einsum("bhwc,bhwc->bhw", g_bhwc, du)
            gy = np.einsum("bhwc,bhwc->bhw", g_bhwc, dv)
            gco = np.stack([gx, gy], axis=1)
        return gsrc, gco

    return _record(out, (source, coords), fn)


def warp_feature(
    source_feat: Tensor,
    depth_t: Tensor,
    k_full: Intrinsics,
    t_to_s: TransformArg,
) -> WarpedFeature:
    """Warp a source feature map to the target view guided by target depth.

    ``source_feat`` may live at any pyramid level; ``depth_t`` is resized to
    that level and ``k_full`` scaled accordingly. Differentiable end to end,
    including through the depth.
    """
    if source_feat.ndim != 4:
        raise ValueError(f"source features must be [B,C,H,W], got {source_feat.shape}")
    if depth_t.ndim != 4 or depth_t.shape[1] != 1:
        raise ValueError(f"depth must be [B,1,H,W], got {depth_t.shape}")
    b, _, hi, wi = source_feat.shape
    if depth_t.shape[0] != b:
        raise ValueError(f"batch mismatch: features {b}, depth {depth_t.shape[0]}")
    sx = wi / k_full.width
    sy = hi / k_full.height
    if abs(sx - sy) > 1e-9:
        raise ValueError(
            f"feature size {wi}x{hi} is not a uniform scaling of the "
            f"{k_full.width}x{k_full.height} intrinsics"
        )
    if depth_t.shape[2:] != (hi, wi):
        depth_l = T.resize_bilinear(depth_t, hi, wi, align_corners=False)
    else:
        depth_l = depth_t
    field = correspondence_field(depth_l, k_full.scale_to_level(sx), t_to_s)
    sampled = bilinear_sample(source_feat, field.coords)
    features = T.scale_where(sampled, field.valid)
    return WarpedFeature(features=features, valid=field.valid)


def warp_image(source_img: Tensor, depth_t: Tensor, k: Intrinsics, t_to_s: TransformArg) -> WarpedFeature:
    """Pure image-based rendering: warp the source image itself."""
    if source_img.ndim != 4 or source_img.shape[1] != 3:
        raise ValueError(f"source image must be [B,3,H,W], got {source_img.shape}")
    return warp_feature(source_img, depth_t, k, t_to_s)
