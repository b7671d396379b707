"""The three networks: encoder, depth decoder, and pixel decoder.

The encoder produces a feature pyramid (conv0 keeps input resolution,
deeper levels shrink) plus an n x 3 latent point set. Both decoders re-enter
from the latent through mirrored linear heads. The pixel decoder consumes
warped encoder features as skip connections at its matching resolutions;
pose information reaches the networks only through the latent transformation
and the warping geometry, never as a direct input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, LatentPointSet, TransformArg, invert, transform_latent
from .tensor import Tensor
from .warp import WarpedFeature, warp_feature

SKIP_NAMES = ("conv0", "conv1", "conv2", "conv3", "conv4")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    channels: tuple = (16, 32, 64, 96, 128)
    strides: tuple = (1, 2, 2, 2, 2)
    latent_points: int = 192
    depth_range: tuple = (2.0, 6.0)
    skip_levels: tuple = ("conv0", "conv2", "conv3", "conv4")
    num_scales: int = 4
    activation: str = "elu"

    def __post_init__(self):
        if len(self.channels) != 5 or len(self.strides) != 5:
            raise ValueError("config needs 5 channel widths and 5 strides (conv0..conv4)")
        if self.strides[0] != 1:
            raise ValueError("conv0 must keep image resolution (stride 1)")
        if not 1 <= self.num_scales <= 4:
            raise ValueError(f"num_scales must be in 1..4, got {self.num_scales}")
        for name in self.skip_levels:
            if name not in SKIP_NAMES:
                raise ValueError(f"unknown skip level {name!r}")
        if self.latent_points < 1:
            raise ValueError("latent_points must be >= 1")
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise ValueError(f"invalid depth range {self.depth_range}")
        for hw in self.image_size:
            if self.level_size(hw, 4) < 1:
                raise ValueError(f"image size {self.image_size} too small for the pyramid")

    def level_size(self, full: int, level: int) -> int:
        size = full
        for l in range(1, level + 1):
            size = (size - 1) // self.strides[l] + 1  # k=3, pad=1 convolution
        return size

    def level_sizes(self) -> list[tuple[int, int]]:
        h, w = self.image_size
        return [(self.level_size(h, l), self.level_size(w, l)) for l in range(5)]

    @property
    def bottleneck_dim(self) -> int:
        h4, w4 = self.level_sizes()[4]
        return self.channels[4] * h4 * w4


@dataclass
class FeaturePyramid:
    """Encoder activations conv0..conv4 at descending resolutions."""

    conv0: Tensor
    conv1: Tensor
    conv2: Tensor
    conv3: Tensor
    conv4: Tensor

    def level(self, name: str) -> Tensor:
        if name not in SKIP_NAMES:
            raise ValueError(f"unknown pyramid level {name!r}")
        return getattr(self, name)


class Model:
    """Holds the named parameters and runs the full pipeline."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng([seed, 0x40DE1])
        c = cfg.channels
        n3 = 3 * cfg.latent_points

        self._conv_param("enc.conv0", c[0], 3)
        for l in range(1, 5):
            self._conv_param(f"enc.conv{l}", c[l], c[l - 1])
        self._linear_param("enc.latent", n3, cfg.bottleneck_dim)

        for dec in ("depth", "pix"):
            self._linear_param(f"{dec}.head", cfg.bottleneck_dim, n3)
        for l in range(4, 0, -1):
            self._conv_param(f"depth.up{l - 1}", c[l - 1], c[l])
        self._conv_param("depth.out", 1, c[0])

        in4 = c[4] + (c[4] if "conv4" in cfg.skip_levels else 0)
        self._conv_param("pix.stage4", c[4], in4)
        for l in range(3, -1, -1):
            skip = c[l] if SKIP_NAMES[l] in cfg.skip_levels else 0
            self._conv_param(f"pix.stage{l}", c[l], c[l + 1] + skip)
            if l < cfg.num_scales:
                self._conv_param(f"pix.out{l}", 3, c[l])
        del self._rng

    # -- parameter construction -------------------------------------------

    def _init(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(self._rng.uniform(-bound, bound, shape), requires_grad=True)

    def _conv_param(self, name, cout, cin, k=3):
        self.params[f"{name}.w"] = self._init((cout, cin, k, k), cin * k * k)
        self.params[f"{name}.b"] = self._init((cout,), cin * k * k)

    def _linear_param(self, name, out_dim, in_dim):
        self.params[f"{name}.w"] = self._init((out_dim, in_dim), in_dim)
        self.params[f"{name}.b"] = self._init((out_dim,), in_dim)

    # -- building blocks ---------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        return T.activation(x, self.cfg.activation)

    def _conv(self, name, x, stride=1):
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                        stride=stride, padding=1)

    def _linear(self, name, x):
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _latent_to_grid(self, dec: str, z: LatentPointSet) -> Tensor:
        if z.count != self.cfg.latent_points:
            raise ValueError(
                f"latent has {z.count} points, config expects {self.cfg.latent_points}"
            )
        b = z.batch
        h4, w4 = self.cfg.level_sizes()[4]
        flat = T.reshape(z.points, (b, 3 * self.cfg.latent_points))
        g = self._act(self._linear(f"{dec}.head", flat))
        return T.reshape(g, (b, self.cfg.channels[4], h4, w4))

    # -- public pipeline ----------------------------------------------------

    def encode(self, img: Tensor) -> tuple[FeaturePyramid, LatentPointSet]:
        """Feature pyramid and latent point set of an image batch in [0,1]."""
        h, w = self.cfg.image_size
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[2:] != (h, w):
            raise ValueError(f"expected image [B,3,{h},{w}], got {img.shape}")
        if img.data.min() < -1e-9 or img.data.max() > 1.0 + 1e-9:
            raise ValueError("image values must lie in [0,1]")
        feats = []
        x = img
        for l in range(5):
            x = self._act(self._conv(f"enc.conv{l}", x, stride=self.cfg.strides[l]))
            feats.append(x)
        b = img.shape[0]
        flat = T.reshape(feats[4], (b, self.cfg.bottleneck_dim))
        z = T.reshape(self._linear("enc.latent", flat), (b, self.cfg.latent_points, 3))
        return FeaturePyramid(*feats), LatentPointSet(z)

    def decode_depth(self, z: LatentPointSet) -> Tensor:
        """Depth map [B,1,H,W] bounded inside the configured range.

        Sigmoid on inverse depth: disparity interpolates between 1/d_max and
        1/d_min, so depth stays strictly inside (d_min, d_max).
        """
        sizes = self.cfg.level_sizes()
        g = self._latent_to_grid("depth", z)
        for l in range(4, 0, -1):
            if sizes[l - 1] != sizes[l]:
                g = T.resize_bilinear(g, *sizes[l - 1], align_corners=False)
            g = self._act(self._conv(f"depth.up{l - 1}", g))
        s = T.sigmoid(self._conv("depth.out", g))
        d_min, d_max = self.cfg.depth_range
        disparity = T.add(T.mul(s, 1.0 / d_min - 1.0 / d_max), 1.0 / d_max)
        return T.div(Tensor(1.0), disparity)

    def decode_pixels(self, z: LatentPointSet, warped: dict[str, WarpedFeature]) -> list[Tensor]:
        """Images at each configured scale, coarse to fine, finest last."""
        for name in self.cfg.skip_levels:
            if name not in warped:
                raise ValueError(f"missing warped skip feature {name!r}")
        sizes = self.cfg.level_sizes()
        g = self._latent_to_grid("pix", z)
        if "conv4" in self.cfg.skip_levels:
            g = T.concat_channels(g, warped["conv4"].features)
        g = self._act(self._conv("pix.stage4", g))
        outputs = []
        for l in range(3, -1, -1):
            if sizes[l] != sizes[l + 1]:
                g = T.resize_bilinear(g, *sizes[l], align_corners=False)
            name = SKIP_NAMES[l]
            if name in self.cfg.skip_levels:
                g = T.concat_channels(g, warped[name].features)
            g = self._act(self._conv(f"pix.stage{l}", g))
            if l < self.cfg.num_scales:
                outputs.append(T.sigmoid(self._conv(f"pix.out{l}", g)))
        return outputs

    def warp_skips(
        self, pyramid: FeaturePyramid, depth_t: Tensor, k: Intrinsics, t_to_s: TransformArg
    ) -> dict[str, WarpedFeature]:
        return {
            name: warp_feature(pyramid.level(name), depth_t, k, t_to_s)
            for name in self.cfg.skip_levels
        }

    def forward_full(
        self, img_s: Tensor, t_s_to_t: TransformArg, k: Intrinsics
    ) -> tuple[list[Tensor], Tensor, LatentPointSet]:
        """Full pipeline: encode, move the latent, predict depth, warp, decode.

        Returns (multi-scale predictions finest last, target depth, moved
        latent). Pose enters only through the latent transformation and the
        warp geometry.
        """

        pyramid, z_s = self.encode(img_s)
        z_t = transform_latent(z_s, t_s_to_t)
        depth_t = self.decode_depth(z_t)
        if isinstance(t_s_to_t, (list, tuple)):
            t_to_s = [invert(x) for x in t_s_to_t]
        else:
            t_to_s = invert(t_s_to_t)
        warped = self.warp_skips(pyramid, depth_t, k, t_to_s)
        preds = self.decode_pixels(z_t, warped)
        return preds, depth_t, z_t

    # -- utilities -----------------------------------------------------------

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def assert_finite(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise ValueError(f"parameter {name} contains non-finite values")


def tiny_config() -> ModelConfig:
    """8x8 two-channel configuration small enough for end-to-end FD checks."""
    return ModelConfig(
        image_size=(8, 8),
        channels=(2, 2, 2, 2, 2),
        strides=(1, 2, 2, 1, 1),
        latent_points=4,
        depth_range=(2.0, 6.0),
        skip_levels=("conv0", "conv2", "conv3", "conv4"),
        num_scales=2,
    )
