import numpy as np
import pytest

from nvsynth import geometry as G
from nvsynth import tensor as T
from nvsynth import warp as W
from nvsynth.gradcheck import check_op
from nvsynth.geometry import Intrinsics, RigidTransform
from nvsynth.tensor import Tape, Tensor, backward


def center_grid_coords(width, height, batch=1):
    xg, yg = G.pixel_centers(width, height)
    return np.broadcast_to(np.stack([xg, yg])[None], (batch, 2, height, width)).copy()


class TestBilinearSample:
    def test_pixel_centers_exact(self):
        rng = np.random.default_rng(0)
        src = rng.standard_normal((2, 3, 5, 7))
        coords = center_grid_coords(7, 5, batch=2)
        out = W.bilinear_sample(Tensor(src), Tensor(coords))
        assert np.array_equal(out.data, src)

    def test_common_corner_mean(self):
        src = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
        coords = Tensor(np.array([1.0, 1.0]).reshape(1, 2, 1, 1))
        out = W.bilinear_sample(src, coords)
        assert out.data[0, 0, 0, 0] == pytest.approx(1.5)

    def test_fully_outside_returns_zero(self):
        src = Tensor(np.ones((1, 2, 4, 4)))
        coords = Tensor(np.array([-10.0, -10.0]).reshape(1, 2, 1, 1))
        out = W.bilinear_sample(src, coords)
        np.testing.assert_array_equal(out.data, np.zeros((1, 2, 1, 1)))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(1)
        src = rng.standard_normal((1, 2, 6, 6))
        # keep sample points away from integer cell boundaries for clean FD
        coords = rng.uniform(1.2, 4.8, (1, 2, 3, 3))
        coords = np.where(np.abs(coords - np.round(coords)) < 0.05, coords + 0.1, coords)
        check_op(W.bilinear_sample, [src, coords], rng, tol=1e-4)

    def test_coord_gradient_zero_far_outside(self):
        src = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        coords = Tensor(np.array([-30.0, -30.0]).reshape(1, 2, 1, 1), requires_grad=True)
        with Tape() as tape:
            out = W.bilinear_sample(src, coords)
            loss = T.tsum(out)
        backward(loss, tape)
        np.testing.assert_array_equal(coords.grad, np.zeros_like(coords.data))
        np.testing.assert_array_equal(src.grad, np.zeros_like(src.data))

    def test_interpolation_bounds(self):
        rng = np.random.default_rng(2)
        src = rng.standard_normal((1, 1, 8, 8))
        coords = rng.uniform(0.5, 7.5, (1, 2, 50, 1))
        out = W.bilinear_sample(Tensor(src), Tensor(coords)).data[0, 0, :, 0]
        u = coords[0, 0, :, 0] - 0.5
        v = coords[0, 1, :, 0] - 0.5
        j0 = np.floor(u).astype(int)
        i0 = np.floor(v).astype(int)
        for s in range(50):
            neigh = src[0, 0, i0[s] : i0[s] + 2, j0[s] : j0[s] + 2]
            assert neigh.min() - 1e-12 <= out[s] <= neigh.max() + 1e-12

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="coords"):
            W.bilinear_sample(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


class TestWarpFeature:
    K = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)

    def test_identity_transform_is_exact(self):
        rng = np.random.default_rng(3)
        feat = rng.standard_normal((1, 4, 128, 128))
        depth = Tensor(rng.uniform(1.0, 5.0, (1, 1, 128, 128)))
        out = W.warp_feature(Tensor(feat), depth, self.K, RigidTransform.identity())
        assert np.array_equal(out.features.data, feat)
        assert out.valid.all()

    def test_identity_exact_at_coarser_level(self):
        rng = np.random.default_rng(4)
        feat = rng.standard_normal((1, 2, 32, 32))
        depth = Tensor(rng.uniform(1.0, 5.0, (1, 1, 128, 128)))
        out = W.warp_feature(Tensor(feat), depth, self.K, RigidTransform.identity())
        assert np.array_equal(out.features.data, feat)

    def test_constant_depth_translation_is_integer_shift(self):
        rng = np.random.default_rng(5)
        feat = rng.standard_normal((1, 3, 128, 128))
        depth = Tensor(np.full((1, 1, 128, 128), 2.0))
        t = RigidTransform.translation([0.5, 0.0, 0.0])  # -> +25 px source shift
        out = W.warp_feature(Tensor(feat), depth, self.K, t)
        np.testing.assert_allclose(out.features.data[:, :, :, :103], feat[:, :, :, 25:], atol=1e-9)
        # beyond the overlap the fill value is zero and validity reflects bounds
        assert np.all(out.features.data[:, :, :, 105:] == 0.0)

    def test_resolution_intrinsics_inconsistency_rejected(self):
        feat = Tensor(np.zeros((1, 2, 64, 32)))
        depth = Tensor(np.ones((1, 1, 128, 128)))
        with pytest.raises(ValueError, match="uniform scaling"):
            W.warp_feature(feat, depth, self.K, RigidTransform.identity())

    def test_invalid_pixels_are_zero_in_all_channels(self):
        rng = np.random.default_rng(6)
        feat = rng.standard_normal((1, 5, 16, 16)) + 10.0
        depth = Tensor(np.full((1, 1, 16, 16), 2.0))
        k = Intrinsics(16.0, 16.0, 8.0, 8.0, 16, 16)
        t = RigidTransform.translation([5.0, 0.0, 0.0])  # shift 40 px: mostly out
        out = W.warp_feature(feat if isinstance(feat, Tensor) else Tensor(feat), depth, k, t)
        invalid = ~out.valid[0, 0]
        assert invalid.any()
        assert np.all(out.features.data[0, :, invalid] == 0.0)

    def test_gradient_reaches_depth(self):
        rng = np.random.default_rng(7)
        k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
        feat = Tensor(rng.standard_normal((1, 2, 8, 8)))
        depth = Tensor(rng.uniform(2.0, 4.0, (1, 1, 8, 8)), requires_grad=True)
        pose_s = G.pose_from_orbit(0.0, 0.0, 4.0)
        pose_t = G.pose_from_orbit(20.0, 0.0, 4.0)
        rel = G.relative_transform(pose_t, pose_s)
        with Tape() as tape:
            out = W.warp_feature(feat, depth, k, rel)
            loss = T.tsum(T.mul(out.features, out.features))
        backward(loss, tape)
        assert depth.grad is not None
        assert np.linalg.norm(depth.grad) > 0

    def test_level_equivalence_exact_for_translation(self):
        # constant depth + pure translation: the correspondence field is
        # affine, so the half-resolution field equals the downsampled and
        # rescaled full-resolution field exactly
        depth_full = Tensor(np.full((1, 1, 128, 128), 2.0))
        t = RigidTransform.translation([0.4, -0.2, 0.0])
        field_full = G.correspondence_field(depth_full, self.K, t)
        down = T.resize_bilinear(field_full.coords, 64, 64, align_corners=False)
        depth_half = T.resize_bilinear(depth_full, 64, 64, align_corners=False)
        field_half = G.correspondence_field(depth_half, self.K.scale_to_level(0.5), t)
        np.testing.assert_allclose(field_half.coords.data, down.data * 0.5, atol=1e-9)

    def test_level_equivalence_bounded_for_rotation(self):
        depth_full = Tensor(np.full((1, 1, 128, 128), 4.0))
        pose_s = G.pose_from_orbit(0.0, 0.0, 4.0)
        pose_t = G.pose_from_orbit(20.0, 10.0, 4.0)
        rel = G.relative_transform(pose_t, pose_s)
        field_full = G.correspondence_field(depth_full, self.K, rel)
        down = T.resize_bilinear(field_full.coords, 64, 64, align_corners=False)
        depth_half = T.resize_bilinear(depth_full, 64, 64, align_corners=False)
        field_half = G.correspondence_field(depth_half, self.K.scale_to_level(0.5), rel)
        err = np.abs(field_half.coords.data - down.data * 0.5)
        both_valid = field_half.valid & True
        assert np.max(err[np.broadcast_to(both_valid, err.shape)]) < 0.5


class TestWarpImage:
    def test_identity_returns_image(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 1, (1, 3, 32, 32))
        depth = Tensor(rng.uniform(2.0, 5.0, (1, 1, 32, 32)))
        k = Intrinsics(32.0, 32.0, 16.0, 16.0, 32, 32)
        out = W.warp_image(Tensor(img), depth, k, RigidTransform.identity())
        assert np.array_equal(out.features.data, img)

    def test_requires_three_channels(self):
        with pytest.raises(ValueError, match="B,3,H,W"):
            W.warp_image(
                Tensor(np.zeros((1, 2, 8, 8))),
                Tensor(np.ones((1, 1, 8, 8))),
                Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8),
                RigidTransform.identity(),
            )
