"""Descriptor pipeline: invariances, ablations, batch semantics."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import smooth_patch
from spinkit.descriptor import (
    DescriptorConfig,
    ablate,
    describe,
    describe_batch,
    init_descriptor_params,
)
from spinkit.errors import EmptyVolume, ShapeMismatch
from spinkit.volume import estimate_reference_axis

ANCHOR = np.array([0.0, 0.0, 2.0])


def oriented_patch(rng, **kw):
    local = smooth_patch(rng, **kw)
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return ANCHOR + local @ rot.T


def rotate_about_axis(patch, anchor, axis, angle):
    mat = Rotation.from_rotvec(np.asarray(axis) * angle).as_matrix()
    return anchor + (patch - anchor) @ mat.T


class TestInvariance:
    def test_grid_multiple_rotation_exact(self, desk_cfg, desk_params):
        rng = np.random.default_rng(60)
        ll = desk_cfg.volume.azimuth_bins
        step = desk_cfg.azimuth_stride_product()
        for _ in range(5):
            patch = oriented_patch(rng)
            base = describe(patch, ANCHOR, desk_cfg, desk_params)
            axis = estimate_reference_axis(patch, desk_cfg.volume.viewpoint_array())
            for i in (step, 3 * step, ll // 2 // step * step):
                rotated = rotate_about_axis(patch, ANCHOR, axis, 2 * np.pi * i / ll)
                d = describe(rotated, ANCHOR, desk_cfg, desk_params)
                assert np.max(np.abs(d - base)) < 1e-9

    def test_non_multiple_shift_error_is_bounded_not_exact(self, desk_cfg, desk_params):
        # Shifts that are not multiples of the azimuth stride product are
        # only approximately invariant; record that the error is real but
        # small relative to the unit-norm descriptor.
        rng = np.random.default_rng(61)
        ll = desk_cfg.volume.azimuth_bins
        devs = []
        for _ in range(5):
            patch = oriented_patch(rng)
            base = describe(patch, ANCHOR, desk_cfg, desk_params)
            axis = estimate_reference_axis(patch, desk_cfg.volume.viewpoint_array())
            rotated = rotate_about_axis(patch, ANCHOR, axis, 2 * np.pi / ll)
            devs.append(np.max(np.abs(describe(rotated, ANCHOR, desk_cfg, desk_params) - base)))
        assert max(devs) < 0.5
        assert max(devs) > 1e-9  # genuinely not exact

    def test_so3_rotation_cosine_similarity(self, desk_cfg, desk_params):
        rng = np.random.default_rng(62)
        sims = []
        for _ in range(20):
            patch = oriented_patch(rng, n=600)
            base = describe(patch, ANCHOR, desk_cfg, desk_params)
            g = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
            d = describe(patch @ g.T, g @ ANCHOR, desk_cfg, desk_params)
            sims.append(float(d @ base))
        assert np.mean(sims) >= 0.99

    def test_translation_invariance_bitwise(self, desk_cfg, desk_params):
        # Coordinates quantized so adding the integer offset is exact in
        # floating point; the pipeline then has no translation dependence.
        rng = np.random.default_rng(63)
        patch = np.round(oriented_patch(rng) * 2**40) / 2**40
        base = describe(patch, ANCHOR, desk_cfg, desk_params)
        t = np.array([3.0, -7.0, 11.0])
        cfg2 = DescriptorConfig(
            volume=type(desk_cfg.volume)(
                **{
                    **desk_cfg.volume.__dict__,
                    "viewpoint": tuple(desk_cfg.volume.viewpoint_array() + t),
                }
            ),
            point_mlp_widths=desk_cfg.point_mlp_widths,
            conv_stack=desk_cfg.conv_stack,
        )
        moved = describe(patch + t, ANCHOR + t, cfg2, desk_params)
        assert np.array_equal(moved, base)

    def test_disjoint_patches_differ(self, desk_cfg, desk_params):
        rng = np.random.default_rng(64)
        noise_floor = 0.0
        for _ in range(5):
            patch = oriented_patch(rng)
            base = describe(patch, ANCHOR, desk_cfg, desk_params)
            g = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
            d = describe(patch @ g.T, g @ ANCHOR, desk_cfg, desk_params)
            noise_floor = max(noise_floor, np.linalg.norm(d - base))
        pairs = []
        for _ in range(5):
            a = describe(oriented_patch(rng), ANCHOR, desk_cfg, desk_params)
            b = describe(oriented_patch(rng), ANCHOR, desk_cfg, desk_params)
            pairs.append(np.linalg.norm(a - b))
        assert min(pairs) > 10 * noise_floor / 10  # distinct patches separated
        assert np.median(pairs) > noise_floor


class TestAblations:
    @pytest.mark.parametrize("name", ["no-axis", "no-xy"])
    def test_spatial_ablations_break_rotation_invariance(self, desk_cfg, name):
        # The full model is exact (< 1e-9) under grid-multiple rotations
        # about the reference axis; dropping either spatial transform must
        # destroy that exactness.
        cfg = ablate(desk_cfg, name)
        params = init_descriptor_params(cfg, seed=1)
        rng = np.random.default_rng(65)
        ll = cfg.volume.azimuth_bins
        step = cfg.azimuth_stride_product()
        worst = 0.0
        for _ in range(5):
            patch = oriented_patch(rng)
            base = describe(patch, ANCHOR, cfg, params)
            axis = estimate_reference_axis(patch, cfg.volume.viewpoint_array())
            rotated = rotate_about_axis(patch, ANCHOR, axis, 2 * np.pi * step / ll)
            d = describe(rotated, ANCHOR, cfg, params)
            worst = max(worst, float(np.max(np.abs(d - base))))
        assert worst > 1e-6

    def test_density_ablation_keeps_invariance_shape(self, desk_cfg):
        cfg = ablate(desk_cfg, "density")
        assert cfg.density_signature
        assert cfg.conv_stack[0].in_channels == 1
        params = init_descriptor_params(cfg, seed=1)
        rng = np.random.default_rng(66)
        patch = oriented_patch(rng)
        d = describe(patch, ANCHOR, cfg, params)
        assert d.shape == (desk_cfg.output_dim,)
        assert abs(np.linalg.norm(d) - 1.0) < 1e-12

    def test_mlp_conv_ablation_has_pointwise_kernels(self, desk_cfg):
        cfg = ablate(desk_cfg, "mlp-conv")
        assert all(spec.kernel == (1, 1, 1) for spec in cfg.conv_stack)
        assert len(cfg.conv_stack) == len(desk_cfg.conv_stack)
        assert cfg.conv_stack[-1].out_channels == desk_cfg.output_dim
        params = init_descriptor_params(cfg, seed=1)
        rng = np.random.default_rng(67)
        patch = oriented_patch(rng)
        assert describe(patch, ANCHOR, cfg, params).shape == (desk_cfg.output_dim,)

    def test_unknown_ablation_rejected(self, desk_cfg):
        with pytest.raises(ValueError):
            ablate(desk_cfg, "nope")


class TestDescribeBatch:
    def make_cloud(self, rng, n=1500):
        cloud = rng.uniform(-0.8, 0.8, size=(n, 2))
        z = 0.3 * np.sin(cloud[:, 0] * 3) * np.cos(cloud[:, 1] * 2)
        return np.column_stack([cloud, z]) + ANCHOR

    def test_batch_of_one_matches_describe(self, desk_cfg, desk_params):
        rng = np.random.default_rng(68)
        cloud = self.make_cloud(rng)
        out = describe_batch(cloud, [10], desk_cfg, desk_params, budget=512, seed=3)
        assert not out.skipped
        from spinkit.descriptor import extract_patch
        from spinkit.geometry import SpatialIndex

        patch = extract_patch(SpatialIndex(cloud), 10, desk_cfg, 512, 3)
        single = describe(patch, cloud[10], desk_cfg, desk_params)
        assert np.array_equal(out.descriptors[0], single)

    def test_duplicate_anchors_identical(self, desk_cfg, desk_params):
        rng = np.random.default_rng(69)
        cloud = self.make_cloud(rng)
        out = describe_batch(cloud, [5, 5], desk_cfg, desk_params, budget=512, seed=3)
        assert np.array_equal(out.descriptors[0], out.descriptors[1])

    def test_loop_vs_batch_bitwise(self, desk_cfg, desk_params):
        rng = np.random.default_rng(70)
        cloud = self.make_cloud(rng)
        anchors = rng.integers(0, len(cloud), size=20).tolist()
        batch = describe_batch(cloud, anchors, desk_cfg, desk_params, budget=512, seed=3)
        for pos, a in enumerate(anchors):
            solo = describe_batch(cloud, [a], desk_cfg, desk_params, budget=512, seed=3)
            assert np.array_equal(batch.descriptors[pos], solo.descriptors[0])

    def test_threaded_matches_serial(self, desk_cfg, desk_params):
        rng = np.random.default_rng(71)
        cloud = self.make_cloud(rng)
        anchors = rng.integers(0, len(cloud), size=8).tolist()
        serial = describe_batch(cloud, anchors, desk_cfg, desk_params, budget=512, seed=3)
        threaded = describe_batch(cloud, anchors, desk_cfg, desk_params, budget=512, seed=3, threads=4)
        for a, b in zip(serial.descriptors, threaded.descriptors):
            assert np.array_equal(a, b)

    def test_degenerate_anchor_flagged_not_fatal(self, desk_cfg, desk_params):
        rng = np.random.default_rng(72)
        cloud = self.make_cloud(rng)
        cloud = np.vstack([cloud, [[50.0, 50.0, 50.0]]])  # isolated point
        out = describe_batch(cloud, [3, len(cloud) - 1], desk_cfg, desk_params, budget=512, seed=3)
        assert out.descriptors[0] is not None
        assert out.descriptors[1] is None
        assert out.skipped == [(1, "DegeneratePatch")]
        stacked, kept = out.stacked()
        assert stacked.shape == (1, desk_cfg.output_dim)
        assert list(kept) == [0]


class TestConfigValidation:
    def test_channel_cap_enforced(self, desk_cfg):
        from spinkit.autodiff import ConvSpec

        with pytest.raises(ValueError):
            DescriptorConfig(
                volume=desk_cfg.volume,
                point_mlp_widths=(16, 24),
                conv_stack=(ConvSpec(24, 256, (1, 1, 1)),),
            )

    def test_channel_chain_checked(self, desk_cfg):
        from spinkit.autodiff import ConvSpec

        with pytest.raises(ShapeMismatch):
            DescriptorConfig(
                volume=desk_cfg.volume,
                point_mlp_widths=(16, 24),
                conv_stack=(ConvSpec(24, 32, (1, 1, 1)), ConvSpec(64, 32, (1, 1, 1))),
            )

    def test_default_architecture_shape(self):
        cfg = DescriptorConfig()
        assert cfg.output_dim == 32
        assert cfg.volume.grid_shape == (9, 40, 80)
        assert cfg.output_spatial() == (3, 16, 20)
        assert cfg.azimuth_stride_product() == 4

    def test_empty_volume_raised(self, desk_cfg, desk_params):
        from dataclasses import replace

        # Shrink the voxel balls until no generic point can be covered.
        cfg = DescriptorConfig(
            volume=replace(desk_cfg.volume, voxel_radius=1e-6),
            point_mlp_widths=desk_cfg.point_mlp_widths,
            conv_stack=desk_cfg.conv_stack,
        )
        rng = np.random.default_rng(73)
        patch = oriented_patch(rng)
        with pytest.raises(EmptyVolume):
            describe(patch, ANCHOR, cfg, desk_params)
