import numpy as np
import pytest
import torch

from helpers import fd_relative_error, randomize_
from windowgen.geometry import CameraModel, Pose, camera_rays, yaw_pose
from windowgen.recon_model import (LrmConfig, ReconstructionModel, assemble_lrm_input,
                                   lrm_to_cloud, pool_to_grid, regressed_depth)


def tiny(size=16, layers=2, hidden=32):
    cfg = LrmConfig(layers=layers, hidden=hidden, heads=4, mlp=2 * hidden, patch=8,
                    image_size=(size, size))
    return ReconstructionModel(cfg).double()


def random_input(rng, size=16):
    cam = CameraModel.from_fov(size, size)
    poses = [yaw_pose(rng.normal(size=3), rng.uniform(-3, 3)) for _ in range(2)]
    images = [rng.uniform(size=(size, size, 3)) for _ in range(2)]
    depths = [rng.uniform(1, 5, size=(size, size, 1)) for _ in range(2)]
    return assemble_lrm_input(images, depths, [cam, cam], poses)


class TestAssemble:
    def test_channel_count_and_order(self):
        x = assemble_lrm_input([np.zeros((8, 8, 3))] * 2, [np.ones((8, 8))] * 2,
                               [CameraModel(8, 8, 4.5, 4.5, 8, 8)] * 2, [Pose.identity()] * 2)
        assert x.shape == (2, 8, 8, 10)
        np.testing.assert_allclose(x[0, 4, 4, 4:7], [0, 0, 1], atol=1e-12)
        assert (x[..., 3] == 1).all() and (x[..., :3] == 0).all()

    def test_view_permutation(self):
        rng = np.random.default_rng(0)
        cam = CameraModel.from_fov(8, 8)
        imgs = [rng.uniform(size=(8, 8, 3)) for _ in range(2)]
        deps = [rng.uniform(1, 2, size=(8, 8, 1)) for _ in range(2)]
        poses = [yaw_pose([0, 0, 1], 0.1), yaw_pose([1, 0, 1], 0.5)]
        a = assemble_lrm_input(imgs, deps, [cam, cam], poses)
        b = assemble_lrm_input(imgs[::-1], deps[::-1], [cam, cam], poses[::-1])
        np.testing.assert_array_equal(a[::-1], b)

    def test_rejects_mismatched_resolution(self):
        cam = CameraModel.from_fov(8, 8)
        with pytest.raises(ValueError):
            assemble_lrm_input([np.zeros((8, 8, 3)), np.zeros((16, 16, 3))],
                               [np.ones((8, 8, 1))] * 2, [cam, cam], [Pose.identity()] * 2)

    def test_rejects_mismatched_intrinsics(self):
        with pytest.raises(ValueError):
            assemble_lrm_input([np.zeros((8, 8, 3))] * 2, [np.ones((8, 8, 1))] * 2,
                               [CameraModel.from_fov(8, 8), CameraModel.from_fov(8, 8, 40)],
                               [Pose.identity()] * 2)


class TestForward:
    def test_shapes_and_token_count(self):
        model = ReconstructionModel(LrmConfig()).double()
        x = torch.tensor(random_input(np.random.default_rng(0), 64))[None]
        seen = {}
        model.blocks[0].register_forward_hook(lambda m, i, o: seen.update(t=o.shape))
        raw, feat = model(x)
        assert seen["t"][1] == 2 * 8 * 8
        assert raw.shape == (1, 2, 64, 64, 1) and feat.shape == (1, 2, 64, 64, 16)

    def test_zero_init_output_gives_mid_range_depth(self):
        model = tiny()
        raw, feat = model(torch.tensor(random_input(np.random.default_rng(1)))[None])
        assert (raw == 0).all() and (feat == 0).all()
        assert torch.allclose(regressed_depth(raw, 0.1, 20.0), torch.tensor(10.05,
                                                                             dtype=raw.dtype))

    def test_batch_independence(self):
        model = randomize_(tiny(), 0.1)
        rng = np.random.default_rng(2)
        x = torch.tensor(np.stack([random_input(rng), random_input(rng)]))
        raw2, feat2 = model(torch.cat([x, x]))
        raw1, feat1 = model(x)
        assert torch.equal(raw2[:2], raw2[2:]) and torch.equal(feat2[:2], feat2[2:])
        assert torch.allclose(raw1, raw2[:2], atol=1e-12)

    def test_view_swap_swaps_outputs(self):
        model = randomize_(tiny(), 0.1, seed=3)
        x = torch.tensor(random_input(np.random.default_rng(3)))[None]
        raw, feat = model(x)
        raw_s, feat_s = model(x.flip(1))
        assert torch.allclose(raw_s[:, 0], raw[:, 1], atol=1e-12)
        assert torch.allclose(feat_s[:, 1], feat[:, 0], atol=1e-12)

    @pytest.mark.parametrize("size", [16, 24, 32])
    def test_shape_law(self, size):
        model = tiny(size)
        raw, feat = model(torch.tensor(random_input(np.random.default_rng(0), size))[None])
        assert raw.shape[2:4] == (size, size)

    def test_shape_error_names_dimensions(self):
        with pytest.raises(ValueError, match="10"):
            tiny()(torch.zeros(1, 2, 16, 16, 9, dtype=torch.float64))

    def test_gradient_check(self):
        torch.manual_seed(0)
        model = randomize_(tiny(), 0.15, seed=1)
        x = torch.tensor(random_input(np.random.default_rng(4)))[None]
        w = torch.randn(1, 2, 16, 16, 17, dtype=torch.float64)

        def loss():
            raw, feat = model(x)
            return (torch.cat([raw, feat], -1) * w).sum()
        assert fd_relative_error(loss, list(model.parameters())) < 1e-4


class TestCloud:
    def test_zero_raw_is_mid_range_along_rays(self):
        cams = [CameraModel.from_fov(16, 16)] * 2
        poses = [yaw_pose([0, 0, 1], 0.0), yaw_pose([1, 2, 1], 1.0)]
        raw = torch.zeros(2, 16, 16, 1, dtype=torch.float64)
        feat = torch.zeros(2, 16, 16, 16, dtype=torch.float64)
        cloud = lrm_to_cloud(raw, feat, cams, poses, patch=8, near=0.1, far=20.0)
        assert len(cloud) == 2 * 2 * 2
        o, d = camera_rays(cams[1].scaled(1 / 8), poses[1])
        expect = (o + d * 10.05).reshape(-1, 3)
        np.testing.assert_allclose(cloud.points[4:].numpy(), expect, atol=1e-12)

    def test_point_count_for_latent_grid(self):
        cams = [CameraModel.from_fov(64, 64)] * 2
        cloud = lrm_to_cloud(torch.zeros(2, 64, 64, 1), torch.zeros(2, 64, 64, 16), cams,
                             [Pose.identity()] * 2)
        assert len(cloud) == 128 and cloud.features.shape[1] == 16

    def test_features_are_pooled(self):
        rng = np.random.default_rng(0)
        feat = torch.tensor(rng.normal(size=(2, 16, 16, 16)))
        cloud = lrm_to_cloud(torch.zeros(2, 16, 16, 1, dtype=torch.float64), feat,
                             [CameraModel.from_fov(16, 16)] * 2, [Pose.identity()] * 2)
        np.testing.assert_allclose(cloud.features[1].numpy(),
                                   feat[0, :8, 8:16].mean(dim=(0, 1)).numpy(), atol=1e-12)
        assert pool_to_grid(feat, 8).shape == (2, 2, 2, 16)

    def test_hand_value(self):
        assert regressed_depth(torch.tensor(np.log(3.0)), 1.0, 9.0).item() == \
            pytest.approx(7.0, abs=1e-12)
