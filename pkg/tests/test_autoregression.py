import numpy as np
import pytest
import torch

from helpers import randomize_
from windowgen.autoregression import (BankEntry, SceneBank, bank_sample_indices, plan_windows,
                                      run_perpetual, run_sparse_interpolation,
                                      select_spatial_conditions, upsample_depth, window_seed)
from windowgen.config import Config
from windowgen.data import build_scene_records
from windowgen.geometry import CameraModel, yaw_pose
from windowgen.training import SceneVideoModel

# Hand-derived window tables for N = 13: consecutive windows share one frame.
PLAN_TABLES = {
    13: ([(0, 12)], [None]),
    37: ([(0, 12), (12, 24), (24, 36)], [None, 12, 24]),
    97: ([(0, 12), (12, 24), (24, 36), (36, 48), (48, 60), (60, 72), (72, 84), (84, 96)],
         [None, 12, 24, 36, 48, 60, 72, 84]),
}

MICRO = dict(image_size=16, lrm_layers=1, lrm_hidden=16, lrm_heads=2, lrm_mlp=32, den_blocks=2,
             den_hidden=16, den_heads=2, den_mlp=32, ae_widths=[4, 4, 4], ccn_hidden=4,
             window=5, sample_steps=2)


class TestPlan:
    @pytest.mark.parametrize("length", sorted(PLAN_TABLES))
    def test_tables(self, length):
        plan = plan_windows(length, 13)
        assert (plan.windows, plan.temporal_source) == PLAN_TABLES[length]

    def test_windows_cover_once_with_single_overlap(self):
        plan = plan_windows(97, 13)
        covered = sorted({f for s, e in plan.windows for f in range(s, e + 1)})
        assert covered == list(range(97))
        for (s0, e0), (s1, _) in zip(plan.windows, plan.windows[1:]):
            assert s1 == e0

    def test_non_tiling_length_names_neighbours(self):
        with pytest.raises(ValueError, match="85 and 97"):
            plan_windows(90, 13)
        with pytest.raises(ValueError, match="97 and 109"):
            plan_windows(100, 13)

    def test_rejects_short_and_bad_window(self):
        with pytest.raises(ValueError):
            plan_windows(10, 13)
        with pytest.raises(ValueError):
            plan_windows(37, 12)


def entry(i, pose, depth=5.0, size=16):
    rng = np.random.default_rng(i)
    return BankEntry(rng.uniform(size=(size, size, 3)), pose,
                     np.full((size, size, 1), depth), np.full((size, size, 1), depth), i, i)


class TestBank:
    cam = CameraModel.from_fov(16, 16)

    def test_sample_indices(self):
        assert bank_sample_indices(13) == (4, 8)
        assert bank_sample_indices(5) == (1, 2)

    def test_requires_depth(self):
        e = entry(0, yaw_pose([0, 0, 1], 0))
        e.depth = None
        with pytest.raises(ValueError):
            SceneBank().add(e)

    def test_empty_bank_is_error(self):
        with pytest.raises(ValueError):
            select_spatial_conditions(SceneBank(), [yaw_pose([0, 0, 1], 0)], self.cam)

    def test_single_entry_duplicated(self):
        b = SceneBank([entry(0, yaw_pose([0, 0, 1], 0))])
        a, c, info = select_spatial_conditions(b, [yaw_pose([0, 0, 1], 0)], self.cam)
        assert a is c and info["selected"] == [0, 0]

    def test_picks_overlapping_views(self):
        window = [yaw_pose([0, 0, 1], 0.0)]
        bank = SceneBank([entry(0, yaw_pose([0, 0, 1], np.pi)),
                          entry(1, yaw_pose([0, 0, 1], 0.05)),
                          entry(2, yaw_pose([0, 0, 1], np.pi / 2)),
                          entry(3, yaw_pose([0, 0, 1], -0.05))])
        a, b, info = select_spatial_conditions(bank, window, self.cam)
        assert sorted(info["selected"]) == [1, 3]
        assert info["scores"][0] == 0.0

    def test_ties_prefer_recent_and_are_permutation_stable(self):
        p = yaw_pose([0, 0, 1], 0.0)
        bank = SceneBank([entry(i, p) for i in range(4)])
        _, _, info = select_spatial_conditions(bank, [p], self.cam)
        assert info["selected"] == [3, 2]
        rng = np.random.default_rng(0)
        for _ in range(5):
            perm = rng.permutation(4)
            shuffled = SceneBank([bank.entries[i] for i in perm])
            a, b, _ = select_spatial_conditions(shuffled, [p], self.cam)
            assert (a.frame_index, b.frame_index) == (int(perm[3]), int(perm[2]))

    def test_upsample_fills_invisible_with_far(self):
        d = torch.full((1, 2, 2, 1), 3.0, dtype=torch.float64)
        vis = torch.tensor([[[True, False], [True, True]]])
        up = upsample_depth(d, vis, 8, 20.0)
        assert up.shape == (1, 8, 8, 1)
        assert up[0, 0, 0, 0] == 3.0 and up[0, 0, 7, 0] == 20.0

    def test_window_seed_distinct(self):
        seeds = {window_seed(0, w, s) for w in range(10) for s in range(3)}
        assert len(seeds) == 30 and window_seed(1, 2, 3) == window_seed(1, 2, 3)


@pytest.fixture(scope="module")
def micro():
    torch.manual_seed(0)
    model = SceneVideoModel(Config().replace(**MICRO))
    randomize_(model.backbone.out, 0.1, seed=0)
    rec = build_scene_records(0, kinds=("lawnmower",), length=21,
                              camera=CameraModel.from_fov(16, 16))[1][0]
    return model, rec


class TestPerpetual:
    def test_five_window_bank_growth(self, micro):
        model, rec = micro
        run = run_perpetual(model, rec.frame(0), rec.poses, seed=0)
        assert len(run.windows) == 5
        assert len(run.bank) == 1 + 2 * 5
        for w, meta in enumerate(run.windows):
            assert (meta["start"], meta["end"]) == (4 * w, 4 * w + 4)
            assert meta["temporal_source"] == (None if w == 0 else 4 * w)
        # Two entries per window, at the sample offsets within that window.
        for w in range(5):
            got = [e.frame_index for e in run.bank.entries if e.window == w]
            assert got == [4 * w + j for j in bank_sample_indices(5)]
        np.testing.assert_array_equal(run.frames[0], rec.frame(0).image)

    def test_selection_only_uses_earlier_entries(self, micro):
        model, rec = micro
        run = run_perpetual(model, rec.frame(0), rec.poses[:13], seed=1)
        for meta in run.windows[1:]:
            assert all(f <= meta["start"] for f in meta["selected_frames"])

    def test_seeded_runs_repeat(self, micro):
        model, rec = micro
        a = run_perpetual(model, rec.frame(0), rec.poses[:9], seed=3).frames
        b = run_perpetual(model, rec.frame(0), rec.poses[:9], seed=3).frames
        c = run_perpetual(model, rec.frame(0), rec.poses[:9], seed=4).frames
        assert np.array_equal(a, b) and not np.array_equal(a, c)


class TestInterpolation:
    def test_single_pass(self, micro):
        model, rec = micro
        run = run_sparse_interpolation(model, rec.frame(0), rec.frame(4), rec.poses[:5])
        assert run.frames.shape == (5, 16, 16, 3)

    def test_two_pass_length_and_segments(self, micro):
        model, rec = micro
        run = run_sparse_interpolation(model, rec.frame(0), rec.frame(8), rec.poses[:9],
                                       two_pass=2)
        assert run.frames.shape == (9, 16, 16, 3)
        assert [m["pass"] for m in run.windows] == [1, 2, 2]
        assert run.windows[0]["frames"] == [0, 2, 4, 6, 8]

    def test_two_pass_validation(self, micro):
        model, rec = micro
        with pytest.raises(ValueError):
            run_sparse_interpolation(model, rec.frame(0), rec.frame(8), rec.poses[:9], two_pass=3)
        with pytest.raises(ValueError):
            run_sparse_interpolation(model, rec.frame(0), rec.frame(6), rec.poses[:7], two_pass=2)
        with pytest.raises(ValueError):
            run_sparse_interpolation(model, rec.frame(0), rec.frame(5), rec.poses[:6])
