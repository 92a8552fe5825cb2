import json

import numpy as np
import pytest
import torch

from windowgen import io
from windowgen.checkpoint import GROUPS, Checkpoint, CheckpointError
from windowgen.config import Config, ConfigError, load_config, validate
from windowgen.data import build_scene_records, read_dataset, sample_window, write_dataset
from windowgen.geometry import CameraModel, yaw_pose
from windowgen.training import SceneVideoModel

SMALL = dict(image_size=16, lrm_layers=1, lrm_hidden=16, lrm_heads=2, lrm_mlp=32, den_blocks=2,
             den_hidden=16, den_heads=2, den_mlp=32, ae_widths=[4, 4, 4], ccn_hidden=4)


class TestIO:
    def test_array_round_trip(self, tmp_path):
        for arr in (np.arange(24, dtype=np.float32).reshape(2, 3, 4),
                    np.array([[1, 2]], dtype=np.uint8)):
            io.save_array(tmp_path / "a", arr)
            back = io.load_array(tmp_path / "a")
            assert back.dtype == arr.dtype and np.array_equal(back, arr)
            header = json.loads((tmp_path / "a.json").read_text())
            assert header["shape"] == list(arr.shape)

    def test_frames_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [io.quantize(rng.uniform(size=(8, 8, 3))) for _ in range(3)]
        poses = [yaw_pose([i, 0, 1], 0.1 * i) for i in range(3)]
        cam = CameraModel.from_fov(8, 8)
        io.write_frames(tmp_path, frames, poses, cam)
        back, bposes, bcam = io.read_frames(tmp_path)
        assert bcam == cam
        assert all(np.array_equal(a, b) for a, b in zip(frames, back))
        assert all(a == b for a, b in zip(poses, bposes))

    def test_json_is_sorted_and_atomic(self, tmp_path):
        io.write_json_atomic(tmp_path / "x.json", {"b": 1, "a": 2})
        text = (tmp_path / "x.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert [p.name for p in tmp_path.iterdir()] == ["x.json"]


class TestConfig:
    def test_defaults_valid(self):
        assert validate({}) == Config()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            validate({"windw": 13})

    def test_type_check(self):
        with pytest.raises(ConfigError):
            validate({"window": "13"})
        with pytest.raises(ConfigError):
            validate({"lr": True})

    def test_window_law(self):
        with pytest.raises(ConfigError):
            validate({"window": 12})

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"window": 17, "lr": 1}))
        cfg = load_config(p)
        assert cfg.window == 17 and cfg.lr == 1.0

    def test_round_trip(self):
        cfg = Config().replace(**SMALL)
        assert validate(cfg.to_dict()) == cfg


class TestCheckpoint:
    def model(self):
        torch.manual_seed(0)
        return SceneVideoModel(Config().replace(**SMALL))

    def test_byte_identical_round_trip(self, tmp_path):
        ck = self.model().to_checkpoint("joint", {"steps": 3})
        ck.save(tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        back = Checkpoint.load(tmp_path / "a.ckpt")
        assert back.to_bytes() == data
        assert set(back.groups) == set(GROUPS) and back.stage == "joint"

    def test_model_round_trip(self, tmp_path):
        m = self.model()
        m.to_checkpoint("x").save(tmp_path / "a.ckpt")
        m2 = SceneVideoModel.from_checkpoint(Checkpoint.load(tmp_path / "a.ckpt"))
        for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
            assert torch.equal(a, b), k

    def test_hash_mismatch_is_error(self, tmp_path):
        data = bytearray(self.model().to_checkpoint("x").to_bytes())
        data[-3] ^= 0xFF
        with pytest.raises(CheckpointError, match="hash"):
            Checkpoint.from_bytes(bytes(data))

    def test_bad_magic_and_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope.ckpt")

    def test_group_hash_tracks_content(self):
        m = self.model()
        a = m.to_checkpoint("x")
        with torch.no_grad():
            next(m.lrm.parameters()).add_(1.0)
        b = m.to_checkpoint("x")
        assert a.group_hash("lrm") != b.group_hash("lrm")
        assert a.group_hash("ae") == b.group_hash("ae")


@pytest.fixture(scope="module")
def records():
    return build_scene_records(0, kinds=("dolly", "lawnmower"), length=13,
                               camera=CameraModel.from_fov(16, 16))[1]


class TestDataset:
    def test_record_contents(self, records):
        for r in records:
            assert r.images.shape == (13, 16, 16, 3)
            assert r.depths.shape == r.mono.shape == r.semantic.shape == (13, 16, 16, 1)
            assert len(r.poses) == 13 and (len(r) - 1) % 4 == 0

    def test_write_read(self, records, tmp_path):
        write_dataset(tmp_path, records, 13)
        back, window = read_dataset(tmp_path)
        assert window == 13 and len(back) == 2
        for a, b in zip(records, back):
            assert np.array_equal(a.images, b.images) and np.array_equal(a.depths, b.depths)
            assert np.array_equal(a.semantic, b.semantic) and a.kind == b.kind

    def test_sample_window(self, records):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = sample_window(records[0], 5, rng, intervals=(1, 2, 3))
            assert len(s.frame_ids) == 5 and max(s.frame_ids) < 13
            assert len(s.spatial_ids) == 2 and max(s.spatial_ids) <= s.frame_ids[-1]
