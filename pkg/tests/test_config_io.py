import numpy as np
import pytest
import yaml

from hybridseg import config as C
from hybridseg.errors import ConfigError, InputError
from hybridseg.fileio import load_point_cloud, load_tensors, save_point_cloud, save_tensors
from hybridseg.pointcloud import PointCloud


class TestPointCloudFormats:
    def make(self, rng, p=30, cf=3):
        return PointCloud(
            rng.uniform(0, 5, size=(p, 3)),
            rng.uniform(0, 1, size=(p, cf)),
            rng.integers(-1, 6, size=p),
        )

    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(121)
        pc = self.make(rng)
        path = tmp_path / "a.pcs"
        save_point_cloud(path, pc)
        back = load_point_cloud(path)
        np.testing.assert_array_equal(back.labels, pc.labels)
        # storage is f32
        np.testing.assert_allclose(back.positions, pc.positions, atol=1e-6)
        np.testing.assert_allclose(back.features, pc.features, atol=1e-7)

    def test_text_roundtrip(self, tmp_path):
        rng = np.random.default_rng(122)
        pc = self.make(rng, cf=2)
        path = tmp_path / "a.txt"
        save_point_cloud(path, pc, fmt="text")
        back = load_point_cloud(path)
        assert back.features.shape == (30, 2)
        np.testing.assert_array_equal(back.labels, pc.labels)
        np.testing.assert_allclose(back.positions, pc.positions, atol=1e-6)

    def test_magic_sniffing(self, tmp_path):
        rng = np.random.default_rng(123)
        pc = self.make(rng)
        b = tmp_path / "b.pcs"
        t = tmp_path / "t.txt"
        save_point_cloud(b, pc)
        save_point_cloud(t, pc, fmt="text")
        assert load_point_cloud(b).num_points == load_point_cloud(t).num_points == 30

    def test_header_magic(self, tmp_path):
        path = tmp_path / "x.pcs"
        rng = np.random.default_rng(124)
        save_point_cloud(path, self.make(rng))
        assert path.read_bytes()[:4] == b"PCS1"

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(125)
        path = tmp_path / "x.pcs"
        save_point_cloud(path, self.make(rng))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(InputError):
            load_point_cloud(path)

    def test_inconsistent_text_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 0.5 1\n0 0 1 2\n")
        with pytest.raises(InputError):
            load_point_cloud(path)


class TestTensorContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(126)
        named = {
            "a.weight": rng.normal(size=(3, 4)),
            "b/bias": rng.normal(size=7),
            "scalar": np.array(3.5),
        }
        path = tmp_path / "m.htm"
        save_tensors(path, named)
        assert path.read_bytes()[:4] == b"HTM1"
        back = load_tensors(path)
        assert set(back) == set(named)
        for k in named:
            np.testing.assert_array_equal(back[k], named[k])
            assert back[k].dtype == np.float64

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.htm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(InputError):
            load_tensors(path)


class TestRunConfig:
    def test_presets_load_and_validate(self):
        for name in C.PRESET_NAMES:
            cfg = C.resolve_config(name)
            assert cfg.model.num_classes == 8
        tiny = C.resolve_config("tiny")
        assert tiny.model.encoder_channels == (4, 8, 16, 16, 16)
        assert tiny.model.attn_group_size == 64
        full = C.resolve_config("full")
        assert full.model.encoder_depths == (2, 2, 2, 6, 2)
        assert full.model.attn_group_size == 1024
        assert full.model.mamba_group_size == 4096
        assert full.train.batch_size == 12

    def test_roundtrip_identity(self, tmp_path):
        cfg = C.resolve_config("tiny")
        path = tmp_path / "copy.yaml"
        C.save_run_config(path, cfg)
        again = C.load_run_config(path)
        assert again == cfg
        # and a second cycle is bit-stable
        path2 = tmp_path / "copy2.yaml"
        C.save_run_config(path2, again)
        assert path.read_text() == path2.read_text()

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(ConfigError, match="model.bogus"):
            C.run_config_from_dict({"model": {"num_classes": 4, "bogus": 1}})
        with pytest.raises(ConfigError, match="nonsense"):
            C.run_config_from_dict({"nonsense": True})

    def test_type_errors_carry_field_path(self):
        with pytest.raises(ConfigError, match="model.num_heads"):
            C.run_config_from_dict({"model": {"num_classes": 4, "num_heads": "eight"}})
        with pytest.raises(ConfigError, match="train.max_lr"):
            C.run_config_from_dict({"train": {"max_lr": "fast"}})

    def test_semantic_validation_runs(self):
        with pytest.raises(ConfigError):
            C.run_config_from_dict({"model": {"num_classes": 1}})

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            C.load_run_config("/nonexistent/config.yaml")

    def test_strategy_values(self):
        data = {"model": {"num_classes": 8, "strategy": "outer_mamba_first"}}
        cfg = C.run_config_from_dict(data)
        assert cfg.model.strategy == "outer_mamba_first"
        with pytest.raises(ConfigError):
            C.run_config_from_dict({"model": {"num_classes": 8, "strategy": "sideways"}})
