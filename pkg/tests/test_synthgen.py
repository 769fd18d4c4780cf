import numpy as np
import pytest

from depthforge.core import load_manifest, read_depth, read_rgb, validate_sample
from depthforge.synthgen import SceneConfig, generate_dataset, generate_scene


CFG = SceneConfig()


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(7, CFG)
        b = generate_scene(7, CFG)
        np.testing.assert_array_equal(a.rgb.values, b.rgb.values)
        np.testing.assert_array_equal(a.depth.values, b.depth.values)

    def test_zero_primitives_is_background_plane(self):
        cfg = SceneConfig(n_primitives=(0, 0))
        s = generate_scene(3, cfg)
        d = s.depth.values
        # background is a linear ramp spanning [near, far]
        assert d.min() == pytest.approx(cfg.near, abs=1e-5)
        assert d.max() == pytest.approx(cfg.far, abs=1e-5)
        # linear in image coordinates: second differences vanish
        assert np.abs(np.diff(d, n=2, axis=0)).max() < 1e-4
        assert np.abs(np.diff(d, n=2, axis=1)).max() < 1e-4

    def test_depth_within_near_far(self):
        for seed in range(25):
            s = generate_scene(seed, CFG)
            assert s.depth.values.min() >= CFG.near - 1e-6
            assert s.depth.values.max() <= CFG.far + 1e-6

    def test_valid_sample(self):
        for seed in range(10):
            assert validate_sample(generate_scene(seed, CFG)) == []

    def test_histogram_coverage(self):
        # aggregate depth histogram over many scenes covers >= 90% of [near, far]
        counts = np.zeros(20)
        for seed in range(1000):
            d = generate_scene(seed, CFG).depth.values
            hist, _ = np.histogram(d, bins=20, range=(CFG.near, CFG.far))
            counts += hist
        assert (counts > 0).sum() >= 18

    def test_primitives_are_depth_coherent(self):
        # per-primitive depth variance stays below whole-scene variance
        checked = 0
        for seed in range(40):
            s = generate_scene(seed, CFG)
            region = s.meta["region"]
            scene_var = s.depth.values.var()
            for rid in range(1, s.meta["n_primitives"] + 1):
                footprint = region == rid
                if footprint.sum() < 16:
                    continue
                assert s.depth.values[footprint].var() < scene_var
                checked += 1
        assert checked > 20

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(near=5.0, far=2.0)
        with pytest.raises(ValueError):
            SceneConfig(image_size=(60, 64))


class TestGenerateDataset:
    def test_split_arithmetic(self, tmp_path):
        m = generate_dataset(20, 0, CFG, tmp_path)
        assert len(m.split("train")) == 18
        assert len(m.split("val")) == 1
        assert len(m.split("test")) == 1

    def test_empty_dataset(self, tmp_path):
        m = generate_dataset(0, 0, CFG, tmp_path)
        assert m.samples == []

    def test_regeneration_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_dataset(6, 11, CFG, d1)
        generate_dataset(6, 11, CFG, d2)
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        for rel in ["depth/scene_000003.pfm", "rgb/scene_000003.png"]:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()

    def test_files_load_back(self, tmp_path):
        m = generate_dataset(4, 5, CFG, tmp_path)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert [s.id for s in loaded.samples] == [s.id for s in m.samples]
        entry = loaded.samples[0]
        d = read_depth(tmp_path / entry.depth_path, format="pfm")
        rgb = read_rgb(tmp_path / entry.rgb_path)
        assert d.shape == CFG.image_size
        assert rgb.shape == CFG.image_size

    def test_per_sample_seed_offset(self, tmp_path):
        # sample i reproduces generate_scene(seed + i) exactly
        generate_dataset(3, 100, CFG, tmp_path)
        direct = generate_scene(102, CFG)
        stored = read_depth(tmp_path / "depth/scene_000002.pfm", format="pfm")
        np.testing.assert_array_equal(stored.values, direct.depth.values)
