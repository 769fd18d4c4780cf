import json
from pathlib import Path

import numpy as np
import pytest
import torch

from depthforge.cli import run_command
from depthforge.core import InpaintMask, write_mask
from depthforge.dualnet import DualBranchModel, UNetConfig
from depthforge.latentvae import DepthVae, VaeConfig, save_vae_checkpoint
from depthforge.pipeline import save_model_checkpoint

TINY_UNET = UNetConfig(base_channels=8, n_heads=2, cross_attention_dim=16, time_embed_dim=32)


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpts")
    torch.manual_seed(0)
    save_vae_checkpoint(DepthVae(VaeConfig(base_channels=8)), d / "vae.pt", val_rmse=0.5)
    save_model_checkpoint(d / "model.pt", DualBranchModel(TINY_UNET), extra={"step": 0})
    return d


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_data")
    assert run_command(["--out-dir", str(d), "--seed", "3", "gen-data", "-n", "6"]) == 0
    return d


def paths_config(tmp_path, checkpoints, extra=None):
    doc = {"paths": {"vae_checkpoint": str(checkpoints / "vae.pt"),
                     "model_checkpoint": str(checkpoints / "model.pt")},
           "sampler": {"n_steps": 2, "seed": 0}}
    doc.update(extra or {})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


class TestExitCodes:
    def test_missing_required_option_is_usage_error(self, capsys):
        code = run_command(["inpaint", "--rgb", "x.png", "--depth", "y.pfm", "--out", "z.pfm"])
        captured = capsys.readouterr()
        assert code == 1
        assert "Usage" in captured.err or "usage" in captured.err.lower()

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"scene": {"near": 1.0, "bogus_knob": 2}}))
        code = run_command(["--config", str(cfg), "--out-dir", str(tmp_path / "o"),
                            "gen-data", "-n", "1"])
        assert code == 1
        assert "bogus_knob" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "bad2.json"
        cfg.write_text(json.dumps({"scenes": {"near": 1.0}}))
        assert run_command(["--config", str(cfg), "--out-dir", str(tmp_path / "o"),
                            "gen-data", "-n", "1"]) == 1

    def test_data_error_exit_code(self, tmp_path, checkpoints, capsys):
        cfg = paths_config(tmp_path, checkpoints)
        bad = tmp_path / "bad.pfm"
        bad.write_bytes(b"PF\n4 4\n-1.0\n" + b"\x00" * 64)
        rgb = tmp_path / "rgb.png"
        from depthforge.core import RgbImage, write_rgb

        write_rgb(RgbImage(np.zeros((64, 64, 3), dtype=np.float32)), rgb)
        mask = tmp_path / "m.png"
        write_mask(InpaintMask(np.ones((64, 64), dtype=np.uint8)), mask)
        code = run_command(["--config", str(cfg), "inpaint", "--rgb", str(rgb),
                            "--depth", str(bad), "--mask", str(mask),
                            "--out", str(tmp_path / "out.pfm")])
        assert code == 2


class TestGenData:
    def test_determinism_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_command(["--out-dir", str(a), "--seed", "9", "gen-data", "-n", "5"]) == 0
        assert run_command(["--out-dir", str(b), "--seed", "9", "gen-data", "-n", "5"]) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        for rel in ("depth/scene_000000.pfm", "rgb/scene_000004.png"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_resolved_config_records_overrides(self, tmp_path):
        out = tmp_path / "d"
        assert run_command(["--out-dir", str(out), "gen-data", "-n", "2",
                            "scene.near=2.0", "scene.seed=7"]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["scene"]["near"] == 2.0
        assert resolved["scene"]["seed"] == 7
        assert resolved["seed"] == 7


class TestInpaintAndEval:
    def test_inpaint_writes_depth_and_norm_sidecar(self, tmp_path, checkpoints, dataset):
        cfg = paths_config(tmp_path, checkpoints)
        out = tmp_path / "pred.pfm"
        mask = tmp_path / "m.png"
        rng = np.random.default_rng(0)
        write_mask(InpaintMask((rng.uniform(size=(64, 64)) > 0.6).astype(np.uint8)), mask)
        code = run_command(["--config", str(cfg), "inpaint",
                            "--rgb", str(dataset / "rgb/scene_000000.png"),
                            "--depth", str(dataset / "depth/scene_000000.pfm"),
                            "--mask", str(mask), "--out", str(out)])
        assert code == 0
        assert out.exists()
        params = json.loads(Path(str(out) + ".norm.json").read_text())
        assert params["beta"] == 1.0

    def test_eval_twice_byte_identical_csv(self, tmp_path, checkpoints, dataset):
        cfg = paths_config(tmp_path, checkpoints)
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            code = run_command(["--config", str(cfg), "--out-dir", str(out),
                                "eval", "--data", str(dataset), "--split", "train",
                                "--limit", "2"])
            assert code == 0
            outs.append((out / "report.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_threshold_violation_exit_4(self, tmp_path, checkpoints, dataset):
        cfg = paths_config(tmp_path, checkpoints, extra={"thresholds": {"absrel": 0.0}})
        code = run_command(["--config", str(cfg), "--out-dir", str(tmp_path / "et"),
                            "eval", "--data", str(dataset), "--split", "train",
                            "--limit", "1"])
        assert code == 4

    def test_report_regenerates_plots(self, tmp_path, checkpoints, dataset):
        cfg = paths_config(tmp_path, checkpoints)
        out = tmp_path / "er"
        assert run_command(["--config", str(cfg), "--out-dir", str(out),
                            "eval", "--data", str(dataset), "--split", "train",
                            "--limit", "1"]) == 0
        plots = tmp_path / "plots"
        assert run_command(["--out-dir", str(plots), "report",
                            "--from", str(out / "report.json")]) == 0
        assert (plots / "metric_distributions.png").exists()

    def test_retention_command(self, tmp_path, checkpoints):
        cfg = paths_config(tmp_path, checkpoints)
        out = tmp_path / "ret"
        code = run_command(["--config", str(cfg), "--out-dir", str(out),
                            "retention", "--n-masks", "3"])
        assert code == 0
        report = json.loads((out / "retention.json").read_text())
        assert report["n_masks"] == 3
