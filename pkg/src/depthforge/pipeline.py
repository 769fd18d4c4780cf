"""Training orchestration: epoch loop, stepped learning-rate decay, atomic
checkpointing with full rng state, line-delimited JSON loss logging, and
exact resume."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import DatasetManifest, config_hash
from .depthnorm import NoKnownDepthError
from .diffusion import NoiseSchedule, training_step
from .dualnet import DualBranchModel, UNetConfig
from .latentvae import TrainingDivergedError, load_vae_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 2e-4
    lr_decay_every: int = 4
    lr_decay_factor: float = 0.5
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 500
    vae_checkpoint: str = ""
    out_dir: str = "runs/train"
    schedule_T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    prediction_type: str = "epsilon"
    device: str = "cpu"

    def __post_init__(self):
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        for name in ("epochs", "lr_decay_every", "batch_size", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Data order is a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def save_model_checkpoint(path, model: DualBranchModel, extra: dict | None = None) -> Path:
    """Atomic write of parameters plus a JSON architecture sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"model_state": model.state_dict(), **(extra or {})}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    sidecar = {
        "unet_config": model.config.to_dict(),
        "config_hash": config_hash(model.config.to_dict()),
        "layer_ids": model.config.layer_ids(),
        "step": (extra or {}).get("step"),
    }
    side_path = path.with_suffix(".json")
    side_tmp = side_path.with_suffix(".json.tmp")
    side_tmp.write_text(json.dumps(sidecar, indent=2))
    os.replace(side_tmp, side_path)
    return path


def load_model_checkpoint(path) -> tuple[DualBranchModel, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    config = UNetConfig.from_dict(sidecar["unet_config"])
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = DualBranchModel(config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


def train(manifest: DatasetManifest, train_config: TrainConfig, unet_config: UNetConfig,
          resume_from=None) -> Path:
    """Run denoiser training and return the final checkpoint path.

    Checkpoints carry optimizer and rng state, so a resumed run replays the
    exact trajectory of an uninterrupted one.
    """
    cfg = train_config
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    vae_ckpt = load_vae_checkpoint(cfg.vae_checkpoint)
    vae = vae_ckpt.load_model().to(cfg.device)
    vae.requires_grad_(False)

    entries = manifest.split("train")
    if not entries:
        raise ValueError("manifest has no train split")
    samples = [manifest.load_sample(e) for e in entries]
    for s in samples:
        if s.depth.shape[0] % 8 or s.depth.shape[1] % 8:
            raise ValueError(f"sample {s.id} dims {s.depth.shape} not divisible by 8")

    schedule = NoiseSchedule(T=cfg.schedule_T, beta_start=cfg.beta_start,
                             beta_end=cfg.beta_end, prediction_type=cfg.prediction_type)

    torch.manual_seed(cfg.seed)
    model = DualBranchModel(unet_config).to(cfg.device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator(device="cpu").manual_seed(cfg.seed)

    start_epoch = 0
    batch_offset = 0
    step = 0
    if resume_from is not None:
        payload = torch.load(Path(resume_from), map_location="cpu", weights_only=False)
        model.load_state_dict(payload["model_state"])
        opt.load_state_dict(payload["optimizer_state"])
        rng.bit_generator.state = payload["numpy_rng_state"]
        gen.set_state(payload["torch_gen_state"])
        step = payload["step"]
        start_epoch = payload["epoch"]
        batch_offset = payload["batch_in_epoch"]
        logger.info("resumed from %s at step %d (epoch %d)", resume_from, step, start_epoch)

    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "a")
    n = len(samples)
    batches_per_epoch = math.ceil(n / cfg.batch_size)

    def write_checkpoint(path, epoch, batch_in_epoch):
        save_model_checkpoint(path, model, extra={
            "optimizer_state": opt.state_dict(),
            "numpy_rng_state": rng.bit_generator.state,
            "torch_gen_state": gen.get_state(),
            "step": step,
            "epoch": epoch,
            "batch_in_epoch": batch_in_epoch,
            "train_config": cfg.to_dict(),
            "vae_config_hash": config_hash(vae.config.to_dict()),
        })

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            order = epoch_order(cfg.seed, epoch, n)
            first_batch = batch_offset if epoch == start_epoch else 0
            for b in range(first_batch, batches_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [samples[i] for i in idx]
                try:
                    loss = training_step(batch, model, vae, schedule, rng, gen)
                except NoKnownDepthError:
                    logger.warning("batch at step %d fully degenerate, skipped", step)
                    continue
                loss_val = float(loss.detach())
                if not math.isfinite(loss_val) or loss_val > 1e10:
                    raise TrainingDivergedError(f"loss {loss_val} at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                log_file.write(json.dumps(
                    {"step": step, "epoch": epoch, "loss": loss_val, "lr": lr}) + "\n")
                log_file.flush()
                if step % cfg.checkpoint_every == 0:
                    write_checkpoint(out_dir / "model_latest.pt", epoch,
                                     batch_in_epoch=b + 1)
    finally:
        log_file.close()

    final = out_dir / "model_final.pt"
    write_checkpoint(final, cfg.epochs, batch_in_epoch=0)
    return final


def smoothed_losses(log_path, window: int = 50) -> np.ndarray:
    """Moving average over the JSONL loss log."""
    losses = [json.loads(line)["loss"] for line in Path(log_path).read_text().splitlines() if line]
    if not losses:
        return np.array([])
    kernel = np.ones(min(window, len(losses))) / min(window, len(losses))
    return np.convolve(losses, kernel, mode="valid")
