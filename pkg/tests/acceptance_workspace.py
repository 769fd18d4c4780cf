"""Shared artifacts for the acceptance suite: the toy dataset, the trained
VAE, and the trained dual-branch model, cached on disk (keyed by the full
recipe hash) so reruns of pytest do not retrain."""

import logging
import time
from pathlib import Path

from depthforge.cli import cache_dir
from depthforge.core import config_hash, load_manifest
from depthforge.dualnet import UNetConfig
from depthforge.latentvae import VaeConfig, load_vae_checkpoint, train_vae
from depthforge.pipeline import TrainConfig, load_model_checkpoint, train
from depthforge.synthgen import SceneConfig, generate_dataset

logger = logging.getLogger(__name__)

N_SAMPLES = 2000
DATA_SEED = 20_240_101

SCENE = SceneConfig()

VAE = VaeConfig(
    base_channels=32,
    epochs=36,
    batch_size=32,
    lr=1e-3,
    lr_decay_epochs=10,
    seed=11,
)

UNET = UNetConfig()

TRAIN = TrainConfig(
    epochs=10,
    lr=2e-4,
    lr_decay_every=4,
    lr_decay_factor=0.5,
    batch_size=16,
    seed=7,
    checkpoint_every=500,
)


RECIPE_VERSION = 3  # bump to invalidate cached workspaces after code changes


def recipe_hash() -> str:
    return config_hash({
        "version": RECIPE_VERSION,
        "n": N_SAMPLES, "data_seed": DATA_SEED, "scene": SCENE.to_dict(),
        "vae": VAE.to_dict(), "unet": UNET.to_dict(), "train": TRAIN.to_dict(),
    })


def workspace_dir() -> Path:
    return cache_dir() / f"acceptance_{recipe_hash()}"


def build_workspace() -> dict:
    """Generate data and train both models unless already cached."""
    ws = workspace_dir()
    ws.mkdir(parents=True, exist_ok=True)
    data_dir = ws / "data"
    vae_path = ws / "vae.pt"
    model_path = ws / "train" / "model_final.pt"

    if not (data_dir / "manifest.json").exists():
        t0 = time.time()
        generate_dataset(N_SAMPLES, DATA_SEED, SCENE, data_dir)
        logger.info("generated %d samples in %.0fs", N_SAMPLES, time.time() - t0)
    manifest = load_manifest(data_dir / "manifest.json")

    if not vae_path.exists():
        t0 = time.time()
        ckpt = train_vae(manifest, VAE, vae_path)
        logger.info("trained VAE in %.1f min (val rmse %.4f)", (time.time() - t0) / 60, ckpt.val_rmse)
    vae_ckpt = load_vae_checkpoint(vae_path)

    if not model_path.exists():
        cfg = TrainConfig(**{**TRAIN.to_dict(),
                             "vae_checkpoint": str(vae_path),
                             "out_dir": str(ws / "train")})
        t0 = time.time()
        train(manifest, cfg, UNET)
        logger.info("trained model in %.1f min", (time.time() - t0) / 60)

    model, payload = load_model_checkpoint(model_path)
    return {
        "dir": ws,
        "data_dir": data_dir,
        "manifest": manifest,
        "vae_ckpt": vae_ckpt,
        "vae": vae_ckpt.load_model(),
        "model": model,
        "model_path": model_path,
        "vae_path": vae_path,
        "train_log": ws / "train" / "train_log.jsonl",
    }
