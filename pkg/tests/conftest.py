import numpy as np
import pytest
import torch

from depthforge.latentvae import VaeConfig, train_vae
from depthforge.synthgen import SceneConfig, generate_dataset


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """Small synthetic dataset for unit tests (40 samples, 64x64)."""
    out = tmp_path_factory.mktemp("toydata")
    return generate_dataset(40, seed=1234, config=SceneConfig(), out_dir=out)


@pytest.fixture(scope="session")
def trained_vae_small(toy_manifest, tmp_path_factory):
    """Briefly trained small VAE; good enough for sign-dependent roundtrip
    tests without the full acceptance training run."""
    out = tmp_path_factory.mktemp("vae") / "vae_small.pt"
    cfg = VaeConfig(base_channels=16, epochs=90, batch_size=16, lr=2e-3,
                    lr_decay_epochs=40, min_train_samples=1, seed=3,
                    stream_probs=(0.2, 0.3, 0.2, 0.3))
    ckpt = train_vae(toy_manifest, cfg, out)
    return ckpt.load_model()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
