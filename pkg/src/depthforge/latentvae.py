"""Small convolutional VAE mapping 3-channel inputs to 4-channel latents at
1/8 resolution, trained jointly on synthetic RGB, normalized depth, and
mask-like images so that all three conditioning streams survive encoding.

Also hosts the sparse-information retention analyzer comparing the VAE
mask roundtrip against naive 8x nearest-neighbor resizing.
"""

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
from scipy import ndimage
from torch import nn

from .core import DatasetManifest, DimensionError, InpaintMask, config_hash
from .depthnorm import densify_nearest, normalize, sample_beta
from .masking import MaskSpec, make_mask, sample_training_mask

logger = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
ENCODE_CLAMP = 2.0  # normalized depth may overflow [-1, 1]; clamp only here


class TrainingDivergedError(Exception):
    """Training loss became non-finite or exploded."""


@dataclass
class LatentTensor:
    """4 x (H/8) x (W/8) latent with a tag for what it encodes."""

    values: torch.Tensor
    source: str = "rgb"  # rgb | depth | mask

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != LATENT_CHANNELS:
            raise ValueError(f"latent must be ({LATENT_CHANNELS}, h, w), got {tuple(self.values.shape)}")


@dataclass
class VaeConfig:
    base_channels: int = 32
    epochs: int = 18
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0
    # probability of drawing each stream when assembling a training batch
    stream_probs: tuple[float, float, float, float] = (0.3, 0.4, 0.15, 0.15)  # rgb, depth, densified, mask
    # fraction of mask-stream draws forced to sparse point masks, the case
    # naive downsampling destroys and the encoder must learn to keep
    mask_sparse_bias: float = 0.5
    # upweights pixels deviating from a local blur (edges); reconstruction
    # error is edge-dominated at 16x latent compression
    hf_weight: float = 10.0
    # evaluation normalizes with compression factor 1, so depth streams draw
    # the factor as max of two uniforms to see full-range inputs more often
    depth_beta_bias: bool = True
    lr_decay_epochs: int = 10
    lr_decay_factor: float = 0.5
    mask_values: tuple[float, float] = (-1.0, 1.0)  # known, unknown
    min_train_samples: int = 500
    device: str = "cpu"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        for key in ("stream_probs", "mask_values"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


def _gn(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _gn(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """Three stride-2 stages: H x W x 3 -> (H/8) x (W/8) x 2*latent.

    Residual blocks sit after each downsampling conv so the heavy compute
    runs at lower resolution. A pixel-unshuffle shortcut feeds each latent
    cell its raw 8x8 block, letting the posterior encode isolated pixels
    (sparse masks, sharp edges) that the smooth conv trunk averages away.
    """

    def __init__(self, base: int):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 4
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.stages = nn.ModuleList([
            nn.ModuleList([nn.Conv2d(c1, c2, 3, stride=2, padding=1), ResBlock(c2)]),
            nn.ModuleList([nn.Conv2d(c2, c3, 3, stride=2, padding=1), ResBlock(c3)]),
            nn.ModuleList([nn.Conv2d(c3, c3, 3, stride=2, padding=1), ResBlock(c3)]),
        ])
        self.norm_out = _gn(c3)
        self.conv_out = nn.Conv2d(c3, 2 * LATENT_CHANNELS, 3, padding=1)
        self.shortcut = nn.Sequential(
            nn.PixelUnshuffle(DOWNSAMPLE),
            nn.Conv2d(3 * DOWNSAMPLE**2, 2 * c3, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c3, 2 * c3, 1), nn.SiLU(),
            nn.Conv2d(2 * c3, 2 * LATENT_CHANNELS, 1),
        )

    def forward(self, x):
        h = self.conv_in(x)
        for down, res in self.stages:
            h = res(down(h))
        h = self.conv_out(torch.nn.functional.silu(self.norm_out(h)))
        h = h + self.shortcut(x)
        mu, logvar = h.chunk(2, dim=1)
        return mu, logvar


class Decoder(nn.Module):
    """Mirror of the encoder with a sub-pixel head: the trunk stops at half
    resolution and the final 2x comes from PixelShuffle, which places edges
    at pixel precision instead of smearing them through nearest upsampling.
    A second pixel-shuffle shortcut straight from the latent gives every
    output pixel a direct channel slot, so isolated sparse content survives
    without fighting the smooth path."""

    def __init__(self, base: int):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 4
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c3, 3, padding=1)
        self.mid = ResBlock(c3)
        self.stages = nn.ModuleList([
            nn.ModuleList([nn.Conv2d(c3, c3, 3, padding=1), ResBlock(c3)]),
            nn.ModuleList([nn.Conv2d(c3, c2, 3, padding=1), ResBlock(c2)]),
        ])
        self.norm_out = _gn(c2)
        self.head = nn.Sequential(
            nn.Conv2d(c2, 3 * 4, 3, padding=1),
            nn.PixelShuffle(2),
        )
        self.shortcut = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, 2 * c3, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c3, 2 * c3, 1), nn.SiLU(),
            nn.Conv2d(2 * c3, 3 * DOWNSAMPLE**2, 1),
            nn.PixelShuffle(DOWNSAMPLE),
        )

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for conv, res in self.stages:
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = res(conv(h))
        return self.head(torch.nn.functional.silu(self.norm_out(h))) + self.shortcut(z)


class DepthVae(nn.Module):
    """Encoder/decoder pair whose public latents are standardized per
    channel (shift/scale buffers fitted after training), so the diffusion
    process sees approximately zero-mean unit-variance tensors."""

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        self.encoder = Encoder(self.config.base_channels)
        self.decoder = Decoder(self.config.base_channels)
        self.register_buffer("latent_shift", torch.zeros(LATENT_CHANNELS))
        self.register_buffer("latent_scale", torch.ones(LATENT_CHANNELS))

    # -- batched torch-level API -------------------------------------------
    def encode_batch(self, x: torch.Tensor, sample: bool = False,
                     generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise DimensionError(f"input dims {tuple(x.shape[-2:])} not divisible by {DOWNSAMPLE}")
        x = x.clamp(-ENCODE_CLAMP, ENCODE_CLAMP)
        mu, logvar = self.encoder(x)
        if sample:
            std = torch.exp(0.5 * logvar)
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            mu = mu + std * eps
        shift = self.latent_shift.to(mu.dtype)[None, :, None, None]
        scale = self.latent_scale.to(mu.dtype)[None, :, None, None]
        return (mu - shift) / scale

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        shift = self.latent_shift.to(z.dtype)[None, :, None, None]
        scale = self.latent_scale.to(z.dtype)[None, :, None, None]
        return self.decoder(z * scale + shift)

    @torch.no_grad()
    def fit_latent_stats(self, batches: list[torch.Tensor]) -> None:
        """Fit per-channel standardization from raw posterior means."""
        mus = [self.encoder(b.clamp(-ENCODE_CLAMP, ENCODE_CLAMP))[0] for b in batches]
        mu = torch.cat([m.transpose(0, 1).reshape(LATENT_CHANNELS, -1) for m in mus], dim=1)
        self.latent_shift.copy_(mu.mean(dim=1))
        self.latent_scale.copy_(mu.std(dim=1).clamp_min(1e-3))

    # -- single-sample numpy API --------------------------------------------
    @torch.no_grad()
    def encode(self, x: np.ndarray, source: str = "rgb") -> LatentTensor:
        """Encode an H x W x 3 grid (approximately [-1, 1]) to its posterior
        mean latent; deterministic."""
        t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
        mu = self.encode_batch(t.to(self.device))
        return LatentTensor(values=mu[0].cpu(), source=source)

    @torch.no_grad()
    def decode_depth(self, z: LatentTensor) -> np.ndarray:
        """Decode and average the three output channels into one depth grid."""
        out = self.decode_batch(z.values[None].to(self.device))
        return out[0].mean(dim=0).cpu().numpy()

    def encode_mask(self, mask: InpaintMask) -> LatentTensor:
        """Masks go through the same encoder: known/unknown mapped to the
        configured values (default -1/+1) and replicated across channels."""
        lo, hi = self.config.mask_values
        img = np.where(mask.values > 0, hi, lo).astype(np.float32)
        return self.encode(np.repeat(img[..., None], 3, axis=2), source="mask")

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device


def replicate_depth(normed: np.ndarray) -> np.ndarray:
    """Single-channel normalized depth to the VAE's 3-channel input layout."""
    return np.repeat(np.asarray(normed, dtype=np.float32)[..., None], 3, axis=2)


def kl_per_element(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(q || N(0,1)); non-negative by construction."""
    return -0.5 * (1.0 + logvar - mu.pow(2) - logvar.exp())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class VaeCheckpoint:
    path: Path
    config: VaeConfig
    val_rmse: float

    def load_model(self) -> DepthVae:
        model = DepthVae(self.config)
        state = torch.load(self.path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.eval()
        return model


def save_vae_checkpoint(model: DepthVae, path, val_rmse: float) -> VaeCheckpoint:
    """Atomic write: params to <path>, config sidecar to <path>.json."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, path)
    sidecar = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config.to_dict()),
        "val_rmse": val_rmse,
    }
    side_path = path.with_suffix(".json")
    side_tmp = side_path.with_suffix(".json.tmp")
    side_tmp.write_text(json.dumps(sidecar, indent=2))
    os.replace(side_tmp, side_path)
    return VaeCheckpoint(path=path, config=model.config, val_rmse=val_rmse)


def load_vae_checkpoint(path) -> VaeCheckpoint:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    config = VaeConfig.from_dict(sidecar["config"])
    if config_hash(config.to_dict()) != sidecar["config_hash"]:
        raise ValueError("VAE checkpoint sidecar config hash mismatch")
    return VaeCheckpoint(path=path, config=config, val_rmse=sidecar["val_rmse"])


def _load_arrays(manifest: DatasetManifest, split: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
    rgbs, depths = [], []
    for entry in manifest.split(split):
        s = manifest.load_sample(entry)
        rgbs.append(s.rgb.values)
        depths.append(s.depth.values)
    return rgbs, depths


def _draw_beta(rng: np.random.Generator, config: VaeConfig) -> float:
    if config.depth_beta_bias:
        return max(sample_beta(rng, "train"), sample_beta(rng, "train"))
    return sample_beta(rng, "train")


def _depth_input(depth: np.ndarray, rng: np.random.Generator, config: VaeConfig) -> np.ndarray:
    normed, _ = normalize(depth, np.ones_like(depth, dtype=bool), _draw_beta(rng, config))
    return replicate_depth(normed)


def _densified_input(depth: np.ndarray, rng: np.random.Generator, config: VaeConfig) -> np.ndarray:
    mask, _ = sample_training_mask(rng, depth.shape)
    known = mask.known
    if not known.any():
        return _depth_input(depth, rng, config)
    normed, _ = normalize(depth, known, _draw_beta(rng, config))
    return replicate_depth(densify_nearest(normed, known))


def _mask_input(shape: tuple[int, int], rng: np.random.Generator,
                config: VaeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mask-stream image plus class-balanced pixel weights.

    Plain L1 collapses sparse masks to the constant majority value (the
    0.1-2% known pixels contribute almost nothing to the loss), so known
    and unknown classes are reweighted to equal total mass per image.
    """
    if rng.uniform() < config.mask_sparse_bias:
        n_pix = shape[0] * shape[1]
        ratio = rng.uniform(max(0.001, 0.5 / n_pix + 1e-9), 0.02)
        spec = MaskSpec(kind="sparse", params={"known_ratio": float(ratio)},
                        seed=int(rng.integers(0, 2**63 - 1)))
        mask = make_mask(spec, shape)
    else:
        mask, _ = sample_training_mask(rng, shape)
    lo, hi = config.mask_values
    img = np.where(mask.values > 0, hi, lo).astype(np.float32)

    n_unknown = int(mask.values.sum())
    n_known = mask.values.size - n_unknown
    weight = np.ones(shape, dtype=np.float32)
    if 0 < n_known < mask.values.size:
        if n_known <= n_unknown:
            # balance the known minority (capped against extreme sparsity),
            # and charge a halo around each known pixel at half the total
            # minority mass so the decoder cannot buy recall with blobs
            minority_w = min(n_unknown / n_known, 200.0)
            known = mask.values == 0
            halo = ndimage.binary_dilation(known, iterations=2) & ~known
            n_halo = max(int(halo.sum()), 1)
            weight[halo] = max(1.0, 0.5 * minority_w * n_known / n_halo)
            weight[known] = minority_w
        else:
            weight[mask.values == 1] = min(n_known / n_unknown, 200.0)
        weight /= weight.mean()
    return np.repeat(img[..., None], 3, axis=2), np.repeat(weight[..., None], 3, axis=2)


def validation_rmse(model: DepthVae, depths: list[np.ndarray]) -> float:
    """Depth reconstruction RMSE in normalized units at beta = 1."""
    model.eval()
    errs = []
    with torch.no_grad():
        for depth in depths:
            normed, _ = normalize(depth, np.ones_like(depth, dtype=bool), 1.0)
            x = torch.from_numpy(replicate_depth(normed)).permute(2, 0, 1)[None].to(model.device)
            z = model.encode_batch(x)
            rec = model.decode_batch(z)[0].mean(dim=0).cpu().numpy()
            errs.append(np.mean((rec - normed) ** 2))
    return float(np.sqrt(np.mean(errs)))


def train_vae(manifest: DatasetManifest, config: VaeConfig, out_path) -> VaeCheckpoint:
    """Train on RGB, normalized depth, densified sparse depth, and mask
    images jointly; keeps the best-validation state. Deterministic in seed."""
    train_rgb, train_depth = _load_arrays(manifest, "train")
    if len(train_rgb) < config.min_train_samples:
        raise ValueError(f"need >= {config.min_train_samples} train samples, got {len(train_rgb)}")
    _, val_depth = _load_arrays(manifest, "val")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = DepthVae(config).to(config.device)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator(device="cpu").manual_seed(config.seed)

    n = len(train_rgb)
    streams = ("rgb", "depth", "densified", "mask")
    best_rmse = math.inf
    best_state = None
    step = 0
    for epoch in range(config.epochs):
        model.train()
        lr = config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch, weights, is_mask = [], [], []
            for i in idx:
                stream = streams[rng.choice(4, p=config.stream_probs)]
                w = None
                if stream == "rgb":
                    item = train_rgb[i] * 2.0 - 1.0
                elif stream == "depth":
                    item = _depth_input(train_depth[i], rng, config)
                elif stream == "densified":
                    item = _densified_input(train_depth[i], rng, config)
                else:
                    item, w = _mask_input(train_depth[i].shape, rng, config)
                batch.append(item)
                weights.append(w if w is not None else np.ones_like(item))
                is_mask.append(w is not None)
            x = torch.from_numpy(np.stack(batch).astype(np.float32)).permute(0, 3, 1, 2).to(config.device)
            w = torch.from_numpy(np.stack(weights).astype(np.float32)).permute(0, 3, 1, 2).to(config.device)
            x = x.clamp(-ENCODE_CLAMP, ENCODE_CLAMP)

            if config.hf_weight > 0:
                # edge emphasis for image-like streams only; mask items
                # already carry class-balanced weights
                blur = torch.nn.functional.avg_pool2d(x, 3, stride=1, padding=1)
                hf = 1.0 + config.hf_weight * (x - blur).abs()
                hf = hf / hf.mean(dim=(1, 2, 3), keepdim=True)
                flags = torch.tensor(is_mask, device=x.device)[:, None, None, None]
                w = torch.where(flags, w, w * hf)

            mu, logvar = model.encoder(x)
            std = torch.exp(0.5 * logvar)
            eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
            z = mu + std * eps.to(mu.device)
            rec = model.decoder(z)
            loss = ((rec - x).abs() * w).mean() + config.kl_weight * kl_per_element(mu, logvar).mean()

            loss_val = float(loss.detach())
            if not math.isfinite(loss_val) or loss_val > 1e10:
                raise TrainingDivergedError(f"loss {loss_val} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1

        rmse = validation_rmse(model, val_depth)
        logger.info("vae epoch %d step %d loss %.4f val_rmse %.4f", epoch, step, loss_val, rmse)
        if rmse < best_rmse:
            best_rmse = rmse
            best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    model.cpu().eval()

    # fit latent standardization on a fresh mixed sample of all streams
    stat_rng = np.random.default_rng(config.seed + 1)
    stat_batches = []
    for _ in range(8):
        items = []
        for _ in range(config.batch_size):
            i = int(stat_rng.integers(n))
            stream = streams[stat_rng.choice(4, p=config.stream_probs)]
            if stream == "rgb":
                items.append(train_rgb[i] * 2.0 - 1.0)
            elif stream == "depth":
                items.append(_depth_input(train_depth[i], stat_rng, config))
            elif stream == "densified":
                items.append(_densified_input(train_depth[i], stat_rng, config))
            else:
                items.append(_mask_input(train_depth[i].shape, stat_rng, config)[0])
        stat_batches.append(torch.from_numpy(np.stack(items).astype(np.float32)).permute(0, 3, 1, 2))
    model.fit_latent_stats(stat_batches)
    return save_vae_checkpoint(model, out_path, best_rmse)


# ---------------------------------------------------------------------------
# Sparse-retention analysis
# ---------------------------------------------------------------------------

def _recall_precision(pred_known: np.ndarray, true_known: np.ndarray) -> tuple[float, float]:
    true_n = int(true_known.sum())
    hit = int((pred_known & true_known).sum())
    recall = hit / true_n if true_n else 1.0
    pred_n = int(pred_known.sum())
    precision = hit / pred_n if pred_n else 0.0
    return recall, precision


def sparse_retention_report(vae: DepthVae, masks: list[InpaintMask]) -> dict:
    """Roundtrip each mask through the VAE and through naive 8x nearest
    resize, re-binarize at zero, and score how well known pixels survive."""
    lo, hi = vae.config.mask_values
    records = []
    for i, mask in enumerate(masks):
        true_known = mask.known

        z = vae.encode_mask(mask)
        dec = vae.decode_depth(z)
        vae_rec, vae_prec = _recall_precision(dec < 0, true_known)

        img = np.where(mask.values > 0, hi, lo).astype(np.float32)
        down = img[::DOWNSAMPLE, ::DOWNSAMPLE]
        up = np.repeat(np.repeat(down, DOWNSAMPLE, axis=0), DOWNSAMPLE, axis=1)
        ds_rec, ds_prec = _recall_precision(up < 0, true_known)

        records.append({
            "index": i,
            "known_ratio": float(true_known.mean()),
            "vae_recall": vae_rec,
            "vae_precision": vae_prec,
            "downsample_recall": ds_rec,
            "downsample_precision": ds_prec,
        })

    def mean(key):
        return float(np.mean([r[key] for r in records])) if records else 0.0

    return {
        "n_masks": len(records),
        "mean_vae_recall": mean("vae_recall"),
        "mean_vae_precision": mean("vae_precision"),
        "mean_downsample_recall": mean("downsample_recall"),
        "mean_downsample_precision": mean("downsample_precision"),
        "records": records,
    }
