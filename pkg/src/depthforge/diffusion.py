"""Noise schedule, training objective, DDIM sampling, the two
conditioning baselines (gradient-guided and blended), and noised-latent
refinement of dense initial depth estimates.

The denoiser regresses epsilon by default (v-prediction is available on
the schedule). All samplers share one DDIM loop; they differ only in how
the known-depth latent is injected.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import DepthMap, InpaintMask, RgbdSample, RgbImage
from .depthnorm import (
    NoKnownDepthError,
    NormParams,
    denormalize,
    densify_nearest,
    normalize,
    sample_beta,
)
from .dualnet import DualBranchModel
from .latentvae import DepthVae, replicate_depth
from .masking import sample_training_mask

logger = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Scaled-linear beta schedule; alpha_bar[t] = prod(1 - beta[:t+1]).

    prediction_type selects what the denoiser regresses: "epsilon" (the
    noise) or "v" (sqrt(ab) * eps - sqrt(1-ab) * z0).
    """

    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    prediction_type: str = "epsilon"

    def __post_init__(self):
        if self.prediction_type not in ("epsilon", "v"):
            raise ValueError(f"unknown prediction_type {self.prediction_type!r}")
        betas = np.linspace(math.sqrt(self.beta_start), math.sqrt(self.beta_end), self.T) ** 2
        self.betas = betas
        self.alpha_bar = np.cumprod(1.0 - betas)
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0 or self.alpha_bar[0] > 1:
            raise ValueError("alpha_bar must stay in (0, 1]")

    def target(self, z0: torch.Tensor, eps: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
        """Training regression target at alpha_bar values `ab`."""
        if self.prediction_type == "epsilon":
            return eps
        return ab.sqrt() * eps - (1.0 - ab).sqrt() * z0

    def to_eps(self, model_out: torch.Tensor, z_t: torch.Tensor, t: int) -> torch.Tensor:
        """Convert the model's prediction into an epsilon estimate."""
        if self.prediction_type == "epsilon":
            return model_out
        ab = self.alpha_bar[t]
        return math.sqrt(ab) * model_out + math.sqrt(1.0 - ab) * z_t


@dataclass
class SamplerConfig:
    n_steps: int = 50
    eta: float = 0.0
    seed: int = 0
    guidance_weight: float = 0.0  # > 0 selects guided sampling in the benchmark
    blend: bool = False
    composite_known: bool = True
    zero_conditioning: bool = False  # ablation: zero out masked-depth and mask latents

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


def add_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"t {t} out of range [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddim_timesteps(schedule: NoiseSchedule, n_steps: int, t_start: int | None = None) -> np.ndarray:
    """Descending subsequence of training timesteps ending at 0."""
    if not 1 <= n_steps <= schedule.T:
        raise ValueError(f"n_steps must be in [1, {schedule.T}]")
    t_max = schedule.T - 1 if t_start is None else t_start
    n = min(n_steps, t_max + 1)
    return np.unique(np.linspace(0, t_max, n).round().astype(int))[::-1].copy()


def ddim_step(z: torch.Tensor, eps_pred: torch.Tensor, t: int, t_next: int | None,
              schedule: NoiseSchedule, eta: float = 0.0,
              generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """One DDIM update from t to t_next (None = clean state); returns
    (z_next, z0_hat)."""
    ab_t = schedule.alpha_bar[t]
    ab_n = 1.0 if t_next is None else schedule.alpha_bar[t_next]
    z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    if eta > 0 and t_next is not None:
        sigma = eta * math.sqrt((1 - ab_n) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_n)
    else:
        sigma = 0.0
    dir_coef = math.sqrt(max(1.0 - ab_n - sigma**2, 0.0))
    z_next = math.sqrt(ab_n) * z0_hat + dir_coef * eps_pred
    if sigma > 0:
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        z_next = z_next + sigma * noise
    return z_next, z0_hat


def downsample_mask_majority(mask: np.ndarray, factor: int = 8) -> np.ndarray:
    """Latent-resolution binary mask by area majority; 1 where the cell is
    mostly unknown. Deliberately the naive reduction the encoded mask
    avoids; used only by the blended/guided baselines."""
    h, w = mask.shape
    cells = mask.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    return (cells.mean(axis=(1, 3)) >= 0.5).astype(np.float32)


def blend_known(z: torch.Tensor, z_known: torch.Tensor, m_lat_binary: torch.Tensor,
                t: int, schedule: NoiseSchedule,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Overwrite known-region latents with an appropriately-noised encoding
    of the known depth: z <- m * z + (1 - m) * add_noise(z_known, t)."""
    eps = torch.randn(z_known.shape, generator=generator, dtype=z_known.dtype, device=z_known.device)
    noised = add_noise(z_known, t, eps, schedule)
    return m_lat_binary * z + (1.0 - m_lat_binary) * noised


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def random_flip(rng: np.random.Generator, *arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    """Horizontal flip applied jointly to all arrays with probability 0.5."""
    if rng.uniform() < 0.5:
        return tuple(a[:, ::-1].copy() for a in arrays)
    return arrays


def training_step(batch: list[RgbdSample], model: DualBranchModel, vae: DepthVae,
                  schedule: NoiseSchedule, rng: np.random.Generator,
                  generator: torch.Generator) -> torch.Tensor:
    """One denoising training step over a batch of RGB-D samples.

    Per sample: draw a mask and compression factor, normalize ground truth
    over the known region, densify the known values, encode everything
    through the frozen VAE, noise the depth latent at a random timestep,
    and regress the true noise.
    """
    device = next(model.parameters()).device
    gt_in, masked_in, mask_in, rgb_in, ts = [], [], [], [], []
    for s in batch:
        mask, _ = sample_training_mask(rng, s.depth.shape)
        beta = sample_beta(rng, "train")
        rgb, depth, valid, mvals = random_flip(
            rng, s.rgb.values, s.depth.values, s.depth.valid, mask.values)
        known = (mvals == 0) & valid
        if not known.any():
            logger.warning("sample %s: training mask left no known pixel, skipped", s.id)
            continue
        try:
            normed, _ = normalize(depth, known, beta)
        except NoKnownDepthError:
            logger.warning("sample %s skipped: no known depth", s.id)
            continue
        densified = densify_nearest(normed, known)
        lo, hi = vae.config.mask_values
        gt_in.append(replicate_depth(normed))
        masked_in.append(replicate_depth(densified))
        mask_in.append(np.repeat(np.where(mvals > 0, hi, lo).astype(np.float32)[..., None], 3, axis=2))
        rgb_in.append(rgb * 2.0 - 1.0)
        ts.append(int(rng.integers(0, schedule.T)))

    if not gt_in:
        raise NoKnownDepthError("every sample in the batch lacked known depth")

    def to_t(arrs):
        return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2).to(device)

    with torch.no_grad():
        z0 = vae.encode_batch(to_t(gt_in))
        z_masked = vae.encode_batch(to_t(masked_in))
        m_lat = vae.encode_batch(to_t(mask_in))
        z_rgb = vae.encode_batch(to_t(rgb_in))

    t_tensor = torch.tensor(ts, dtype=torch.long, device=device)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(device)
    ab = torch.from_numpy(schedule.alpha_bar[ts]).to(dtype=z0.dtype, device=device)[:, None, None, None]
    z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps

    img_tokens = model.image_tokens_batch(to_t(rgb_in))
    ref_feats = model.reference_features_batch(z_rgb, img_tokens)
    pred = model.estimation_batch(z_t, z_masked, m_lat, t_tensor, ref_feats, img_tokens)
    return torch.mean((pred - schedule.target(z0, eps, ab)) ** 2)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class _Conditioning:
    z_masked: torch.Tensor       # (1, 4, h, w)
    m_lat: torch.Tensor
    ref_feats: dict[str, torch.Tensor]
    img_tokens: torch.Tensor
    params: NormParams
    known: np.ndarray            # pixel-space known region
    known_lat: torch.Tensor      # (1, 1, h, w) latent-space known-majority cells
    m_lat_binary: torch.Tensor   # (1, 1, h, w) 1 = unknown-majority


def _prepare(rgb: RgbImage, depth_known: DepthMap, mask: InpaintMask,
             model: DualBranchModel, vae: DepthVae, cfg: SamplerConfig) -> _Conditioning:
    known = mask.known & depth_known.valid
    if not known.any():
        raise NoKnownDepthError("sampling requires at least one known depth pixel")
    normed, params = normalize(depth_known.values, known, beta=1.0)
    densified = densify_nearest(normed, known)

    device = next(model.parameters()).device
    def to_t(img):
        return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None].to(device)

    with torch.no_grad():
        z_masked = vae.encode_batch(to_t(replicate_depth(densified)))
        lo, hi = vae.config.mask_values
        mask_img = np.repeat(np.where(mask.values > 0, hi, lo).astype(np.float32)[..., None], 3, axis=2)
        m_lat = vae.encode_batch(to_t(mask_img))
        if cfg.zero_conditioning:
            z_masked = torch.zeros_like(z_masked)
            m_lat = torch.zeros_like(m_lat)
        rgb_t = to_t(rgb.values * 2.0 - 1.0)
        z_rgb = vae.encode_batch(rgb_t)
        img_tokens = model.image_tokens_batch(rgb_t)
        ref_feats = model.reference_features_batch(z_rgb, img_tokens)

    m_bin = downsample_mask_majority(mask.values.astype(np.float64))
    m_lat_binary = torch.from_numpy(m_bin)[None, None].to(device=device, dtype=z_masked.dtype)
    return _Conditioning(z_masked=z_masked, m_lat=m_lat, ref_feats=ref_feats,
                         img_tokens=img_tokens, params=params, known=known,
                         known_lat=1.0 - m_lat_binary, m_lat_binary=m_lat_binary)


def _known_latent_loss(z0_hat: torch.Tensor, cond: _Conditioning) -> torch.Tensor:
    """MSE between the predicted clean latent and the encoded known-depth
    latent, restricted to latent cells that are majority-known."""
    weight = cond.known_lat
    denom = weight.sum() * z0_hat.shape[1]
    if float(denom) == 0:
        return torch.zeros((), dtype=z0_hat.dtype, device=z0_hat.device)
    return (weight * (z0_hat - cond.z_masked) ** 2).sum() / denom


def _ddim_loop(model: DualBranchModel, cond: _Conditioning, schedule: NoiseSchedule,
               cfg: SamplerConfig, z: torch.Tensor, ts: np.ndarray,
               generator: torch.Generator) -> torch.Tensor:
    guided = cfg.guidance_weight > 0
    for i, t in enumerate(ts):
        t_next = int(ts[i + 1]) if i + 1 < len(ts) else None
        if cfg.blend:
            z = blend_known(z, cond.z_masked, cond.m_lat_binary, int(t), schedule, generator)
        t_tensor = torch.tensor([int(t)], dtype=torch.long, device=z.device)
        if guided:
            with torch.enable_grad():
                z_req = z.detach().requires_grad_(True)
                raw = model.estimation_batch(z_req, cond.z_masked, cond.m_lat, t_tensor,
                                             cond.ref_feats, cond.img_tokens)
                eps_pred = schedule.to_eps(raw, z_req, int(t))
                ab_t = schedule.alpha_bar[int(t)]
                z0_hat = (z_req - math.sqrt(1 - ab_t) * eps_pred) / math.sqrt(ab_t)
                loss = _known_latent_loss(z0_hat, cond)
                grad = torch.autograd.grad(loss, z_req)[0]
            step_weight = cfg.guidance_weight / math.sqrt(i + 1)
            z = (z - step_weight * grad).detach()
        with torch.no_grad():
            raw = model.estimation_batch(z, cond.z_masked, cond.m_lat, t_tensor,
                                         cond.ref_feats, cond.img_tokens)
            eps_pred = schedule.to_eps(raw, z, int(t))
            z, _ = ddim_step(z, eps_pred, int(t), t_next, schedule, cfg.eta, generator)
    if cfg.blend:
        z = cond.m_lat_binary * z + (1.0 - cond.m_lat_binary) * cond.z_masked
    return z


def _finish(z0: torch.Tensor, cond: _Conditioning, depth_known: DepthMap,
            vae: DepthVae, cfg: SamplerConfig) -> tuple[DepthMap, NormParams]:
    with torch.no_grad():
        normed_pred = vae.decode_batch(z0)[0].mean(dim=0).cpu().numpy()
    pred = np.asarray(denormalize(normed_pred, cond.params), dtype=np.float32)
    if cfg.composite_known:
        pred[cond.known] = depth_known.values[cond.known]
    return DepthMap.dense(pred), cond.params


def sample(rgb: RgbImage, depth_known: DepthMap, mask: InpaintMask,
           model: DualBranchModel, vae: DepthVae, cfg: SamplerConfig,
           schedule: NoiseSchedule | None = None,
           trace: dict | None = None) -> tuple[DepthMap, NormParams]:
    """Depth inpainting by DDIM from pure noise, conditioned on the known
    depth (beta = 1 at evaluation time)."""
    schedule = schedule or NoiseSchedule()
    cond = _prepare(rgb, depth_known, mask, model, vae, cfg)
    generator = torch.Generator(device="cpu").manual_seed(cfg.seed)
    h, w = cond.z_masked.shape[-2:]
    z = torch.randn((1, 4, h, w), generator=generator, dtype=cond.z_masked.dtype)
    ts = ddim_timesteps(schedule, cfg.n_steps)
    z0 = _ddim_loop(model, cond, schedule, cfg, z, ts, generator)
    if trace is not None:
        trace.update(z_final=z0.detach(), z_known=cond.z_masked.detach(),
                     known_lat=cond.known_lat.detach(),
                     known_latent_error=float(_known_latent_loss(z0, cond)))
    return _finish(z0, cond, depth_known, vae, cfg)


def guided_sample(rgb: RgbImage, depth_known: DepthMap, mask: InpaintMask,
                  model: DualBranchModel, vae: DepthVae, cfg: SamplerConfig,
                  schedule: NoiseSchedule | None = None,
                  trace: dict | None = None) -> tuple[DepthMap, NormParams]:
    """Baseline: gradient-update the noisy latent each step to shrink the
    known-region error of the predicted clean latent before stepping.

    The per-step weight decays as guidance_weight / sqrt(step + 1); a
    weight of 0 reduces exactly to vanilla sampling.
    """
    return sample(rgb, depth_known, mask, model, vae, cfg, schedule, trace)


def blended_sample(rgb: RgbImage, depth_known: DepthMap, mask: InpaintMask,
                   model: DualBranchModel, vae: DepthVae, cfg: SamplerConfig,
                   schedule: NoiseSchedule | None = None,
                   trace: dict | None = None) -> tuple[DepthMap, NormParams]:
    """Baseline: overwrite known-region latents with noised encodings of the
    known depth at every step (latent mask by naive area-majority)."""
    cfg = dataclasses.replace(cfg, blend=True)
    return sample(rgb, depth_known, mask, model, vae, cfg, schedule, trace)


def refine(rgb: RgbImage, depth_init: DepthMap, matched: np.ndarray, strength: float,
           model: DualBranchModel, vae: DepthVae, cfg: SamplerConfig,
           schedule: NoiseSchedule | None = None) -> tuple[DepthMap, NormParams]:
    """Refinement mode: start DDIM from a partially-noised encoding of a
    dense initial depth estimate, conditioned on trusted (matched) depths.

    `matched` marks trusted pixels; the inpainting mask is its complement.
    strength in (0, 1] scales both the starting timestep and step count.
    """
    if not 0 < strength <= 1:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    schedule = schedule or NoiseSchedule()
    matched = np.asarray(matched, dtype=bool)
    if not matched.any():
        raise NoKnownDepthError("refine requires a non-empty matched region")
    mask = InpaintMask((~matched).astype(np.uint8))
    cond = _prepare(rgb, depth_init, mask, model, vae, cfg)

    normed_init, _ = normalize(depth_init.values, matched & depth_init.valid, beta=1.0)
    device = next(model.parameters()).device
    x = torch.from_numpy(replicate_depth(normed_init)).permute(2, 0, 1)[None].to(device)
    with torch.no_grad():
        z_init = vae.encode_batch(x)

    t_start = int(np.clip(round(strength * schedule.T), 1, schedule.T - 1))
    n_sub = max(1, round(cfg.n_steps * strength))
    ts = ddim_timesteps(schedule, n_sub, t_start=t_start)

    generator = torch.Generator(device="cpu").manual_seed(cfg.seed)
    eps = torch.randn(z_init.shape, generator=generator, dtype=z_init.dtype)
    z = add_noise(z_init, t_start, eps.to(device), schedule)
    z0 = _ddim_loop(model, cond, schedule, cfg, z, ts, generator)
    return _finish(z0, cond, depth_init, vae, cfg)
