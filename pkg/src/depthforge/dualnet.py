"""Dual-branch denoising network.

An Estimation U-Net denoises the depth latent from a 12-channel input
(noisy depth latent + masked depth latent + encoded mask). A Reference
U-Net with the same backbone runs once over the RGB latent; at every
attention-bearing layer its pre-attention hidden state is fused into the
estimation branch by concatenating the two feature maps along width,
running self-attention over the joined token sequence, and keeping the
left (estimation) half. Global conditioning comes from a small learned
patch encoder whose tokens feed cross-attention in the estimation branch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class ArchitectureMismatchError(Exception):
    """Input geometry or branch configs are incompatible."""


class FusionShapeError(Exception):
    """Estimation/reference feature maps disagree in shape at a fusion site."""


class FusionKeyError(Exception):
    """A fusion site has no matching reference feature."""


@dataclass
class UNetConfig:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (0, 1)  # mid always carries attention
    cross_attention_dim: int = 128
    n_heads: int = 4
    time_embed_dim: int = 256
    fusion_residual: bool = True
    reference_cross_attention: bool = False
    reference_timestep: int = 0

    def __post_init__(self):
        if not self.channel_multipliers:
            raise ValueError("need at least one resolution level")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.n_heads:
                raise ValueError(
                    f"heads ({self.n_heads}) must divide channels ({self.base_channels * m})")
        if any(l < 0 or l >= len(self.channel_multipliers) for l in self.attn_levels):
            raise ValueError(f"attn_levels {self.attn_levels} out of range")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def layer_ids(self) -> list[str]:
        """Fusion-site ids in traversal order."""
        ids = [f"down.{i}.attn" for i in range(self.levels) if i in self.attn_levels]
        ids.append("mid.attn")
        ids += [f"up.{i}.attn" for i in reversed(range(self.levels)) if i in self.attn_levels]
        return ids

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        for key in ("channel_multipliers", "attn_levels"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FeatureMap:
    values: torch.Tensor  # (c, h, w) or (B, c, h, w)
    layer_id: str


@dataclass
class ImageTokens:
    values: torch.Tensor  # (N, D) or (B, N, D)

    def batched(self) -> torch.Tensor:
        return self.values if self.values.ndim == 3 else self.values[None]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(t.device)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim).to(next(self.parameters()).dtype))


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = _gn(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class WidthConcatFusion(nn.Module):
    """Self-attention that optionally fuses a same-shape reference feature.

    With a reference, the two maps are concatenated along width, attention
    runs over the joined h*2w token sequence, and only the left
    (estimation) half is kept. Without one, it is plain self-attention.
    No pre-normalization: the residual path is exactly x + attention(x).
    """

    def __init__(self, channels: int, n_heads: int, residual: bool = True):
        super().__init__()
        if channels % n_heads:
            raise ValueError(f"heads {n_heads} must divide channels {channels}")
        self.channels = channels
        self.n_heads = n_heads
        self.residual = residual
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def attention_probs(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        scale = (self.channels // self.n_heads) ** -0.5
        return torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.view(b, n, self.n_heads, c // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        if ref is not None:
            if ref.shape != x.shape:
                raise FusionShapeError(f"reference {tuple(ref.shape)} vs estimation {tuple(x.shape)}")
            joined = torch.cat([x, ref], dim=3)  # (b, c, h, 2w)
        else:
            joined = x
        tokens = joined.flatten(2).transpose(1, 2)  # (b, h * w', c)

        q = self._split_heads(self.to_q(tokens))
        k = self._split_heads(self.to_k(tokens))
        v = self._split_heads(self.to_v(tokens))
        attended = self.attention_probs(q, k) @ v
        attended = attended.transpose(1, 2).reshape(b, tokens.shape[1], c)
        out = self.to_out(attended).transpose(1, 2).view(b, c, h, joined.shape[3])
        if ref is not None:
            out = out[:, :, :, :w]  # keep the estimation half
        return x + out if self.residual else out


class CrossAttention(nn.Module):
    """Cross-attention of spatial features against image tokens."""

    def __init__(self, channels: int, context_dim: int, n_heads: int):
        super().__init__()
        self.channels = channels
        self.n_heads = n_heads
        self.norm = _gn(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(tokens).view(b, -1, self.n_heads, c // self.n_heads).transpose(1, 2)
        k = self.to_k(context).view(b, -1, self.n_heads, c // self.n_heads).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.n_heads, c // self.n_heads).transpose(1, 2)
        scale = (c // self.n_heads) ** -0.5
        probs = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).view(b, c, h, w)
        return x + out


class PatchEncoder(nn.Module):
    """4-layer conv encoder producing (H/16)*(W/16) image tokens; the
    trained-from-scratch stand-in for a pretrained image encoder."""

    def __init__(self, token_dim: int = 128):
        super().__init__()
        self.token_dim = token_dim
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(128, token_dim, 3, stride=2, padding=1),
        )

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [-1, 1] -> (B, N, token_dim)."""
        if rgb.shape[-1] % 16 or rgb.shape[-2] % 16:
            raise ArchitectureMismatchError(f"patch encoder needs dims divisible by 16, got {tuple(rgb.shape[-2:])}")
        feat = self.net(rgb)
        return feat.flatten(2).transpose(1, 2)


class _AttnSite(nn.Module):
    def __init__(self, channels: int, config: UNetConfig, cross_attention: bool):
        super().__init__()
        self.attn = WidthConcatFusion(channels, config.n_heads, residual=config.fusion_residual)
        self.cross = CrossAttention(channels, config.cross_attention_dim, config.n_heads) \
            if cross_attention else None

    def forward(self, h, layer_id, img_tokens, ref_feats, captured):
        if captured is not None:
            captured[layer_id] = h
            h = self.attn(h)
        elif ref_feats is not None:
            if layer_id not in ref_feats:
                raise FusionKeyError(f"no reference feature for fusion site {layer_id!r}")
            h = self.attn(h, ref=ref_feats[layer_id])
        else:
            h = self.attn(h)
        if self.cross is not None:
            if img_tokens is None:
                raise ArchitectureMismatchError("cross-attention branch requires image tokens")
            h = self.cross(h, img_tokens)
        return h


class DenoisingUNet(nn.Module):
    """Backbone shared by both branches; the estimation branch widens the
    input to 12 channels and adds cross-attention adapters."""

    def __init__(self, config: UNetConfig, in_channels: int, cross_attention: bool):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        chans = [config.base_channels * m for m in config.channel_multipliers]
        temb = config.time_embed_dim

        self.time_embed = TimeEmbedding(temb)
        self.in_conv = nn.Conv2d(in_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_res.append(ResBlock(prev, c, temb))
            if i in config.attn_levels:
                self.down_attn[str(i)] = _AttnSite(c, config, cross_attention)
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

        self.mid_res1 = ResBlock(chans[-1], chans[-1], temb)
        self.mid_attn = _AttnSite(chans[-1], config, cross_attention)
        self.mid_res2 = ResBlock(chans[-1], chans[-1], temb)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        cur = chans[-1]
        for i in reversed(range(len(chans))):
            self.up_res.append(ResBlock(cur + chans[i], chans[i], temb))
            if i in config.attn_levels:
                self.up_attn[str(i)] = _AttnSite(chans[i], config, cross_attention)
            if i > 0:
                self.upsample.append(nn.Conv2d(chans[i], chans[i], 3, padding=1))
            cur = chans[i]

        self.out_norm = _gn(chans[0])
        self.out_conv = nn.Conv2d(chans[0], 4, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x, t, img_tokens=None, ref_feats=None, capture=False):
        """Returns (prediction, captured pre-attention features)."""
        levels = self.config.levels
        h_dim, w_dim = x.shape[-2:]
        stride = 2 ** (levels - 1)
        if h_dim % stride or w_dim % stride or h_dim // stride < 2 or w_dim // stride < 2:
            raise ArchitectureMismatchError(
                f"latent {h_dim}x{w_dim} incompatible with {levels} resolution levels")

        temb = self.time_embed(t)
        captured: dict[str, torch.Tensor] | None = {} if capture else None

        h = self.in_conv(x)
        skips = []
        for i in range(levels):
            h = self.down_res[i](h, temb)
            if str(i) in self.down_attn:
                h = self.down_attn[str(i)](h, f"down.{i}.attn", img_tokens, ref_feats, captured)
            skips.append(h)
            if i < levels - 1:
                h = self.downsample[i](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, "mid.attn", img_tokens, ref_feats, captured)
        h = self.mid_res2(h, temb)

        for j, i in enumerate(reversed(range(levels))):
            h = torch.cat([h, skips[i]], dim=1)
            h = self.up_res[j](h, temb)
            if str(i) in self.up_attn:
                h = self.up_attn[str(i)](h, f"up.{i}.attn", img_tokens, ref_feats, captured)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out, captured


class DualBranchModel(nn.Module):
    """Reference branch (4-channel input) + estimation branch (12-channel
    input) sharing backbone architecture and initial weights, plus the
    patch encoder for image tokens."""

    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        self.config = config or UNetConfig()
        self.reference = DenoisingUNet(self.config, in_channels=4,
                                       cross_attention=self.config.reference_cross_attention)
        self.estimation = DenoisingUNet(self.config, in_channels=12, cross_attention=True)
        self.patch_encoder = PatchEncoder(self.config.cross_attention_dim)
        self._share_initial_weights()

    def _share_initial_weights(self):
        """Copy reference weights into every matching estimation parameter;
        the widened input conv keeps the reference kernel on its first 4
        channels and zero on the 8 conditioning channels."""
        ref_sd = self.reference.state_dict()
        est_sd = self.estimation.state_dict()
        with torch.no_grad():
            for name, p in ref_sd.items():
                if name == "in_conv.weight":
                    est_sd[name][:, :4].copy_(p)
                    est_sd[name][:, 4:].zero_()
                elif name in est_sd and est_sd[name].shape == p.shape:
                    est_sd[name].copy_(p)
        self.estimation.load_state_dict(est_sd)

    # -- batched internals ----------------------------------------------------
    def image_tokens_batch(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.patch_encoder(rgb)

    def reference_features_batch(self, z_rgb: torch.Tensor,
                                 img_tokens: torch.Tensor | None) -> dict[str, torch.Tensor]:
        t = torch.full((z_rgb.shape[0],), self.config.reference_timestep,
                       dtype=torch.long, device=z_rgb.device)
        tokens = img_tokens if self.config.reference_cross_attention else None
        _, captured = self.reference(z_rgb, t, img_tokens=tokens, capture=True)
        return captured

    def estimation_batch(self, z_t: torch.Tensor, z_masked: torch.Tensor, m_lat: torch.Tensor,
                         t: torch.Tensor, ref_feats: dict[str, torch.Tensor],
                         img_tokens: torch.Tensor) -> torch.Tensor:
        for z in (z_t, z_masked, m_lat):
            if z.shape != z_t.shape:
                raise ArchitectureMismatchError("estimation inputs must share latent shape")
        x = torch.cat([z_t, z_masked, m_lat], dim=1)  # 12 channels
        out, _ = self.estimation(x, t, img_tokens=img_tokens, ref_feats=ref_feats)
        return out

    # -- single-sample operations ----------------------------------------------
    @torch.no_grad()
    def reference_forward(self, z_rgb, img_tokens: ImageTokens) -> list[FeatureMap]:
        """Run the reference branch once (timestep fixed by config) and return
        pre-attention hidden states at every attention-bearing layer."""
        values = z_rgb.values if hasattr(z_rgb, "values") else z_rgb
        captured = self.reference_features_batch(values[None], img_tokens.batched())
        return [FeatureMap(values=captured[lid][0], layer_id=lid) for lid in self.config.layer_ids()]

    @torch.no_grad()
    def estimation_forward(self, z_t, z_masked, m_lat, t: int,
                           ref_feats: list[FeatureMap], img_tokens: ImageTokens) -> torch.Tensor:
        """Denoiser prediction for a single sample from the 12-channel input."""
        feats = {f.layer_id: (f.values if f.values.ndim == 4 else f.values[None]) for f in ref_feats}
        unwrap = lambda z: (z.values if hasattr(z, "values") else z)[None]
        t_tensor = torch.tensor([t], dtype=torch.long)
        out = self.estimation_batch(unwrap(z_t), unwrap(z_masked), unwrap(m_lat),
                                    t_tensor, feats, img_tokens.batched())
        return out[0]


def ref_fuse(fusion: WidthConcatFusion, f_est: FeatureMap, f_ref: FeatureMap) -> FeatureMap:
    """Width-concatenation fusion of one estimation/reference feature pair."""
    est = f_est.values if f_est.values.ndim == 4 else f_est.values[None]
    ref = f_ref.values if f_ref.values.ndim == 4 else f_ref.values[None]
    out = fusion(est, ref=ref)
    return FeatureMap(values=out[0] if f_est.values.ndim == 3 else out, layer_id=f_est.layer_id)
