"""Deterministic procedural generator of synthetic RGB-D scenes.

Each scene is a background plane with a linear depth gradient overlaid by
analytic primitives (ellipsoid bumps and box slabs) composited by minimum
depth. RGB is per-region random albedo shaded by depth-map normals plus
multi-octave value noise, so appearance genuinely carries depth cues.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    DepthMap,
    ManifestEntry,
    RgbdSample,
    RgbImage,
    config_hash,
    save_manifest,
    write_depth,
    write_rgb,
)


@dataclass
class SceneConfig:
    near: float = 1.0
    far: float = 10.0
    n_primitives: tuple[int, int] = (2, 6)
    primitive_kinds: tuple[str, ...] = ("ellipsoid", "slab")
    texture_octaves: int = 3
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"require 0 < near < far, got near={self.near} far={self.far}")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} must be divisible by 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("n_primitives", "primitive_kinds", "image_size"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int) -> np.ndarray:
    """Multi-octave bilinear value noise in roughly [-1, 1]."""
    out = np.zeros((h, w), dtype=np.float64)
    amp = 1.0
    total = 0.0
    for oct in range(octaves):
        cells = 2 ** (oct + 2)
        grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        g00 = grid[np.ix_(y0, x0)]
        g01 = grid[np.ix_(y0, x0 + 1)]
        g10 = grid[np.ix_(y0 + 1, x0)]
        g11 = grid[np.ix_(y0 + 1, x0 + 1)]
        layer = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
                 + g10 * fy * (1 - fx) + g11 * fy * fx)
        out += amp * layer
        total += amp
        amp *= 0.5
    return out / total


def generate_scene(seed: int, config: SceneConfig) -> RgbdSample:
    """Fully deterministic in (seed, config)."""
    rng = np.random.default_rng(seed)
    h, w = config.image_size
    near, far = config.near, config.far
    span = far - near

    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    # Background: linear gradient along a random direction covering [near, far].
    theta = rng.uniform(0, 2 * np.pi)
    s = xx * np.cos(theta) + yy * np.sin(theta)
    s = (s - s.min()) / max(s.max() - s.min(), 1e-12)
    depth = near + span * s
    region = np.zeros((h, w), dtype=np.int32)  # 0 = background

    n_prims = int(rng.integers(config.n_primitives[0], config.n_primitives[1] + 1))
    for i in range(n_prims):
        kind = config.primitive_kinds[int(rng.integers(len(config.primitive_kinds)))]
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        if kind == "ellipsoid":
            rx, ry = rng.uniform(0.08, 0.3, size=2)
            apex = rng.uniform(near, near + 0.7 * span)
            thickness = rng.uniform(0.05, 0.3) * span
            q = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
            inside = q < 1.0
            prim = np.full((h, w), np.inf)
            prim[inside] = apex + thickness * (1.0 - np.sqrt(1.0 - q[inside]))
        elif kind == "slab":
            sx, sy = rng.uniform(0.08, 0.35, size=2)
            level = rng.uniform(near, near + 0.8 * span)
            inside = (np.abs(xx - cx) < sx) & (np.abs(yy - cy) < sy)
            prim = np.where(inside, level, np.inf)
        else:
            raise ValueError(f"unknown primitive kind: {kind}")
        closer = prim < depth
        depth = np.where(closer, prim, depth)
        region = np.where(closer, i + 1, region)

    depth = np.clip(depth, near, far)

    # Shading from depth-map normals; random light keeps the RGB-depth link varied.
    scale = 8.0 / span  # depth-to-pixel gradient scaling so normals stay informative
    gy, gx = np.gradient(depth * scale)
    light = rng.uniform(-0.5, 0.5, size=2)
    lz = 1.0
    norm = np.sqrt(gx**2 + gy**2 + 1.0) * np.sqrt(light[0] ** 2 + light[1] ** 2 + lz**2)
    shade = np.clip((-gx * light[0] - gy * light[1] + lz) / norm, 0.0, 1.0)

    albedos = rng.uniform(0.15, 0.95, size=(n_prims + 1, 3))
    noise = _value_noise(rng, h, w, config.texture_octaves)
    rgb = np.empty((h, w, 3))
    for c in range(3):
        base = albedos[region, c]
        rgb[..., c] = base * (0.35 + 0.65 * shade) + 0.08 * noise
    rgb = np.clip(rgb, 0.0, 1.0)

    return RgbdSample(
        id=f"scene_{seed}",
        rgb=RgbImage(values=rgb.astype(np.float32)),
        depth=DepthMap.dense(depth.astype(np.float32)),
        meta={"seed": int(seed), "config_hash": config_hash(config.to_dict()),
              "region": region, "n_primitives": n_prims},
    )


def generate_dataset(n: int, seed: int, config: SceneConfig, out_dir) -> DatasetManifest:
    """Write n scenes plus a manifest with a 90/5/5 split by index.

    Per-sample seed is seed + i, so regeneration and parallel generation
    are order-independent.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rgb").mkdir(exist_ok=True)
    (out_dir / "depth").mkdir(exist_ok=True)

    n_train = int(n * 0.9)
    n_val = int(n * 0.05)

    entries = []
    for i in range(n):
        sid = f"scene_{i:06d}"
        try:
            sample = generate_scene(seed + i, config)
        except Exception as e:
            raise RuntimeError(f"scene generation failed at sample {i}") from e
        rgb_rel = f"rgb/{sid}.png"
        depth_rel = f"depth/{sid}.pfm"
        try:
            write_rgb(sample.rgb, out_dir / rgb_rel)
            write_depth(sample.depth, out_dir / depth_rel, format="pfm")
        except OSError as e:
            raise OSError(f"failed writing sample {i} ({sid}): {e}") from e
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        entries.append(ManifestEntry(id=sid, rgb_path=rgb_rel, depth_path=depth_rel, split=split))

    manifest = DatasetManifest(
        version=1, samples=entries, config_hash=config_hash(config.to_dict()), root=out_dir
    )
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "scene_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return manifest
