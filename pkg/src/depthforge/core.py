"""Domain data types, depth/RGB file I/O, dataset manifests, and validation.

Depth maps are stored either as PFM (lossless float32) or 16-bit grayscale
PNG with a meters-per-unit scale. Invalid pixels are NaN in PFM and 0 in
PNG. A dataset is described by a JSON manifest listing per-sample file
paths and split assignments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ParseError(Exception):
    """File content does not match the declared format."""


class DimensionError(Exception):
    """Spatial dimensions violate the latent-downsampling requirement."""


class RangeError(Exception):
    """Depth value not representable in the target encoding."""


MIN_SIDE = 16
DOWNSAMPLE = 8  # latent grid is H/8 x W/8


@dataclass
class DepthMap:
    """2D grid of metric depths with a per-pixel validity mask."""

    values: np.ndarray  # (H, W) float32, meters
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError(f"values/valid shape mismatch: {self.values.shape} vs {self.valid.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def dense(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values=values, valid=np.ones(values.shape, dtype=bool))


@dataclass
class RgbImage:
    """H x W x 3 float image with entries in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass
class InpaintMask:
    """Binary grid; 1 = unknown region to inpaint, 0 = known."""

    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise ValueError(f"expected 2D mask, got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def unknown(self) -> np.ndarray:
        return self.values.astype(bool)

    @property
    def known(self) -> np.ndarray:
        return ~self.values.astype(bool)


@dataclass
class RgbdSample:
    id: str
    rgb: RgbImage
    depth: DepthMap
    mask: InpaintMask | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class ManifestEntry:
    id: str
    rgb_path: str
    depth_path: str
    split: str  # train | val | test


@dataclass
class DatasetManifest:
    version: int
    samples: list[ManifestEntry]
    config_hash: str
    png_scale: float = 0.001  # meters per stored unit, for png16 depth files
    root: Path | None = None  # set on load/generate; not serialized

    def split(self, name: str) -> list[ManifestEntry]:
        return [s for s in self.samples if s.split == name]

    def load_sample(self, entry: ManifestEntry) -> RgbdSample:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk first")
        fmt = "pfm" if entry.depth_path.endswith(".pfm") else "png16"
        return RgbdSample(
            id=entry.id,
            rgb=read_rgb(self.root / entry.rgb_path),
            depth=read_depth(self.root / entry.depth_path, format=fmt, png_scale=self.png_scale),
        )

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "config_hash": self.config_hash,
            "png_scale": self.png_scale,
            "samples": [
                {"id": s.id, "rgb": s.rgb_path, "depth": s.depth_path, "split": s.split}
                for s in self.samples
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def config_hash(obj) -> str:
    """Stable hash of any JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json())


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    samples = [
        ManifestEntry(id=s["id"], rgb_path=s["rgb"], depth_path=s["depth"], split=s["split"])
        for s in doc["samples"]
    ]
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ParseError("manifest contains duplicate sample ids")
    if check_files:
        root = path.parent
        for s in samples:
            for p in (s.rgb_path, s.depth_path):
                if not (root / p).exists():
                    raise FileNotFoundError(f"manifest references missing file: {p}")
    return DatasetManifest(
        version=doc["version"],
        samples=samples,
        config_hash=doc["config_hash"],
        png_scale=doc.get("png_scale", 0.001),
        root=path.parent,
    )


# ---------------------------------------------------------------------------
# Depth file I/O
# ---------------------------------------------------------------------------

def _check_dims(h: int, w: int) -> None:
    if h < MIN_SIDE or w < MIN_SIDE or h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionError(f"depth dims {h}x{w} must be >= {MIN_SIDE} and divisible by {DOWNSAMPLE}")


def read_depth(path, format: str = "pfm", png_scale: float = 0.001) -> DepthMap:
    """Read a depth map from disk.

    png16 values are stored_uint16 * png_scale meters with 0 meaning invalid;
    PFM stores raw float32 with NaN/non-positive meaning invalid.
    """
    path = Path(path)
    if format == "pfm":
        values = _read_pfm(path)
    elif format == "png16":
        img = Image.open(path)
        stored = np.asarray(img)
        if stored.ndim != 2:
            raise ParseError(f"expected single-channel png16, got shape {stored.shape}")
        values = (stored.astype(np.float64) * png_scale).astype(np.float32)
        values[stored == 0] = np.nan
    else:
        raise ValueError(f"unknown depth format: {format}")

    _check_dims(*values.shape)
    valid = np.isfinite(values) & (values > 0)
    values = values.copy()
    values[~valid] = 0.0
    return DepthMap(values=values, valid=valid)


def write_depth(depth: DepthMap, path, format: str = "pfm", png_scale: float = 0.001) -> None:
    """Write a depth map; invalid pixels become NaN (pfm) or 0 (png16)."""
    path = Path(path)
    if format == "pfm":
        values = depth.values.astype(np.float32).copy()
        values[~depth.valid] = np.nan
        _write_pfm(path, values)
    elif format == "png16":
        stored = np.rint(depth.values.astype(np.float64) / png_scale)
        stored[~depth.valid] = 0
        if np.any(stored > 65535):
            raise RangeError(f"depth {depth.values.max():.3f} m exceeds png16 range at scale {png_scale}")
        Image.fromarray(stored.astype(np.uint16)).save(path)
    else:
        raise ValueError(f"unknown depth format: {format}")


def _read_pfm(path: Path) -> np.ndarray:
    """Parse a grayscale PFM: 'Pf', dims, signed scale (sign = endianness),
    rows stored bottom-to-top."""
    data = path.read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise ParseError("truncated PFM header")
    header, dims, scale_line, payload = parts
    if header == b"PF":
        raise ParseError("color PFM ('PF') not supported; expected grayscale 'Pf'")
    if header != b"Pf":
        raise ParseError(f"not a PFM file (header {header!r})")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError as e:
        raise ParseError(f"malformed PFM header: {e}") from e
    if scale == 0:
        raise ParseError("PFM scale must be nonzero")
    endian = "<" if scale < 0 else ">"
    n = w * h
    if len(payload) < 4 * n:
        raise ParseError(f"PFM payload too short: {len(payload)} bytes for {n} pixels")
    values = np.frombuffer(payload[: 4 * n], dtype=np.dtype(endian + "f4")).reshape(h, w)
    return values[::-1].astype(np.float32)  # bottom-to-top storage


def _write_pfm(path: Path, values: np.ndarray) -> None:
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode()
    payload = values[::-1].astype("<f4").tobytes()
    path.write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_sample(sample: RgbdSample) -> list[str]:
    """Check all type invariants; returns one violation string per broken rule."""
    violations = []
    h, w = sample.depth.shape

    if h < MIN_SIDE or w < MIN_SIDE:
        violations.append(f"depth.dims: {h}x{w} below minimum {MIN_SIDE}")
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        violations.append(f"depth.dims: {h}x{w} not divisible by {DOWNSAMPLE}")

    vals = sample.depth.values[sample.depth.valid]
    if vals.size and not np.all(np.isfinite(vals)):
        violations.append("depth.values: non-finite value at a valid pixel")
    if vals.size and np.any(vals <= 0):
        violations.append("depth.values: non-positive depth at a valid pixel")

    if sample.rgb.shape != (h, w):
        violations.append(f"rgb.dims: {sample.rgb.shape} does not match depth {h}x{w}")
    if np.any(sample.rgb.values < 0) or np.any(sample.rgb.values > 1):
        violations.append("rgb.values: entries outside [0, 1]")

    if sample.mask is not None:
        if sample.mask.shape != (h, w):
            violations.append(f"mask.dims: {sample.mask.shape} does not match depth {h}x{w}")
        if not np.all(np.isin(sample.mask.values, (0, 1))):
            violations.append("mask.values: entries outside {0, 1}")
        elif np.all(sample.mask.values == 1) and not sample.meta.get("fully_unknown", False):
            violations.append("mask.values: no known pixel and not flagged fully_unknown")

    return violations


def write_mask(mask: InpaintMask, path) -> None:
    """Masks serialize as 8-bit PNG with 0/255 levels."""
    Image.fromarray((mask.values * 255).astype(np.uint8)).save(path)


def read_mask(path) -> InpaintMask:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ParseError(f"expected single-channel mask PNG, got shape {arr.shape}")
    return InpaintMask(values=(arr > 127).astype(np.uint8))


def write_rgb(rgb: RgbImage, path) -> None:
    Image.fromarray(np.rint(rgb.values * 255).astype(np.uint8)).save(path)


def read_rgb(path) -> RgbImage:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return RgbImage(values=arr.astype(np.float32) / 255.0)
