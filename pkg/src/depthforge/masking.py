"""Mask-generation strategies for training and evaluation.

Shape masks (strokes, circles, squares and combinations), sparse point
masks where only a small fraction of pixels stays known, and blob masks
made from thresholded smooth noise as an object-segmentation stand-in.
All masks are pure functions of (spec, size).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import InpaintMask


class DegenerateMaskError(Exception):
    """Requested sparse mask would have zero known pixels."""


KINDS = ("stroke", "circle", "square", "combo", "sparse", "blob")

# Training-time mixture over strategies; the paper only says "randomly
# select", so the weights are an artifact choice kept configurable here.
KIND_PROBS = {
    "stroke": 0.20,
    "circle": 0.15,
    "square": 0.15,
    "combo": 0.20,
    "sparse": 0.15,
    "blob": 0.15,
}

SPARSE_KNOWN_RANGE = (0.001, 0.02)  # 0.1-2% of points set as known


@dataclass
class MaskSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind: {self.kind}")
        if self.kind == "sparse":
            r = self.params.get("known_ratio")
            if r is None or not (0 < r <= 0.5):
                raise ValueError(f"sparse known_ratio must be in (0, 0.5], got {r}")
        for key in ("count",):
            if key in self.params and self.params[key] < 1:
                raise ValueError(f"{self.kind}.{key} must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(kind=d["kind"], params=d.get("params", {}), seed=d.get("seed", 0))


def make_mask(spec: MaskSpec, size: tuple[int, int]) -> InpaintMask:
    """Deterministic in (spec, size); 1 marks the region to inpaint."""
    h, w = size
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "sparse":
        n_known = int(np.rint(spec.params["known_ratio"] * h * w))
        if n_known == 0:
            raise DegenerateMaskError(f"known_ratio {spec.params['known_ratio']} rounds to 0 known pixels")
        mask = np.ones(h * w, dtype=np.uint8)
        known_idx = rng.choice(h * w, size=n_known, replace=False)
        mask[known_idx] = 0
        return InpaintMask(mask.reshape(h, w))
    if spec.kind == "combo":
        out = np.zeros((h, w), dtype=np.uint8)
        for comp in spec.params["components"]:
            sub = comp if isinstance(comp, MaskSpec) else MaskSpec.from_dict(comp)
            out |= make_mask(sub, size).values
        return InpaintMask(out)
    if spec.kind == "stroke":
        return InpaintMask(_strokes(rng, h, w, spec.params))
    if spec.kind == "circle":
        return InpaintMask(_circles(rng, h, w, spec.params))
    if spec.kind == "square":
        return InpaintMask(_squares(rng, h, w, spec.params))
    if spec.kind == "blob":
        return InpaintMask(_blobs(rng, h, w, spec.params))
    raise ValueError(f"unknown mask kind: {spec.kind}")


def _disc_stamp(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = mask.shape
    y0, y1 = max(0, int(cy - radius) - 1), min(h, int(cy + radius) + 2)
    x0, x1 = max(0, int(cx - radius) - 1), min(w, int(cx + radius) + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.uint8)


def _strokes(rng, h, w, params) -> np.ndarray:
    count = params.get("count", 2)
    w_lo, w_hi = params.get("width", (2.0, 6.0))
    waviness = params.get("waviness", 0.35)
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(count):
        y, x = rng.uniform(0, h), rng.uniform(0, w)
        heading = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(w_lo, w_hi) / 2.0
        steps = int(rng.uniform(0.5, 1.5) * min(h, w))
        for _ in range(steps):
            _disc_stamp(mask, y, x, radius)
            heading += rng.normal(0.0, waviness)
            y += np.sin(heading)
            x += np.cos(heading)
            y = float(np.clip(y, 0, h - 1))
            x = float(np.clip(x, 0, w - 1))
    return mask


def _circles(rng, h, w, params) -> np.ndarray:
    count = params.get("count", 2)
    r_lo, r_hi = params.get("radius", (0.06 * min(h, w), 0.25 * min(h, w)))
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        _disc_stamp(mask, cy, cx, rng.uniform(r_lo, r_hi))
    return mask


def _squares(rng, h, w, params) -> np.ndarray:
    count = params.get("count", 2)
    s_lo, s_hi = params.get("side", (0.1 * min(h, w), 0.4 * min(h, w)))
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(count):
        side = rng.uniform(s_lo, s_hi)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        y0, y1 = int(max(0, cy - side / 2)), int(min(h, cy + side / 2))
        x0, x1 = int(max(0, cx - side / 2)), int(min(w, cx + side / 2))
        mask[y0:y1, x0:x1] = 1
    return mask


def _blobs(rng, h, w, params) -> np.ndarray:
    count = params.get("count", 1)
    smoothness = params.get("smoothness", 6.0)
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(count):
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=smoothness)
        coverage = rng.uniform(0.1, 0.3)
        thresh = np.quantile(noise, 1.0 - coverage)
        mask |= (noise > thresh).astype(np.uint8)
    return mask


def sample_training_mask(rng: np.random.Generator, size: tuple[int, int]) -> tuple[InpaintMask, MaskSpec]:
    """Draw a random strategy and its parameters; the returned spec replays
    the identical mask through make_mask."""
    h, w = size
    kinds = list(KIND_PROBS)
    kind = kinds[rng.choice(len(kinds), p=[KIND_PROBS[k] for k in kinds])]
    seed = int(rng.integers(0, 2**63 - 1))
    m = min(h, w)

    if kind == "sparse":
        # lower bound never rounds to zero known pixels on tiny grids
        lo = max(SPARSE_KNOWN_RANGE[0], 0.5 / (h * w) + 1e-9)
        params = {"known_ratio": float(rng.uniform(lo, SPARSE_KNOWN_RANGE[1]))}
    elif kind == "stroke":
        params = {"count": int(rng.integers(1, 4)), "width": (2.0, max(2.5, 0.1 * m)), "waviness": 0.35}
    elif kind == "circle":
        params = {"count": int(rng.integers(1, 5)), "radius": (0.06 * m, 0.25 * m)}
    elif kind == "square":
        params = {"count": int(rng.integers(1, 5)), "side": (0.1 * m, 0.4 * m)}
    elif kind == "blob":
        params = {"count": int(rng.integers(1, 3)), "smoothness": float(rng.uniform(4.0, 10.0))}
    else:  # combo of 2-3 shape strategies
        n_comp = int(rng.integers(2, 4))
        shape_kinds = ("stroke", "circle", "square")
        components = []
        for _ in range(n_comp):
            ck = shape_kinds[int(rng.integers(3))]
            cseed = int(rng.integers(0, 2**63 - 1))
            if ck == "stroke":
                cp = {"count": 1, "width": (2.0, max(2.5, 0.1 * m)), "waviness": 0.35}
            elif ck == "circle":
                cp = {"count": 1, "radius": (0.06 * m, 0.25 * m)}
            else:
                cp = {"count": 1, "side": (0.1 * m, 0.4 * m)}
            components.append(MaskSpec(kind=ck, params=cp, seed=cseed).to_dict())
        params = {"components": components}

    spec = MaskSpec(kind=kind, params=params, seed=seed)
    return make_mask(spec, size), spec


def mask_stats(mask: InpaintMask) -> tuple[float, int, int]:
    """(unknown_ratio, 4-connected components of the 1-region, 0/1 boundary
    pair count over 4-neighborhoods)."""
    m = mask.values
    unknown_ratio = float(m.mean()) if m.size else 0.0
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    _, n_components = ndimage.label(m, structure=structure)
    boundary = int(np.sum(m[:, 1:] != m[:, :-1])) + int(np.sum(m[1:, :] != m[:-1, :]))
    return unknown_ratio, int(n_components), boundary
