"""Affine-invariant depth normalization with a compression factor, its exact
inverse, and nearest-neighbor densification of sparse known depth.

Normalization maps the known-region extrema to [-beta, +beta]:

    normed = ((d - d_min) / (d_max - d_min) - 0.5) * 2 * beta

Values outside the known region may land outside [-beta, beta] by design;
nothing is clamped here (clamping happens only at VAE-encode time).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


class NoKnownDepthError(Exception):
    """An operation requiring known depth pixels received none."""


BETA_RANGE = (0.2, 1.0)


@dataclass
class NormParams:
    d_min: float
    d_max: float
    beta: float
    degenerate: bool = False

    def __post_init__(self):
        if self.d_min > self.d_max:
            raise ValueError(f"d_min {self.d_min} > d_max {self.d_max}")
        if not BETA_RANGE[0] <= self.beta <= BETA_RANGE[1]:
            raise ValueError(f"beta {self.beta} outside {BETA_RANGE}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(**d)


def normalize(values: np.ndarray, known: np.ndarray, beta: float) -> tuple[np.ndarray, NormParams]:
    """Normalize depth using extrema of the known region only.

    `known` marks pixels whose depth is trusted (mask==0 and valid). The
    formula is applied to every pixel, so values outside the known region
    may exceed [-beta, beta]. A constant known region is the degenerate
    case and maps to all zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    known = np.asarray(known, dtype=bool)
    if known.shape != values.shape:
        raise ValueError(f"known shape {known.shape} != values shape {values.shape}")
    if not known.any():
        raise NoKnownDepthError("empty known region")

    d_min = float(values[known].min())
    d_max = float(values[known].max())
    if d_min == d_max:
        params = NormParams(d_min=d_min, d_max=d_max, beta=beta, degenerate=True)
        return np.zeros_like(values), params

    params = NormParams(d_min=d_min, d_max=d_max, beta=beta)
    normed = ((values - d_min) / (d_max - d_min) - 0.5) * 2.0 * beta
    return normed, params


def denormalize(normed: np.ndarray, params: NormParams) -> np.ndarray:
    """Exact algebraic inverse; affine, so it extrapolates without clamping."""
    normed = np.asarray(normed, dtype=np.float64)
    if params.degenerate:
        return np.full_like(normed, params.d_min)
    return (normed / (2.0 * params.beta) + 0.5) * (params.d_max - params.d_min) + params.d_min


def densify_nearest(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill every pixel with its nearest known pixel's value (Euclidean
    pixel distance, ties broken by smallest row-major index).

    Exact chunked argmin over known pixels rather than a distance
    transform: distance-transform tie-breaking is implementation-defined,
    and replay determinism requires the stated tie rule.
    """
    values = np.asarray(values)
    known = np.asarray(known, dtype=bool)
    if known.shape != values.shape:
        raise ValueError(f"known shape {known.shape} != values shape {values.shape}")
    if not known.any():
        raise NoKnownDepthError("no known pixels to densify from")
    if known.all():
        return values.copy()

    h, w = values.shape
    flat_idx = np.flatnonzero(known)  # row-major order: argmin tie -> smallest index
    kr = (flat_idx // w).astype(np.int64)
    kc = (flat_idx % w).astype(np.int64)
    kv = values.reshape(-1)[flat_idx]

    out = np.empty_like(values)
    rows = np.arange(h, dtype=np.int64)
    cols = np.arange(w, dtype=np.int64)
    # Process rows in blocks to bound the (pixels x known) distance matrix.
    block = max(1, int(2_000_000 / max(len(flat_idx), 1) / w) + 1)
    for r0 in range(0, h, block):
        r1 = min(h, r0 + block)
        dr2 = (rows[r0:r1, None] - kr[None, :]) ** 2            # (rb, K)
        dc2 = (cols[:, None] - kc[None, :]) ** 2                # (W, K)
        d2 = dr2[:, None, :] + dc2[None, :, :]                  # (rb, W, K)
        nearest = np.argmin(d2, axis=2)
        out[r0:r1] = kv[nearest]
    return out


def sample_beta(rng: np.random.Generator, mode: str = "train") -> float:
    """Training draws the compression factor uniformly from [0.2, 1.0];
    evaluation always uses 1.0."""
    if mode == "train":
        return float(rng.uniform(*BETA_RANGE))
    if mode == "eval":
        return 1.0
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
