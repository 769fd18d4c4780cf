"""Metrics, the least-squares alignment baseline, boundary-consistency
measurement, the benchmark harness, known-ratio sweeps, and report/plot
emission.

All metrics are restricted to the evaluated region (typically the masked
pixels), so compositing known depth into predictions never affects scores.
The boundary metric quantifies the excess depth discontinuity across the
mask boundary relative to ground truth; ground truth has edges of its own,
so raw jumps would penalize correct predictions.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DatasetManifest, DepthMap, InpaintMask
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .masking import MaskSpec, make_mask

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class EmptyRegionError(Exception):
    """No pixels (or boundary pairs) to evaluate."""


class DegenerateFitError(Exception):
    """Least-squares alignment has no unique solution."""


def compute_metrics(pred: np.ndarray, gt: DepthMap, region: np.ndarray) -> tuple[float, float, float]:
    """(AbsRel, delta1, RMSE) over region & valid pixels.

    delta1 uses strict max(pred/gt, gt/pred) < 1.25; non-positive
    predictions fail delta1 outright but still count toward AbsRel/RMSE.
    """
    region = np.asarray(region, dtype=bool) & gt.valid
    if not region.any():
        raise EmptyRegionError("no valid pixels in evaluated region")
    p = np.asarray(pred, dtype=np.float64)[region]
    g = gt.values.astype(np.float64)[region]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on evaluated pixels")

    absrel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))

    positive = p > 0
    n_bad = int((~positive).sum())
    if n_bad:
        logger.warning("%d non-positive predictions in evaluated region", n_bad)
    ratio = np.zeros_like(p)
    ratio[positive] = np.maximum(p[positive] / g[positive], g[positive] / p[positive])
    delta1 = float(np.mean(positive & (ratio < 1.25)))
    return absrel, delta1, rmse


def align_lstsq(pred: np.ndarray, gt: DepthMap, known: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Scale/shift minimizing sum over known pixels of (s*pred + t - gt)^2
    via the closed-form normal equations; returns (s, t, aligned pred)."""
    known = np.asarray(known, dtype=bool) & gt.valid
    p = np.asarray(pred, dtype=np.float64)[known]
    g = gt.values.astype(np.float64)[known]
    if p.size < 2:
        raise DegenerateFitError(f"need >= 2 known pixels, got {p.size}")
    var = np.mean(p**2) - np.mean(p) ** 2
    if var < 1e-14 * max(1.0, np.mean(p**2)):
        raise DegenerateFitError("prediction is constant on the known region")
    s = (np.mean(p * g) - np.mean(p) * np.mean(g)) / var
    t = np.mean(g) - s * np.mean(p)
    return float(s), float(t), s * np.asarray(pred, dtype=np.float64) + t


def boundary_consistency(pred: np.ndarray, gt: DepthMap, mask: InpaintMask) -> float:
    """Mean over 4-neighbor pairs straddling the mask boundary of
    | |pred(p)-pred(q)| - |gt(p)-gt(q)| | in meters."""
    pred = np.asarray(pred, dtype=np.float64)
    gvals = gt.values.astype(np.float64)
    m = mask.values
    diffs = []
    for axis in (0, 1):
        a = tuple(slice(1, None) if ax == axis else slice(None) for ax in (0, 1))
        b = tuple(slice(None, -1) if ax == axis else slice(None) for ax in (0, 1))
        straddle = (m[a] != m[b]) & gt.valid[a] & gt.valid[b]
        if straddle.any():
            dp = np.abs(pred[a] - pred[b])[straddle]
            dg = np.abs(gvals[a] - gvals[b])[straddle]
            diffs.append(np.abs(dp - dg))
    if not diffs:
        raise EmptyRegionError("mask has no boundary pairs")
    return float(np.mean(np.concatenate(diffs)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    schema_version: int
    run_config: dict
    records: list[dict]
    aggregates: dict = field(default_factory=dict)
    timestamp: str = ""

    def __post_init__(self):
        ok = [r for r in self.records if "error" not in r]
        if ok:
            self.aggregates = {
                key: float(np.mean([r[key] for r in ok]))
                for key in ("absrel", "delta1", "rmse", "boundary")
                if all(key in r for r in ok)
            }
            self.aggregates["n_ok"] = len(ok)
        self.aggregates["n_failed"] = len(self.records) - len(ok)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version,
            "run_config": self.run_config,
            "aggregates": self.aggregates,
            "records": self.records,
            "timestamp": self.timestamp,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(schema_version=doc["schema_version"], run_config=doc["run_config"],
                   records=doc["records"], timestamp=doc.get("timestamp", ""))


CSV_FIELDS = ["sample_id", "mask_kind", "mask_seed", "unknown_ratio",
              "absrel", "delta1", "rmse", "boundary", "error"]


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in report.records:
            row = dict(r)
            for key in ("absrel", "delta1", "rmse", "boundary", "unknown_ratio"):
                if key in row and isinstance(row[key], float):
                    row[key] = f"{row[key]:.10g}"
            writer.writerow(row)


def derive_seed(base_seed: int, sample_id: str) -> int:
    """Per-sample seed, stable across runs and independent of eval order."""
    return (base_seed * 1_000_003 + zlib.crc32(sample_id.encode())) % (2**31 - 1)


def _specialize_spec(spec: MaskSpec, sample_id: str) -> MaskSpec:
    new = MaskSpec.from_dict(spec.to_dict())
    new.seed = derive_seed(spec.seed, sample_id)
    if new.kind == "combo":
        for k, comp in enumerate(new.params["components"]):
            comp["seed"] = derive_seed(comp.get("seed", 0) + k + 1, sample_id)
    return new


def run_sampler(rgb, depth, mask, model, vae, cfg: SamplerConfig,
                schedule: NoiseSchedule | None = None):
    """Dispatch on the sampler configuration (blend > guidance > vanilla)."""
    from .diffusion import blended_sample, guided_sample

    if cfg.blend:
        return blended_sample(rgb, depth, mask, model, vae, cfg, schedule)
    if cfg.guidance_weight > 0:
        return guided_sample(rgb, depth, mask, model, vae, cfg, schedule)
    return sample(rgb, depth, mask, model, vae, cfg, schedule)


def benchmark(model, vae, manifest: DatasetManifest, split: str,
              mask_suite: list[MaskSpec], sampler: SamplerConfig, out_dir,
              schedule: NoiseSchedule | None = None, limit: int | None = None,
              external_pred_fn=None, jobs: int = 1) -> EvalReport:
    """Evaluate the sampler over (sample x mask spec) pairs; failures are
    recorded per-sample and do not abort the run.

    external_pred_fn, when given, maps an RgbdSample to a dense depth grid;
    it is aligned to the known region by least squares and scored on the
    masked region as the monocular-plus-alignment baseline.
    """
    from concurrent.futures import ThreadPoolExecutor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest.split(split)
    if limit is not None:
        entries = entries[:limit]

    def eval_one(args):
        entry, spec = args
        spec_i = _specialize_spec(spec, entry.id)
        record = {"sample_id": entry.id, "mask_kind": spec_i.kind, "mask_seed": spec_i.seed,
                  "mask_spec": spec_i.to_dict()}
        try:
            s = manifest.load_sample(entry)
            mask = make_mask(spec_i, s.depth.shape)
            region = mask.unknown & s.depth.valid
            if not region.any() or region.all():
                raise EmptyRegionError(f"mask leaves no evaluable split for {entry.id}")
            cfg_i = dataclasses.replace(sampler, seed=derive_seed(sampler.seed, entry.id))
            pred, _ = run_sampler(s.rgb, s.depth, mask, model, vae, cfg_i, schedule)
            absrel, delta1, rmse = compute_metrics(pred.values, s.depth, region)
            record.update(unknown_ratio=float(mask.values.mean()), absrel=absrel,
                          delta1=delta1, rmse=rmse,
                          boundary=boundary_consistency(pred.values, s.depth, mask))
            if external_pred_fn is not None:
                ext = np.asarray(external_pred_fn(s), dtype=np.float64)
                try:
                    s_fit, t_fit, aligned = align_lstsq(ext, s.depth, mask.known)
                    b_absrel, b_delta1, b_rmse = compute_metrics(aligned, s.depth, region)
                    record.update(baseline_absrel=b_absrel, baseline_delta1=b_delta1,
                                  baseline_rmse=b_rmse, baseline_scale=s_fit, baseline_shift=t_fit,
                                  baseline_boundary=boundary_consistency(aligned, s.depth, mask))
                except DegenerateFitError as e:
                    record["baseline_error"] = str(e)
        except Exception as e:  # per-sample failures are data, not fatal
            logger.warning("sample %s failed: %s", entry.id, e)
            record["error"] = f"{type(e).__name__}: {e}"
        return record

    work = [(entry, spec) for entry in entries for spec in mask_suite]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(eval_one, work))
    else:
        records = [eval_one(w) for w in work]
    records.sort(key=lambda r: (r["sample_id"], r["mask_kind"], r["mask_seed"]))

    report = EvalReport(
        schema_version=REPORT_SCHEMA_VERSION,
        run_config={"sampler": sampler.to_dict(), "split": split,
                    "mask_suite": [s.to_dict() for s in mask_suite],
                    "dataset_hash": manifest.config_hash,
                    "n_samples": len(entries)},
        records=records,
    )
    (out_dir / "report.json").write_text(report.to_json())
    write_report_csv(report, out_dir / "report.csv")
    try:
        render_report_plots(report, out_dir)
    except Exception as e:
        logger.warning("plot rendering failed: %s", e)
    return report


def known_ratio_sweep(model, vae, manifest: DatasetManifest, split: str,
                      ratios: list[float], sampler: SamplerConfig, out_dir,
                      schedule: NoiseSchedule | None = None,
                      limit: int | None = None) -> list[dict]:
    """Sparse-mask benchmark at each known ratio; returns one row per ratio
    with mean AbsRel and delta1, plus CSV and plot artifacts."""
    for r in ratios:
        if not 0 < r <= 0.5:
            raise ValueError(f"known ratio {r} outside (0, 0.5]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ratio in ratios:
        spec = MaskSpec(kind="sparse", params={"known_ratio": float(ratio)}, seed=sampler.seed)
        report = benchmark(model, vae, manifest, split, [spec], sampler,
                           out_dir / f"ratio_{ratio:g}", schedule=schedule, limit=limit)
        rows.append({
            "known_ratio": ratio,
            "absrel": report.aggregates.get("absrel", float("nan")),
            "delta1": report.aggregates.get("delta1", float("nan")),
            "n_ok": report.aggregates.get("n_ok", 0),
        })

    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["known_ratio", "absrel", "delta1", "n_ok"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    try:
        render_sweep_plot(rows, out_dir / "sweep.png")
    except Exception as e:
        logger.warning("sweep plot failed: %s", e)
    return rows


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_report_plots(report: EvalReport, out_dir) -> list[Path]:
    plt = _plt()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in report.records if "error" not in r]
    paths = []
    if not ok:
        return paths

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key in zip(axes, ("absrel", "delta1", "boundary")):
        ax.hist([r[key] for r in ok], bins=20, color="#4878cf")
        ax.set_title(key)
    fig.tight_layout()
    p = out_dir / "metric_distributions.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    paths.append(p)

    kinds = sorted({r["mask_kind"] for r in ok})
    means = [np.mean([r["absrel"] for r in ok if r["mask_kind"] == k]) for k in kinds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(kinds, means, color="#6acc65")
    ax.set_ylabel("mean AbsRel")
    ax.set_title("AbsRel by mask kind")
    fig.tight_layout()
    p = out_dir / "absrel_by_mask_kind.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    paths.append(p)
    return paths


def render_sweep_plot(rows: list[dict], path) -> None:
    plt = _plt()
    ratios = [r["known_ratio"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.plot(ratios, [r["absrel"] for r in rows], "o-", color="#d65f5f", label="AbsRel")
    ax1.set_xlabel("known ratio")
    ax1.set_ylabel("AbsRel")
    ax2 = ax1.twinx()
    ax2.plot(ratios, [r["delta1"] for r in rows], "s--", color="#4878cf", label="delta1")
    ax2.set_ylabel("delta1")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
