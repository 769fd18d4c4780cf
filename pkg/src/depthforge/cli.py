"""Command-line surface binding all modules into reproducible runs.

Every artifact-producing command writes a fully-resolved config file next
to its outputs. Configuration comes from an optional JSON file plus
dotted-key=value overrides, e.g.:

    depthforge gen-data --out-dir data --config cfg.json scene.near=2.0

Exit codes: 0 success, 1 usage error, 2 data error, 3 training/sampling
failure, 4 acceptance-threshold violation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import click

from .core import (
    DimensionError,
    ParseError,
    RangeError,
    load_manifest,
    read_depth,
    read_mask,
    read_rgb,
    write_depth,
)
from .depthnorm import NoKnownDepthError
from .diffusion import NoiseSchedule, SamplerConfig, refine as refine_op
from .dualnet import UNetConfig
from .evalbench import (
    EvalReport,
    benchmark,
    known_ratio_sweep,
    render_report_plots,
    run_sampler,
)
from .latentvae import (
    TrainingDivergedError,
    VaeConfig,
    load_vae_checkpoint,
    sparse_retention_report,
    train_vae,
)
from .masking import MaskSpec, make_mask
from .pipeline import TrainConfig, load_model_checkpoint, train
from .synthgen import SceneConfig, generate_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAIN = 3
EXIT_THRESHOLD = 4

DATA_ERRORS = (ParseError, DimensionError, RangeError, FileNotFoundError,
               NoKnownDepthError, KeyError, json.JSONDecodeError)

SECTIONS = {
    "scene": SceneConfig,
    "vae": VaeConfig,
    "train": TrainConfig,
    "unet": UNetConfig,
    "sampler": SamplerConfig,
}


class ThresholdViolation(Exception):
    pass


def cache_dir() -> Path:
    """Checkpoint/cache directory; DEPTHFORGE_CACHE overrides the default."""
    env = os.environ.get("DEPTHFORGE_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "depthforge"


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(config_path: str | None, overrides: tuple[str, ...]) -> dict:
    """Nested config dict from JSON file plus dotted-key=value overrides.

    Unknown section names or dataclass fields are rejected.
    """
    doc: dict = {}
    if config_path:
        doc = json.loads(Path(config_path).read_text())
    for ov in overrides:
        if "=" not in ov:
            raise click.UsageError(f"override {ov!r} is not of the form key=value")
        key, raw = ov.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)

    for section, value in doc.items():
        if section in SECTIONS:
            known = {f.name for f in dataclasses.fields(SECTIONS[section])}
            unknown = set(value) - known - {"seed"}  # seed is meaningful everywhere
            if unknown:
                raise click.UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
        elif section not in ("paths", "eval", "thresholds"):
            raise click.UsageError(f"unknown config section: {section!r}")
    return doc


def section(doc: dict, name: str):
    cls = SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in doc.get(name, {}).items() if k in known}
    return SceneConfig.from_dict(kwargs) if name == "scene" else cls(**kwargs)


def write_resolved_config(doc: dict, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = dict(doc)
    resolved["_command"] = command
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


def _schedule_from(train_cfg: TrainConfig) -> NoiseSchedule:
    return NoiseSchedule(T=train_cfg.schedule_T, beta_start=train_cfg.beta_start,
                         beta_end=train_cfg.beta_end,
                         prediction_type=train_cfg.prediction_type)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON run config.")
@click.option("--seed", type=int, default=None, help="Override every section's seed.")
@click.option("--out-dir", type=click.Path(), default=None, help="Output directory.")
@click.option("--log-level", default="warning",
              type=click.Choice(["debug", "info", "warning", "error"]))
@click.option("--jobs", type=int, default=1, help="Worker parallelism cap.")
@click.pass_context
def cli(ctx, config_path, seed, out_dir, log_level, jobs):
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out_dir"] = out_dir
    ctx.obj["jobs"] = jobs


def _resolve(ctx, overrides, default_out: str) -> tuple[dict, Path]:
    doc = load_run_config(ctx.obj["config_path"], overrides)
    if ctx.obj["seed"] is not None:
        for name in SECTIONS:
            doc.setdefault(name, {})["seed"] = ctx.obj["seed"]
    out_dir = Path(ctx.obj["out_dir"] or doc.get("paths", {}).get("out_dir", default_out))
    return doc, out_dir


@cli.command("gen-data")
@click.option("-n", "--num-samples", type=int, default=2000)
@click.argument("overrides", nargs=-1)
@click.pass_context
def gen_data(ctx, num_samples, overrides):
    """Generate a synthetic RGB-D dataset with manifest."""
    doc, out_dir = _resolve(ctx, overrides, "data")
    scene = section(doc, "scene")
    seed = doc.get("scene", {}).get("seed", ctx.obj["seed"] or 0)
    manifest = generate_dataset(num_samples, seed, scene, out_dir)
    write_resolved_config({**doc, "n": num_samples, "seed": seed}, out_dir, "gen-data")
    click.echo(f"wrote {len(manifest.samples)} samples to {out_dir}")


@cli.command("train-vae")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.argument("overrides", nargs=-1)
@click.pass_context
def train_vae_cmd(ctx, data_dir, overrides):
    """Train the latent VAE on a generated dataset."""
    doc, out_dir = _resolve(ctx, overrides, "runs/vae")
    cfg = section(doc, "vae")
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = train_vae(manifest, cfg, out_dir / "vae.pt")
    write_resolved_config(doc, out_dir, "train-vae")
    click.echo(f"vae checkpoint {ckpt.path} val_rmse {ckpt.val_rmse:.4f}")


@cli.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--resume", "resume_from", type=click.Path(exists=True), default=None)
@click.argument("overrides", nargs=-1)
@click.pass_context
def train_cmd(ctx, data_dir, resume_from, overrides):
    """Train the dual-branch denoiser."""
    doc, out_dir = _resolve(ctx, overrides, "runs/train")
    train_cfg = section(doc, "train")
    train_cfg.out_dir = str(out_dir)
    unet_cfg = section(doc, "unet")
    if not train_cfg.vae_checkpoint:
        train_cfg.vae_checkpoint = str(cache_dir() / "vae.pt")
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    write_resolved_config(doc, out_dir, "train")
    final = train(manifest, train_cfg, unet_cfg, resume_from=resume_from)
    click.echo(f"final checkpoint {final}")


def _load_models(doc: dict):
    paths = doc.get("paths", {})
    vae_path = Path(paths.get("vae_checkpoint", cache_dir() / "vae.pt"))
    model_path = Path(paths.get("model_checkpoint", cache_dir() / "model.pt"))
    vae = load_vae_checkpoint(vae_path).load_model()
    model, _ = load_model_checkpoint(model_path)
    return model, vae


@cli.command("inpaint")
@click.option("--rgb", "rgb_path", required=True, type=click.Path(exists=True))
@click.option("--depth", "depth_path", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--depth-format", default="pfm", type=click.Choice(["pfm", "png16"]))
@click.argument("overrides", nargs=-1)
@click.pass_context
def inpaint(ctx, rgb_path, depth_path, mask_path, out_path, depth_format, overrides):
    """Inpaint a single sample; writes depth plus a NormParams sidecar."""
    doc, _ = _resolve(ctx, overrides, ".")
    sampler = section(doc, "sampler")
    model, vae = _load_models(doc)
    rgb = read_rgb(rgb_path)
    depth = read_depth(depth_path, format=depth_format)
    mask = read_mask(mask_path)
    schedule = _schedule_from(section(doc, "train"))
    pred, params = run_sampler(rgb, depth, mask, model, vae, sampler, schedule)
    write_depth(pred, out_path, format=depth_format)
    Path(str(out_path) + ".norm.json").write_text(json.dumps(params.to_dict(), indent=2))
    write_resolved_config(doc, Path(out_path).parent, "inpaint")
    click.echo(f"wrote {out_path}")


@cli.command("refine")
@click.option("--rgb", "rgb_path", required=True, type=click.Path(exists=True))
@click.option("--depth", "depth_path", required=True, type=click.Path(exists=True))
@click.option("--matched", "matched_path", required=True, type=click.Path(exists=True),
              help="Mask PNG marking trusted pixels as 0 (known).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--strength", type=float, default=0.4)
@click.option("--depth-format", default="pfm", type=click.Choice(["pfm", "png16"]))
@click.argument("overrides", nargs=-1)
@click.pass_context
def refine_cmd(ctx, rgb_path, depth_path, matched_path, out_path, strength, depth_format, overrides):
    """Refine a dense initial depth estimate, trusting matched pixels."""
    doc, _ = _resolve(ctx, overrides, ".")
    sampler = section(doc, "sampler")
    model, vae = _load_models(doc)
    rgb = read_rgb(rgb_path)
    depth = read_depth(depth_path, format=depth_format)
    matched = read_mask(matched_path).known
    schedule = _schedule_from(section(doc, "train"))
    pred, params = refine_op(rgb, depth, matched, strength, model, vae, sampler, schedule)
    write_depth(pred, out_path, format=depth_format)
    Path(str(out_path) + ".norm.json").write_text(json.dumps(params.to_dict(), indent=2))
    write_resolved_config(doc, Path(out_path).parent, "refine")
    click.echo(f"wrote {out_path}")


def _mask_suite_from(doc: dict) -> list[MaskSpec]:
    suite_doc = doc.get("eval", {}).get("mask_suite")
    if suite_doc:
        return [MaskSpec.from_dict(d) for d in suite_doc]
    return [MaskSpec(kind="combo", params={"components": [
        MaskSpec(kind="circle", params={"count": 2, "radius": (4.0, 14.0)}, seed=1).to_dict(),
        MaskSpec(kind="square", params={"count": 1, "side": (8.0, 20.0)}, seed=2).to_dict(),
    ]}, seed=0)]


@cli.command("eval")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test")
@click.option("--limit", type=int, default=None)
@click.argument("overrides", nargs=-1)
@click.pass_context
def eval_cmd(ctx, data_dir, split, limit, overrides):
    """Benchmark the model over a manifest split and a mask suite."""
    doc, out_dir = _resolve(ctx, overrides, "runs/eval")
    sampler = section(doc, "sampler")
    model, vae = _load_models(doc)
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    schedule = _schedule_from(section(doc, "train"))
    report = benchmark(model, vae, manifest, split, _mask_suite_from(doc), sampler,
                       out_dir, schedule=schedule, limit=limit, jobs=ctx.obj["jobs"])
    write_resolved_config(doc, out_dir, "eval")
    click.echo(json.dumps(report.aggregates, indent=2, sort_keys=True))
    thresholds = doc.get("thresholds", {})
    for key, bound in thresholds.items():
        got = report.aggregates.get(key)
        if got is not None and got > bound:
            raise ThresholdViolation(f"{key} {got:.4f} exceeds threshold {bound}")


@cli.command("sweep")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test")
@click.option("--ratios", default="0.02,0.05,0.10,0.30,0.50")
@click.option("--limit", type=int, default=None)
@click.argument("overrides", nargs=-1)
@click.pass_context
def sweep_cmd(ctx, data_dir, split, ratios, limit, overrides):
    """Known-ratio sweep with sparse masks."""
    doc, out_dir = _resolve(ctx, overrides, "runs/sweep")
    sampler = section(doc, "sampler")
    model, vae = _load_models(doc)
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    schedule = _schedule_from(section(doc, "train"))
    ratio_list = [float(r) for r in ratios.split(",")]
    rows = known_ratio_sweep(model, vae, manifest, split, ratio_list, sampler,
                             out_dir, schedule=schedule, limit=limit)
    write_resolved_config(doc, out_dir, "sweep")
    for row in rows:
        click.echo(f"ratio {row['known_ratio']:.2f}: absrel {row['absrel']:.4f} delta1 {row['delta1']:.4f}")


@cli.command("retention")
@click.option("--n-masks", type=int, default=100)
@click.option("--known-ratio", type=float, default=0.005)
@click.option("--size", type=int, default=64)
@click.argument("overrides", nargs=-1)
@click.pass_context
def retention_cmd(ctx, n_masks, known_ratio, size, overrides):
    """Sparse-information retention report for the VAE mask roundtrip."""
    doc, out_dir = _resolve(ctx, overrides, "runs/retention")
    paths = doc.get("paths", {})
    vae = load_vae_checkpoint(Path(paths.get("vae_checkpoint", cache_dir() / "vae.pt"))).load_model()
    masks = [make_mask(MaskSpec("sparse", {"known_ratio": known_ratio}, seed=i), (size, size))
             for i in range(n_masks)]
    report = sparse_retention_report(vae, masks)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "retention.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_resolved_config(doc, out_dir, "retention")
    click.echo(f"vae recall {report['mean_vae_recall']:.3f} "
               f"downsample recall {report['mean_downsample_recall']:.3f}")


@cli.command("report")
@click.option("--from", "report_path", required=True, type=click.Path(exists=True))
@click.argument("overrides", nargs=-1)
@click.pass_context
def report_cmd(ctx, report_path, overrides):
    """Re-render plots and summary from an existing EvalReport JSON."""
    doc, out_dir = _resolve(ctx, overrides, str(Path(report_path).parent))
    report = EvalReport.from_json(Path(report_path).read_text())
    paths = render_report_plots(report, out_dir)
    click.echo(json.dumps(report.aggregates, indent=2, sort_keys=True))
    for p in paths:
        click.echo(f"wrote {p}")


def run_command(argv: list[str]) -> int:
    """CLI entry with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return EXIT_OK
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        if e.ctx is not None:
            click.echo(e.ctx.get_help(), err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ThresholdViolation as e:
        click.echo(f"threshold violation: {e}", err=True)
        return EXIT_THRESHOLD
    except DATA_ERRORS as e:
        click.echo(f"data error: {type(e).__name__}: {e}", err=True)
        return EXIT_DATA
    except (TrainingDivergedError, RuntimeError, ValueError) as e:
        click.echo(f"run failed: {type(e).__name__}: {e}", err=True)
        return EXIT_TRAIN
    except click.exceptions.Abort:
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
