"""Typer CLI: synthesize scenes, train pipelines, sample and complete, evaluate, benchmark."""

import time
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Optional

import typer
import yaml
from pydantic import ValidationError

from adls.bench import ExperimentMatrix, run_benchmark, write_budget_table
from adls.config import CONFIG_FILENAME, RunConfig, apply_overrides, init_config, load_config, parse_crop
from adls.errors import AdlsError, DataError, FormatError
from adls.imaging import load_depth_png, load_scene, read_manifest, save_depth_png, save_scene, write_manifest
from adls.metrics import METRIC_COLUMNS, POOLED_ID, evaluate, evaluate_pooled, write_rows
from adls.models import SamplerKind, SamplingPlan, Scenario, rng_for
from adls.sampling import complete_scene, load_pipeline, save_pipeline, train_pipeline
from adls.synth import RgbMode, SynthSpec, generate_corpus

app = typer.Typer(
    name="adls",
    help="Adaptive depth sampling: phased ensemble-variance sampling with random-forest depth completion.",
    no_args_is_help=True,
)

MANIFEST_NAME = "manifest.tsv"
COMPLETION_FILE = "completion.yaml"

SeedOpt = Annotated[int, typer.Option("--seed", help="Random seed")]
ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="YAML config file")]
ThreadsOpt = Annotated[Optional[int], typer.Option("--threads", help="Trees trained in parallel")]
QuietOpt = Annotated[bool, typer.Option("--quiet", "-q", help="Suppress progress lines")]
ScenarioOpt = Annotated[Optional[Scenario], typer.Option("--scenario", help="rgbd (color + depth) or d (depth only)")]
CropOpt = Annotated[Optional[str], typer.Option("--crop", help="Bottom-center crop, WxH")]


@contextmanager
def _reported_errors() -> Iterator[None]:
    try:
        yield
    except (AdlsError, ValidationError, OSError) as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(code=1) from exc


def _csv_list(text: str, kind: type = int) -> list:
    try:
        return [kind(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise typer.BadParameter(f"bad list {text!r}: {exc}") from exc


def _run_config(path: Path | None, **overrides) -> RunConfig:
    crop = overrides.pop("crop", None)
    return apply_overrides(load_config(path), crop=parse_crop(crop) if crop else None, **overrides)


@app.command()
def synth(
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory")],
    scenes: Annotated[int, typer.Option("--scenes", help="Number of scenes")] = 20,
    width: Annotated[int, typer.Option("--width")] = 160,
    height: Annotated[int, typer.Option("--height")] = 120,
    objects: Annotated[int, typer.Option("--objects", help="Planar objects per scene")] = 8,
    gt_density: Annotated[float, typer.Option("--gt-density", help="Fraction of pixels with ground truth")] = 0.5,
    depth_min: Annotated[float, typer.Option("--depth-min", help="Meters")] = 2.0,
    depth_max: Annotated[float, typer.Option("--depth-max", help="Meters")] = 85.0,
    scenes_per_drive: Annotated[int, typer.Option("--scenes-per-drive", help="Scenes sharing a drive id")] = 5,
    no_rgb: Annotated[bool, typer.Option("--no-rgb", help="Depth only, no color images")] = False,
    seed: SeedOpt = 0,
) -> None:
    """Generate synthetic piecewise-planar scenes as PNGs plus a manifest."""
    with _reported_errors():
        spec = SynthSpec(
            width=width,
            height=height,
            n_objects=objects,
            depth_range=(depth_min, depth_max),
            gt_density=gt_density,
            rgb_mode=RgbMode.NONE if no_rgb else RgbMode.FLAT,
            seed=seed,
            scenes_per_drive=scenes_per_drive,
        )
        out.mkdir(parents=True, exist_ok=True)
        typer.echo(f"[1/2] Generating {scenes} scenes ({width}x{height})...")
        entries = [save_scene(scene, out) for scene in generate_corpus(spec, scenes)]
        manifest = out / MANIFEST_NAME
        write_manifest(entries, manifest)
        typer.echo(f"[2/2] Manifest: {manifest}")


@app.command()
def train(
    manifest: Annotated[Path, typer.Argument(help="Training scenes manifest")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Model directory")],
    sampler: Annotated[SamplerKind, typer.Option("--sampler", help="Sampling strategy")] = SamplerKind.PM,
    budget: Annotated[int, typer.Option("--budget", "-b", help="Samples per scene")] = 256,
    phases: Annotated[Optional[int], typer.Option("--phases", "-k", help="Phases (default 8, 1 for random/grid)")] = None,
    scenario: ScenarioOpt = None,
    trees: Annotated[Optional[int], typer.Option("--trees", help="Trees per phase forest")] = None,
    trees_final: Annotated[Optional[int], typer.Option("--trees-final", help="Trees in the final forest")] = None,
    subsample: Annotated[Optional[int], typer.Option("--subsample", help="Training pixels per scene")] = None,
    sub_phases: Annotated[Optional[int], typer.Option("--sub-phases", help="Variance recalculations per phase")] = None,
    noise_sigma: Annotated[Optional[float], typer.Option("--noise-sigma", help="Measurement noise, meters")] = None,
    crop: CropOpt = None,
    seed: SeedOpt = 0,
    config: ConfigOpt = None,
    threads: ThreadsOpt = None,
    quiet: QuietOpt = False,
) -> None:
    """Train phase forests and the final forest; write them to a model directory."""
    with _reported_errors():
        cfg = _run_config(
            config,
            scenario=scenario,
            trees_per_phase_forest=trees,
            trees_final=trees_final,
            pixels_per_image_subsample=subsample,
            sub_phases=sub_phases,
            noise_sigma=noise_sigma,
            crop=crop,
            threads=threads,
        )
        plan = SamplingPlan(
            budget=budget,
            phases=phases or (8 if sampler.adaptive else 1),
            sampler=sampler,
            ensemble_size=cfg.trees_per_phase_forest,
            seed=seed,
        )
        typer.echo(f"[1/3] Loading scenes from {manifest}")
        scenes = [load_scene(entry, cfg.crop) for entry in read_manifest(manifest)]
        if not scenes:
            raise DataError(f"{manifest}: no scenes")
        typer.echo(f"[2/3] Training {plan.sampler.value} B={plan.budget} K={plan.phases} on {len(scenes)} scenes")
        started = time.perf_counter()
        pipeline = train_pipeline(scenes, plan, cfg, rng_for(seed, "train"), quiet=quiet)
        path = save_pipeline(pipeline, out)
        typer.echo(f"[3/3] Saved {len(pipeline.phase_ensembles) + 1} forests to {out} "
                   f"({time.perf_counter() - started:.1f}s)")
        typer.echo(f"Pipeline: {path}")


@app.command()
def complete(
    manifest: Annotated[Path, typer.Argument(help="Scenes to sample and complete")],
    model: Annotated[Path, typer.Option("--model", "-m", help="Model directory from `train`")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory")],
    crop: CropOpt = None,
    seed: SeedOpt = 0,
) -> None:
    """Sample each scene with the trained pipeline and write dense predictions and sample masks."""
    with _reported_errors():
        pipeline = load_pipeline(model)
        window = parse_crop(crop) if crop else pipeline.config.crop
        out.mkdir(parents=True, exist_ok=True)
        entries = read_manifest(manifest)
        typer.echo(f"[1/2] Completing {len(entries)} scenes with {pipeline.plan.sampler.value} "
                   f"B={pipeline.plan.budget} K={pipeline.plan.phases}")
        for entry in entries:
            scene = load_scene(entry, window)
            try:
                result = complete_scene(scene, pipeline, rng_for(seed, "complete", scene.id))
            except AdlsError as exc:
                raise type(exc)(f"scene {scene.id}: {exc}") from exc
            save_depth_png(result.prediction, out / f"{scene.id}_pred.png")
            save_depth_png(result.samples.as_depth_map(), out / f"{scene.id}_mask.png")
        record = {
            "sampler": pipeline.plan.sampler.value,
            "budget": pipeline.plan.budget,
            "phases": pipeline.plan.phases,
            "seed": seed,
            "scenario": pipeline.scenario.value,
            "crop": list(window) if window else None,
        }
        (out / COMPLETION_FILE).write_text(yaml.safe_dump(record, sort_keys=False))
        typer.echo(f"[2/2] Wrote predictions and masks to {out}")


def _completion_record(pred_dir: Path) -> dict:
    path = pred_dir / COMPLETION_FILE
    if not path.exists():
        return {}
    record = yaml.safe_load(path.read_text())
    if not isinstance(record, dict):
        raise FormatError(f"{path}: expected a mapping")
    return record


@app.command(name="eval")
def evaluate_cmd(
    pred_dir: Annotated[Path, typer.Argument(help="Directory written by `complete`")],
    manifest: Annotated[Path, typer.Argument(help="Ground-truth manifest")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Metrics CSV")],
) -> None:
    """Score predictions per scene and pooled over all pixels."""
    with _reported_errors():
        record = _completion_record(pred_dir)
        window = tuple(record["crop"]) if record.get("crop") else None
        ident = {key: record.get(key, "-") for key in ("sampler", "budget", "phases", "seed")}
        rows, pairs = [], []
        for entry in read_manifest(manifest):
            pred_path = pred_dir / f"{entry.id}_pred.png"
            if not pred_path.exists():
                raise DataError(f"missing prediction for scene {entry.id}: {pred_path}")
            gt = load_scene(entry, window).ground_truth
            pred = load_depth_png(pred_path)
            try:
                report = evaluate(pred, gt)
            except AdlsError as exc:
                raise type(exc)(f"scene {entry.id}: {exc}") from exc
            rows.append(report.row(entry.id, **ident))
            pairs.append((pred, gt))
        pooled = evaluate_pooled(pairs)
        rows.append(pooled.row(POOLED_ID, **ident))
        write_rows(out, rows, METRIC_COLUMNS)
        typer.echo(f"Scenes: {len(pairs)}  RMSE {pooled.rmse:.1f} mm  MAE {pooled.mae:.1f} mm  "
                   f"REL {pooled.rel:.4f}  delta1 {pooled.delta1:.4f}")
        typer.echo(f"Metrics: {out}")


@app.command()
def bench(
    out: Annotated[Path, typer.Option("--out", "-o", help="Results CSV (appended, resumable)")],
    manifest: Annotated[Optional[Path], typer.Option("--manifest", help="Scene manifest; synthetic scenes when omitted")] = None,
    samplers: Annotated[str, typer.Option("--samplers", help="Comma-separated samplers")] = "pm,random,grid,max",
    budgets: Annotated[str, typer.Option("--budgets", help="Comma-separated budgets")] = "256",
    phases: Annotated[str, typer.Option("--phases", help="Comma-separated phase counts (adaptive samplers)")] = "8",
    seeds: Annotated[str, typer.Option("--seeds", help="Comma-separated cell seeds")] = "0,1,2",
    scenes: Annotated[int, typer.Option("--scenes", help="Synthetic scenes")] = 20,
    width: Annotated[int, typer.Option("--width")] = 160,
    height: Annotated[int, typer.Option("--height")] = 120,
    gt_density: Annotated[float, typer.Option("--gt-density")] = 0.5,
    target_rmse: Annotated[Optional[float], typer.Option("--target-rmse", help="Also tabulate the budget reaching this RMSE (mm)")] = None,
    scenario: ScenarioOpt = None,
    trees: Annotated[Optional[int], typer.Option("--trees", help="Trees per phase forest")] = None,
    trees_final: Annotated[Optional[int], typer.Option("--trees-final", help="Trees in the final forest")] = None,
    crop: CropOpt = None,
    seed: Annotated[int, typer.Option("--seed", help="Synthetic dataset seed")] = 0,
    config: ConfigOpt = None,
    threads: ThreadsOpt = None,
    quiet: QuietOpt = False,
) -> None:
    """Run the sampler x budget x phases x seed matrix on a 70/30 drive split."""
    with _reported_errors():
        cfg = _run_config(
            config,
            scenario=scenario,
            trees_per_phase_forest=trees,
            trees_final=trees_final,
            crop=crop,
            threads=threads,
        )
        try:
            matrix = ExperimentMatrix(
                samplers=_csv_list(samplers, SamplerKind),
                budgets=_csv_list(budgets),
                phase_counts=_csv_list(phases),
                seeds=_csv_list(seeds),
                manifest=manifest,
                synth=None if manifest else SynthSpec(
                    width=width,
                    height=height,
                    gt_density=gt_density,
                    seed=seed,
                    rgb_mode=RgbMode.FLAT if cfg.scenario is Scenario.RGBD else RgbMode.NONE,
                ),
                n_scenes=scenes,
            )
        except ValueError as exc:
            raise typer.BadParameter(str(exc)) from exc
        out.parent.mkdir(parents=True, exist_ok=True)
        run_benchmark(matrix, cfg, out, quiet=quiet)
        typer.echo(f"Results: {out}")
        if target_rmse is not None:
            typer.echo(f"Budgets: {write_budget_table(out, target_rmse)}")


@app.command()
def config(
    path: Annotated[Path, typer.Option("--path", help="Config file to create")] = Path(CONFIG_FILENAME),
) -> None:
    """Show or initialize the config file."""
    path = init_config(path)
    typer.echo(f"Config: {path}")
    typer.echo("")
    typer.echo(path.read_text())
