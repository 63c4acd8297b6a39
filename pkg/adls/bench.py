"""Benchmark matrix: train and evaluate every (sampler, budget, phases, seed) cell.

Results go to a long-format CSV (one row per cell per test scene plus one
pooled row per cell), a per-phase correlation CSV for the adaptive samplers
and, on request, a budget-for-target-RMSE table.
"""

from __future__ import annotations

import hashlib
import math
import time
from collections import defaultdict
from collections.abc import Iterator, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from adls.config import RunConfig
from adls.errors import AdlsError, DataError, InvalidPlanError
from adls.imaging import load_scene, read_manifest
from adls.metrics import (
    METRIC_COLUMNS,
    POOLED_ID,
    budget_for_target_rmse,
    evaluate,
    evaluate_pooled,
    mean_pairwise_l1,
    read_rows,
    write_rows,
)
from adls.models import SamplerKind, SamplingPlan, Scene, rng_for
from adls.sampling import complete_scene, train_pipeline
from adls.synth import SynthSpec, generate_corpus

BENCH_COLUMNS = METRIC_COLUMNS + ["spread_l1", "errors"]
CORRELATION_COLUMNS = ["sampler", "budget", "phases", "seed", "scene_id", "phase", "pearson_r"]
BUDGET_COLUMNS = ["sampler", "phases", "target_rmse_mm", "budget"]

CellKey = tuple[str, int, int, int]


class ExperimentMatrix(BaseModel):
    samplers: list[SamplerKind] = Field(min_length=1)
    budgets: list[int] = Field(min_length=1)
    phase_counts: list[int] = Field(default_factory=lambda: [1], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    manifest: Path | None = None
    synth: SynthSpec | None = None
    n_scenes: int = Field(default=20, ge=2)

    @field_validator("budgets", "phase_counts")
    @classmethod
    def _positive(cls, values: list[int]) -> list[int]:
        if any(v <= 0 for v in values):
            raise ValueError("budgets and phase counts must be positive")
        return values

    @model_validator(mode="after")
    def _dataset(self) -> ExperimentMatrix:
        if (self.manifest is None) == (self.synth is None):
            raise ValueError("give exactly one dataset: a manifest or a synthetic spec")
        return self

    def cells(self) -> Iterator[CellKey]:
        """Cells in output order; passive samplers run once per budget and seed with phases=1."""
        for sampler in self.samplers:
            phase_counts = self.phase_counts if sampler.adaptive else [1]
            for budget in self.budgets:
                for phases in phase_counts:
                    for seed in self.seeds:
                        yield sampler.value, budget, phases, seed


def drive_of(scene_id: str) -> str:
    return scene_id.rsplit("_", 1)[0] if "_" in scene_id else scene_id


def split_scenes(scenes: Sequence[Scene], train_fraction: float = 0.7) -> tuple[list[Scene], list[Scene]]:
    """Split by drive group so scenes of one drive never straddle train and test.

    Groups are ordered by the SHA-256 of their drive token; the first
    round(fraction * groups) go to training.
    """
    groups: dict[str, list[Scene]] = defaultdict(list)
    for scene in scenes:
        groups[drive_of(scene.id)].append(scene)
    if len(groups) < 2:
        raise DataError(f"need at least two drive groups to split, got {len(groups)}")
    tokens = sorted(groups, key=lambda t: hashlib.sha256(t.encode()).hexdigest())
    n_train = min(max(round(train_fraction * len(tokens)), 1), len(tokens) - 1)
    train = [scene for token in tokens[:n_train] for scene in groups[token]]
    test = [scene for token in tokens[n_train:] for scene in groups[token]]
    return train, test


def load_dataset(matrix: ExperimentMatrix, config: RunConfig) -> list[Scene]:
    if matrix.synth is not None:
        return generate_corpus(matrix.synth, matrix.n_scenes)
    return [load_scene(entry, config.crop) for entry in read_manifest(matrix.manifest)]


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.6f}"


class CellResult(BaseModel):
    rows: list[dict[str, object]]
    correlations: list[dict[str, object]] = Field(default_factory=list)
    pooled_rmse: float | None = None
    error: str | None = None


def run_cell(
    key: CellKey,
    train: Sequence[Scene],
    test: Sequence[Scene],
    config: RunConfig,
) -> CellResult:
    """Train on `train`, sample and complete every scene of `test`, score the predictions.

    A failing cell yields a single pooled row carrying the error message.
    """
    sampler, budget, phases, seed = key
    ident = {"sampler": sampler, "budget": budget, "phases": phases, "seed": seed}
    try:
        plan = SamplingPlan(
            budget=budget,
            phases=phases,
            sampler=SamplerKind(sampler),
            ensemble_size=config.trees_per_phase_forest,
            seed=seed,
        )
        train_rng = rng_for(seed, "train", sampler, budget, phases)
        pipeline = train_pipeline([s.with_empty_samples() for s in train], plan, config, train_rng, quiet=True)

        rows, correlations, pairs, spreads = [], [], [], []
        for scene in test:
            result = complete_scene(scene, pipeline, rng_for(seed, "test", scene.id), trace=plan.sampler.adaptive)
            report = evaluate(result.prediction, scene.ground_truth)
            spread = mean_pairwise_l1(*result.samples.positions())
            rows.append({**report.row(scene.id, **ident), "spread_l1": f"{spread:.6f}", "errors": ""})
            correlations += [
                {**ident, "scene_id": scene.id, "phase": phase, "pearson_r": _fmt(r)}
                for phase, r in enumerate(result.correlations, start=1)
            ]
            pairs.append((result.prediction, scene.ground_truth))
            spreads.append(spread)
        pooled = evaluate_pooled(pairs)
        rows.append({
            **pooled.row(POOLED_ID, **ident),
            "spread_l1": f"{float(np.mean(spreads)):.6f}",
            "errors": "",
        })
        return CellResult(rows=rows, correlations=correlations, pooled_rmse=pooled.rmse)
    except (AdlsError, ValueError) as exc:
        message = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return CellResult(rows=[{"scene_id": POOLED_ID, **ident, "errors": message}], error=message)


def completed_cells(out: Path) -> set[CellKey]:
    """Cells with a clean pooled row; failed cells are retried on resume."""
    return {
        (row["sampler"], int(row["budget"]), int(row["phases"]), int(row["seed"]))
        for row in read_rows(out)
        if row.get("scene_id") == POOLED_ID and not row.get("errors")
    }


def correlation_path(out: Path) -> Path:
    return out.with_name(out.stem + ".correlation.csv")


def budget_path(out: Path) -> Path:
    return out.with_name(out.stem + ".budget.csv")


def run_benchmark(
    matrix: ExperimentMatrix,
    config: RunConfig,
    out: Path,
    quiet: bool = False,
) -> list[CellResult]:
    """Run every cell not already present in `out`, appending rows as each cell finishes."""
    scenes = load_dataset(matrix, config)
    train, test = split_scenes(scenes)
    done = completed_cells(out)
    cells = list(matrix.cells())
    if not quiet:
        print(f"[bench] {len(train)} training / {len(test)} test scenes, {len(cells)} cells ({len(done)} done)")

    results = []
    for n, key in enumerate(cells, start=1):
        if key in done:
            continue
        started = time.perf_counter()
        result = run_cell(key, train, test, config)
        write_rows(out, result.rows, BENCH_COLUMNS, append=True)
        if result.correlations:
            write_rows(correlation_path(out), result.correlations, CORRELATION_COLUMNS, append=True)
        results.append(result)
        if not quiet:
            outcome = f"error: {result.error}" if result.error else f"pooled RMSE {result.pooled_rmse:.1f} mm"
            print(f"[cell {n}/{len(cells)}] {key[0]} B={key[1]} K={key[2]} seed={key[3]}: "
                  f"{outcome} ({time.perf_counter() - started:.1f}s)")
    return results


def budget_table(rows: Sequence[dict[str, str]], target_mm: float) -> list[dict[str, object]]:
    """Budget needed per (sampler, phases) to reach `target_mm`, from seed-averaged pooled RMSEs."""
    if target_mm <= 0:
        raise InvalidPlanError("target RMSE must be positive")
    curves: dict[tuple[str, int], dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row.get("scene_id") != POOLED_ID or row.get("errors"):
            continue
        curves[(row["sampler"], int(row["phases"]))][int(row["budget"])].append(float(row["rmse_mm"]))

    table = []
    for (sampler, phases), by_budget in sorted(curves.items()):
        budgets = sorted(by_budget)
        try:
            budget = budget_for_target_rmse(budgets, [float(np.mean(by_budget[b])) for b in budgets], target_mm)
            cell = f"{budget:.1f}"
        except DataError:
            cell = "-"
        table.append({"sampler": sampler, "phases": phases, "target_rmse_mm": f"{target_mm:g}", "budget": cell})
    return table


def write_budget_table(out: Path, target_mm: float) -> Path:
    path = budget_path(out)
    write_rows(path, budget_table(read_rows(out), target_mm), BUDGET_COLUMNS)
    return path
