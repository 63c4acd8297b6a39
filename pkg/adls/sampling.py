"""Phased ensemble-variance sampling: probability matching, baselines and pipeline drivers.

Training runs K phases over a scene corpus. Each phase trains one ensemble on
the samples placed so far, scores every still-unmeasured valid pixel by the
variance of the members' predictions and draws that phase's share of the
budget. Testing replays the frozen phase ensembles on a new scene and
completes it with the final predictor.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import NamedTuple, Protocol, runtime_checkable

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from adls.config import RunConfig
from adls.errors import (
    FormatError,
    InvalidPlanError,
    NoCandidatesError,
    ScenarioMismatchError,
    UndefinedCorrelationError,
)
from adls.features import MeasuredIndex, build_feature_matrix, build_training_matrix, feature_count
from adls.forest import (
    RegressionForest,
    ensemble_variance,
    fit_forest,
    load_forest,
    predict_per_tree,
    save_forest,
)
from adls.imaging import rgb_to_hsv_image
from adls.metrics import variance_error_correlation
from adls.models import (
    DepthMap,
    ProbabilityMap,
    SampleMap,
    SamplerKind,
    SamplingPlan,
    Scenario,
    Scene,
    VarianceMap,
    allocate_phases,
)

PIPELINE_FILE = "pipeline.yaml"
PIPELINE_FORMAT = "adls-pipeline/1"


class PixelDraw(NamedTuple):
    rows: np.ndarray
    cols: np.ndarray
    exhausted: bool = False


def _echo(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def variance_to_probability(variance: VarianceMap) -> ProbabilityMap:
    """pi(x) = v(x) / sum(v); uniform over the support when every variance is 0."""
    if variance.size == 0:
        raise NoCandidatesError("no pixels left to sample")
    scores = variance.values[variance.support]
    total = scores.sum()
    probs = scores / total if total > 0 else np.full(scores.size, 1.0 / scores.size)
    values = np.zeros(variance.support.shape, dtype=np.float64)
    values[variance.support] = probs
    return ProbabilityMap(values=values, support=variance.support)


class _SumTree:
    """Binary sum tree over weights: O(log n) weighted draws and removals."""

    def __init__(self, weights: np.ndarray) -> None:
        self.n = weights.size
        self.size = 1 << max(0, (self.n - 1).bit_length())
        self.tree = np.zeros(2 * self.size)
        self.tree[self.size:self.size + self.n] = weights
        level = self.size
        while level > 1:
            half = level // 2
            self.tree[half:level] = self.tree[level:2 * level:2] + self.tree[level + 1:2 * level:2]
            level = half

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def draw(self, u: float) -> int:
        tree = self.tree
        gas = u * tree[1]
        i = 1
        while i < self.size:
            left = 2 * i
            if tree[left] > 0 and (gas < tree[left] or tree[left + 1] <= 0):
                i = left
            else:
                gas -= tree[left]
                i = left + 1
        return i - self.size

    def remove(self, j: int) -> None:
        i = j + self.size
        self.tree[i] = 0.0
        i //= 2
        while i:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i //= 2


def sample_without_replacement(pi: ProbabilityMap, count: int, rng: np.random.Generator) -> PixelDraw:
    """Sequential weighted draws: pick from pi, remove the pixel, renormalize, repeat.

    Asking for more pixels than the support holds returns the whole support
    with `exhausted` set. Once only zero-probability pixels remain, draws
    continue uniformly among them.
    """
    candidates = np.flatnonzero(pi.support.ravel())
    exhausted = count > candidates.size
    count = min(count, candidates.size)
    weights = pi.values.ravel()[candidates]
    tree = _SumTree(weights)
    remaining = np.ones(candidates.size, dtype=bool)
    taken = np.empty(count, dtype=np.int64)
    for t in range(count):
        if tree.total > 0:
            j = tree.draw(rng.random())
        else:
            j = int(rng.choice(np.flatnonzero(remaining)))
        tree.remove(j)
        remaining[j] = False
        taken[t] = j
    rows, cols = np.divmod(candidates[taken], pi.support.shape[1])
    return PixelDraw(rows, cols, exhausted)


def max_sampler(variance: VarianceMap, count: int) -> PixelDraw:
    """The `count` highest-variance pixels; ties go to the lower row-major index."""
    candidates = np.flatnonzero(variance.support.ravel())
    exhausted = count > candidates.size
    scores = variance.values.ravel()[candidates]
    picked = candidates[np.lexsort((candidates, -scores))[:count]]
    rows, cols = np.divmod(picked, variance.support.shape[1])
    return PixelDraw(rows, cols, exhausted)


def random_sampler(scene: Scene, budget: int, rng: np.random.Generator) -> PixelDraw:
    """Uniform draw of distinct measurable pixels, single shot."""
    candidates = np.flatnonzero(scene.support().ravel())
    exhausted = budget > candidates.size
    picked = rng.choice(candidates, size=min(budget, candidates.size), replace=False)
    rows, cols = np.divmod(picked, scene.width)
    return PixelDraw(rows, cols, exhausted)


def _lattice_shape(budget: int, height: int, width: int) -> tuple[int, int]:
    """Columns and rows of the smallest near-square lattice holding at least `budget` points."""
    nx = int(np.ceil(np.sqrt(budget * width / height)))
    ny = int(np.ceil(np.sqrt(budget * height / width)))
    while nx > 1 and (nx - 1) * ny >= budget:
        nx -= 1
    while ny > 1 and nx * (ny - 1) >= budget:
        ny -= 1
    return nx, ny


def _spread_drops(n_points: int, surplus: int) -> np.ndarray:
    """Flags `surplus` lattice indices spaced evenly through row-major order."""
    flags = np.zeros(n_points, dtype=bool)
    if surplus > 0:
        flags[np.floor((np.arange(surplus) + 0.5) * n_points / surplus).astype(np.int64)] = True
    return flags


def grid_sampler(scene: Scene, budget: int, rng: np.random.Generator | None = None) -> PixelDraw:
    """Regular lattice snapped to measurable pixels, trimmed or topped up to the budget.

    Lattice points are snapped in row-major order to the nearest (L1) free
    measurable pixel. Surplus points are dropped largest-displacement first,
    ties going to points spaced evenly through the lattice; a shortfall is
    filled with uniform random measurable pixels.
    """
    support = scene.support()
    candidates = np.flatnonzero(support.ravel())
    exhausted = budget > candidates.size
    budget = min(budget, candidates.size)
    if budget == 0:
        return PixelDraw(np.empty(0, np.int64), np.empty(0, np.int64), exhausted)
    h, w = scene.height, scene.width
    nx, ny = _lattice_shape(budget, h, w)
    lattice_cols = np.floor((np.arange(nx) + 0.5) * w / nx).astype(np.int64)
    lattice_rows = np.floor((np.arange(ny) + 0.5) * h / ny).astype(np.int64)

    cand_rows, cand_cols = np.divmod(candidates, w)
    free = np.ones(candidates.size, dtype=bool)
    chosen: list[int] = []
    displacement: list[int] = []
    for r in lattice_rows:
        for c in lattice_cols:
            if not free.any():
                break
            dist = np.abs(cand_rows - r) + np.abs(cand_cols - c)
            dist = np.where(free, dist, np.iinfo(np.int64).max)
            j = int(np.argmin(dist))
            free[j] = False
            chosen.append(j)
            displacement.append(int(dist[j]))

    chosen_arr = np.array(chosen, dtype=np.int64)
    if chosen_arr.size > budget:
        spread = _spread_drops(chosen_arr.size, chosen_arr.size - budget)
        order = np.lexsort((np.arange(chosen_arr.size), spread, np.array(displacement)))
        chosen_arr = chosen_arr[np.sort(order[:budget])]
    elif chosen_arr.size < budget:
        rng = rng or np.random.default_rng(0)
        extra = rng.choice(np.flatnonzero(free), size=budget - chosen_arr.size, replace=False)
        chosen_arr = np.concatenate([chosen_arr, extra])
    rows, cols = np.divmod(candidates[chosen_arr], w)
    return PixelDraw(rows, cols, exhausted)


@runtime_checkable
class EnsembleProvider(Protocol):
    """A depth completer that can be trained on a corpus and exposes M >= 2 members."""

    scenario: Scenario

    def fit(self, scenes: Sequence[Scene], rng: np.random.Generator) -> None: ...

    def predict_members(self, scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray: ...

    def predict(self, scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray: ...


ProviderFactory = Callable[[int], EnsembleProvider]


class ForestEnsemble:
    """Random-forest provider: the forest's trees are the ensemble members."""

    def __init__(self, config: RunConfig, n_trees: int, forest: RegressionForest | None = None) -> None:
        self.config = config
        self.scenario = config.scenario
        self.n_trees = n_trees
        self.forest = forest

    def fit(self, scenes: Sequence[Scene], rng: np.random.Generator) -> None:
        cfg = self.config
        parts = [
            build_training_matrix(scene, cfg.pixels_per_image_subsample, self.scenario, rng, cfg.neighbors)
            for scene in scenes
        ]
        X = np.vstack([part[0] for part in parts])
        y = np.concatenate([part[1] for part in parts])
        self.forest = fit_forest(
            X, y, self.n_trees,
            seed=int(rng.integers(2**63)),
            max_features=cfg.max_features,
            threads=cfg.threads,
        )

    def _features(self, scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        hsv = rgb_to_hsv_image(scene.rgb.pixels) if self.scenario is Scenario.RGBD and scene.rgb else None
        index = MeasuredIndex(scene.samples)
        return build_feature_matrix(scene, rows, cols, self.scenario, self.config.neighbors, index, hsv)

    def predict_members(self, scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if self.forest is None:
            raise InvalidPlanError("ensemble used before training")
        return predict_per_tree(self.forest, self._features(scene, rows, cols))

    def predict(self, scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.predict_members(scene, rows, cols).mean(axis=1)


def forest_factory(config: RunConfig) -> ProviderFactory:
    return lambda n_trees: ForestEnsemble(config, n_trees)


class TrainedPipeline(BaseModel):
    """Frozen phase ensembles plus the final predictor.

    Adaptive pipelines hold one ensemble per phase; passive (random, grid)
    pipelines hold none.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plan: SamplingPlan
    config: RunConfig
    phase_ensembles: list[EnsembleProvider] = Field(default_factory=list)
    final: EnsembleProvider

    @model_validator(mode="after")
    def _check(self) -> TrainedPipeline:
        expected = self.plan.phases if self.plan.sampler.adaptive else 0
        if len(self.phase_ensembles) != expected:
            raise InvalidPlanError(f"expected {expected} phase ensembles, got {len(self.phase_ensembles)}")
        return self

    @property
    def scenario(self) -> Scenario:
        return self.config.scenario


class CompletionResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: SampleMap
    prediction: DepthMap
    correlations: list[float] = Field(default_factory=list)  # per phase, NaN when undefined


def acquisition_scores(sampler: SamplerKind, members: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Ensemble variance, or the squared error of the ensemble mean for the oracle."""
    if sampler is SamplerKind.ORACLE_SQERR:
        return (members.mean(axis=1) - truth) ** 2
    return ensemble_variance(members)


def _draw(sampler: SamplerKind, variance: VarianceMap, count: int, rng: np.random.Generator) -> PixelDraw:
    if sampler is SamplerKind.MAX:
        return max_sampler(variance, count)
    return sample_without_replacement(variance_to_probability(variance), count, rng)


def _measure(scene: Scene, draw: PixelDraw, phase: int, config: RunConfig, noise_rng: np.random.Generator) -> None:
    depths = scene.ground_truth.values[draw.rows, draw.cols]
    if config.noise_sigma:
        depths = np.maximum(depths + noise_rng.normal(0.0, config.noise_sigma, depths.size), 0.0)
    scene.samples.measure(draw.rows, draw.cols, depths, phase)


def _correlation(members: np.ndarray, truth: np.ndarray) -> float:
    try:
        return variance_error_correlation(ensemble_variance(members), (members.mean(axis=1) - truth) ** 2)
    except UndefinedCorrelationError:
        return float("nan")


def _run_phase(
    scene: Scene,
    ensemble: EnsembleProvider,
    sampler: SamplerKind,
    count: int,
    phase: int,
    config: RunConfig,
    rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> float:
    """Place `count` samples with one frozen ensemble; returns the phase correlation."""
    correlation = float("nan")
    steps = allocate_phases(count, min(config.sub_phases, count))
    for step, step_count in enumerate(steps):
        support = scene.support()
        rows, cols = np.nonzero(support)
        if rows.size == 0:
            raise NoCandidatesError(f"scene {scene.id}: no measurable pixels left in phase {phase}")
        members = ensemble.predict_members(scene, rows, cols)
        truth = scene.ground_truth.values[rows, cols]
        if step == 0:
            correlation = _correlation(members, truth)
        variance = VarianceMap.from_scores(support, acquisition_scores(sampler, members, truth))
        _measure(scene, _draw(sampler, variance, step_count, rng), phase, config, noise_rng)
    return correlation


def run_phased_training(
    scenes: Sequence[Scene],
    factory: ProviderFactory,
    plan: SamplingPlan,
    config: RunConfig,
    rng: np.random.Generator,
    quiet: bool = False,
) -> TrainedPipeline:
    """Train K phase ensembles while sampling the corpus, then the final predictor.

    Mutates the scenes' sample maps; each ends with exactly plan.budget samples.
    """
    if not plan.sampler.adaptive:
        raise InvalidPlanError(f"{plan.sampler.value} is not an adaptive sampler")
    if not scenes:
        raise InvalidPlanError("no training scenes")
    noise_rng = np.random.default_rng(int(rng.integers(2**63)))
    ensembles: list[EnsembleProvider] = []
    for phase, count in enumerate(plan.per_phase, start=1):
        started = time.perf_counter()
        ensemble = factory(plan.ensemble_size)
        ensemble.fit(scenes, rng)
        for scene in scenes:
            _run_phase(scene, ensemble, plan.sampler, count, phase, config, rng, noise_rng)
        ensembles.append(ensemble)
        total = sum(scene.samples.count for scene in scenes)
        _echo(quiet, f"[phase {phase}/{plan.phases}] +{count} samples/scene, {total} total "
                     f"({time.perf_counter() - started:.1f}s)")
    final = _fit_final(scenes, factory, config, rng, quiet)
    return TrainedPipeline(plan=plan, config=config, phase_ensembles=ensembles, final=final)


def _fit_final(
    scenes: Sequence[Scene], factory: ProviderFactory, config: RunConfig, rng: np.random.Generator, quiet: bool,
) -> EnsembleProvider:
    started = time.perf_counter()
    final = factory(config.trees_final)
    final.fit(scenes, rng)
    _echo(quiet, f"[final] {config.trees_final} members trained ({time.perf_counter() - started:.1f}s)")
    return final


def _passive_draw(scene: Scene, plan: SamplingPlan, rng: np.random.Generator) -> PixelDraw:
    if plan.sampler is SamplerKind.GRID:
        return grid_sampler(scene, plan.budget, rng)
    return random_sampler(scene, plan.budget, rng)


def train_pipeline(
    scenes: Sequence[Scene],
    plan: SamplingPlan,
    config: RunConfig,
    rng: np.random.Generator,
    factory: ProviderFactory | None = None,
    quiet: bool = False,
) -> TrainedPipeline:
    """Train for any sampler: phased for adaptive ones, single-shot for random and grid."""
    factory = factory or forest_factory(config)
    if plan.sampler.adaptive:
        return run_phased_training(scenes, factory, plan, config, rng, quiet)
    if not scenes:
        raise InvalidPlanError("no training scenes")
    noise_rng = np.random.default_rng(int(rng.integers(2**63)))
    for scene in scenes:
        _measure(scene, _passive_draw(scene, plan, rng), 1, config, noise_rng)
    _echo(quiet, f"[{plan.sampler.value}] {plan.budget} samples/scene on {len(scenes)} scenes")
    final = _fit_final(scenes, factory, config, rng, quiet)
    return TrainedPipeline(plan=plan, config=config, final=final)


def _check_scenario(scene: Scene, pipeline: TrainedPipeline) -> None:
    if pipeline.scenario is Scenario.RGBD and scene.rgb is None:
        raise ScenarioMismatchError(f"scene {scene.id} has no RGB but the pipeline is rgbd")


def _predict_dense(scene: Scene, pipeline: TrainedPipeline) -> DepthMap:
    rows, cols = np.indices((scene.height, scene.width)).reshape(2, -1)
    depth = pipeline.final.predict(scene, rows, cols)
    return DepthMap.dense(np.maximum(depth, 0.0).reshape(scene.height, scene.width))


def run_phased_testing(
    scene: Scene,
    pipeline: TrainedPipeline,
    rng: np.random.Generator,
    trace: bool = False,
) -> CompletionResult:
    """Place the budget on a scene with the frozen phase ensembles, then predict dense depth.

    The input scene is left untouched; sampling starts from an empty sample map.
    """
    if not pipeline.plan.sampler.adaptive:
        raise InvalidPlanError(f"{pipeline.plan.sampler.value} pipeline has no phase ensembles")
    _check_scenario(scene, pipeline)
    work = scene.with_empty_samples()
    noise_rng = np.random.default_rng(int(rng.integers(2**63)))
    correlations = []
    for phase, (ensemble, count) in enumerate(zip(pipeline.phase_ensembles, pipeline.plan.per_phase), start=1):
        r = _run_phase(work, ensemble, pipeline.plan.sampler, count, phase, pipeline.config, rng, noise_rng)
        correlations.append(r)
    return CompletionResult(
        samples=work.samples,
        prediction=_predict_dense(work, pipeline),
        correlations=correlations if trace else [],
    )


def complete_scene(
    scene: Scene,
    pipeline: TrainedPipeline,
    rng: np.random.Generator,
    trace: bool = False,
) -> CompletionResult:
    """Sample and complete a scene with any trained pipeline."""
    if pipeline.plan.sampler.adaptive:
        return run_phased_testing(scene, pipeline, rng, trace)
    _check_scenario(scene, pipeline)
    work = scene.with_empty_samples()
    noise_rng = np.random.default_rng(int(rng.integers(2**63)))
    _measure(work, _passive_draw(work, pipeline.plan, rng), 1, pipeline.config, noise_rng)
    return CompletionResult(samples=work.samples, prediction=_predict_dense(work, pipeline))


def _forest_of(ensemble: EnsembleProvider) -> RegressionForest:
    if not isinstance(ensemble, ForestEnsemble) or ensemble.forest is None:
        raise InvalidPlanError("only trained forest ensembles can be saved")
    return ensemble.forest


def save_pipeline(pipeline: TrainedPipeline, model_dir: Path) -> Path:
    """Write plan/config as YAML and every forest as an ADLS1 container."""
    model_dir.mkdir(parents=True, exist_ok=True)
    scenario = pipeline.scenario
    phase_files = []
    for k, ensemble in enumerate(pipeline.phase_ensembles, start=1):
        name = f"phase_{k:02d}.adls"
        save_forest(_forest_of(ensemble), model_dir / name, scenario)
        phase_files.append(name)
    save_forest(_forest_of(pipeline.final), model_dir / "final.adls", scenario)
    record = {
        "format": PIPELINE_FORMAT,
        "plan": pipeline.plan.model_dump(mode="json"),
        "config": pipeline.config.model_dump(mode="json"),
        "phase_forests": phase_files,
        "final_forest": "final.adls",
    }
    path = model_dir / PIPELINE_FILE
    path.write_text(yaml.safe_dump(record, sort_keys=False))
    return path


def load_pipeline(model_dir: Path) -> TrainedPipeline:
    path = model_dir / PIPELINE_FILE
    record = yaml.safe_load(path.read_text())
    if not isinstance(record, dict) or record.get("format") != PIPELINE_FORMAT:
        raise FormatError(f"{path}: not an adls pipeline record")
    try:
        plan = SamplingPlan(**record["plan"])
        config = RunConfig(**record["config"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"{path}: {exc}") from exc

    def _load(name: str) -> ForestEnsemble:
        forest, scenario = load_forest(model_dir / name)
        if scenario is not None and scenario is not config.scenario:
            raise ScenarioMismatchError(f"{name} was trained for {scenario.value}, pipeline is {config.scenario.value}")
        expected = feature_count(config.scenario, config.neighbors)
        if forest.n_features != expected:
            raise ScenarioMismatchError(
                f"{name} takes {forest.n_features} features, a {config.scenario.value} pipeline builds {expected}"
            )
        return ForestEnsemble(config, forest.n_trees, forest)

    phases = [_load(name) for name in record.get("phase_forests", [])]
    final = _load(record["final_forest"])
    return TrainedPipeline(plan=plan, config=config, phase_ensembles=phases, final=final)
