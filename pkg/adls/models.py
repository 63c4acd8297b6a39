"""Shared domain types: depth maps, sample maps, scenes and sampling plans."""

from __future__ import annotations

import hashlib
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from adls.errors import DataError, DimensionError, InvalidPlanError


class Scenario(str, Enum):
    RGBD = "rgbd"
    D_ONLY = "d"


class SamplerKind(str, Enum):
    PM = "pm"
    MAX = "max"
    RANDOM = "random"
    GRID = "grid"
    ORACLE_SQERR = "oracle"

    @property
    def adaptive(self) -> bool:
        return self in (SamplerKind.PM, SamplerKind.MAX, SamplerKind.ORACLE_SQERR)


class DepthMap(BaseModel):
    """Per-pixel depth in meters with an explicit validity mask.

    Pixels outside `valid` are MISSING; their entry in `values` is held at 0
    and carries no meaning.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    valid: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if isinstance(data, dict) and "values" in data:
            values = np.array(data["values"], dtype=np.float64)
            valid = np.asarray(data.get("valid", np.ones(values.shape, bool)), dtype=bool)
            if valid.shape == values.shape:
                values[~valid] = 0.0
            data = {**data, "values": values, "valid": valid}
        return data

    @model_validator(mode="after")
    def _check(self) -> DepthMap:
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise DimensionError("depth values and validity mask must be equal 2-D arrays")
        if min(self.values.shape) == 0:
            raise DimensionError("depth map dimensions must be positive")
        observed = self.values[self.valid]
        if not np.all(np.isfinite(observed)) or np.any(observed < 0):
            raise DataError("valid depths must be finite and non-negative")
        return self

    @classmethod
    def from_array(cls, depth: np.ndarray) -> DepthMap:
        """Build from a float array where NaN marks MISSING."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = ~np.isnan(depth)
        return cls(values=np.where(valid, depth, 0.0), valid=valid)

    @classmethod
    def dense(cls, depth: np.ndarray) -> DepthMap:
        depth = np.asarray(depth, dtype=np.float64)
        return cls(values=depth, valid=np.ones(depth.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_array(self) -> np.ndarray:
        """Float copy with NaN at MISSING pixels."""
        return np.where(self.valid, self.values, np.nan)

    def crop(self, top: int, left: int, height: int, width: int) -> DepthMap:
        window = np.s_[top:top + height, left:left + width]
        return DepthMap(values=self.values[window], valid=self.valid[window])


class SampleMap(BaseModel):
    """Measured depths of a scene.

    `phase` holds 0 for UNMEASURED pixels and otherwise the 1-based phase in
    which the pixel was measured, so measured positions form a set by
    construction. Mutated only by the sampling drivers.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    depths: np.ndarray
    phase: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> SampleMap:
        if self.depths.ndim != 2 or self.depths.shape != self.phase.shape:
            raise DimensionError("sample depths and phase map must be equal 2-D arrays")
        return self

    @classmethod
    def empty(cls, height: int, width: int) -> SampleMap:
        return cls(
            depths=np.zeros((height, width), dtype=np.float64),
            phase=np.zeros((height, width), dtype=np.int16),
        )

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def measured(self) -> np.ndarray:
        return self.phase > 0

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.phase))

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Measured (rows, cols) in row-major order."""
        return np.nonzero(self.phase)

    def measure(self, rows: np.ndarray, cols: np.ndarray, depths: np.ndarray, phase: int) -> None:
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if rows.size == 0:
            return
        flat = rows * self.width + cols
        if np.unique(flat).size != flat.size or np.any(self.phase[rows, cols] > 0):
            raise DataError("pixel measured twice")
        self.depths[rows, cols] = depths
        self.phase[rows, cols] = phase

    def phase_counts(self, n_phases: int) -> list[int]:
        counts = np.bincount(self.phase.ravel(), minlength=n_phases + 1)
        return [int(c) for c in counts[1:n_phases + 1]]

    def copy(self) -> SampleMap:
        return SampleMap(depths=self.depths.copy(), phase=self.phase.copy())

    def crop(self, top: int, left: int, height: int, width: int) -> SampleMap:
        window = np.s_[top:top + height, left:left + width]
        return SampleMap(depths=self.depths[window].copy(), phase=self.phase[window].copy())

    def as_depth_map(self) -> DepthMap:
        return DepthMap(values=self.depths, valid=self.measured)


class RgbImage(BaseModel):
    """8-bit RGB pixels, shape (height, width, 3)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> RgbImage:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise DimensionError("RGB image must be a (height, width, 3) uint8 array")
        return self

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def crop(self, top: int, left: int, height: int, width: int) -> RgbImage:
        return RgbImage(pixels=self.pixels[top:top + height, left:left + width].copy())


class Scene(BaseModel):
    """One scene: optional RGB, semi-dense ground truth and measured samples."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    ground_truth: DepthMap
    samples: SampleMap
    rgb: RgbImage | None = None

    @classmethod
    def create(cls, id: str, ground_truth: DepthMap, rgb: RgbImage | None = None) -> Scene:
        return cls(
            id=id,
            ground_truth=ground_truth,
            samples=SampleMap.empty(ground_truth.height, ground_truth.width),
            rgb=rgb,
        )

    @property
    def height(self) -> int:
        return self.ground_truth.height

    @property
    def width(self) -> int:
        return self.ground_truth.width

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.ground_truth.valid))

    def with_empty_samples(self) -> Scene:
        return self.model_copy(update={"samples": SampleMap.empty(self.height, self.width)})

    def support(self) -> np.ndarray:
        """Mask of pixels that may still be measured."""
        return self.ground_truth.valid & ~self.samples.measured


class Violation(BaseModel):
    invariant: str
    row: int
    col: int

    def __str__(self) -> str:
        return f"{self.invariant} at (row={self.row}, col={self.col})"


def validate_scene(scene: Scene, exact_measurements: bool = True) -> list[Violation]:
    """List every broken Scene invariant; empty when the scene is consistent.

    With `exact_measurements`, measured values must equal ground truth (the
    noise-free measurement model).
    """
    violations: list[Violation] = []
    gt = scene.ground_truth
    h, w = gt.shape

    def _dims(other_h: int, other_w: int) -> None:
        if (other_h, other_w) != (h, w):
            row, col = (min(h, other_h), 0) if other_h != h else (0, min(w, other_w))
            violations.append(Violation(invariant="dimension mismatch", row=row, col=col))

    if scene.rgb is not None:
        _dims(scene.rgb.height, scene.rgb.width)
    samples_ok = (scene.samples.height, scene.samples.width) == (h, w)
    _dims(scene.samples.height, scene.samples.width)
    if not samples_ok:
        return violations

    measured = scene.samples.measured
    for r, c in zip(*np.nonzero(measured & ~gt.valid)):
        violations.append(Violation(invariant="sample outside valid GT", row=int(r), col=int(c)))

    depths = scene.samples.depths
    bad = measured & (~np.isfinite(depths) | (depths < 0))
    for r, c in zip(*np.nonzero(bad)):
        violations.append(Violation(invariant="invalid measured depth", row=int(r), col=int(c)))

    if exact_measurements:
        differs = measured & gt.valid & ~bad & (depths != gt.values)
        for r, c in zip(*np.nonzero(differs)):
            violations.append(Violation(invariant="measured value differs from GT", row=int(r), col=int(c)))
    return violations


def allocate_phases(budget: int, phases: int) -> list[int]:
    """Split a budget over phases, front-loading the remainder."""
    if phases < 1 or phases > budget:
        raise InvalidPlanError(f"need 1 <= phases <= budget, got phases={phases}, budget={budget}")
    base, extra = divmod(budget, phases)
    return [base + 1] * extra + [base] * (phases - extra)


class SamplingPlan(BaseModel):
    """Budget, phase schedule and sampler for one run."""
    model_config = ConfigDict(frozen=True)

    budget: int = Field(gt=0)
    phases: int = Field(default=1, ge=1)
    sampler: SamplerKind = SamplerKind.PM
    ensemble_size: int = Field(default=40, ge=2)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self) -> SamplingPlan:
        if self.phases > self.budget:
            raise InvalidPlanError(f"phases ({self.phases}) exceed budget ({self.budget})")
        if not self.sampler.adaptive and self.phases != 1:
            raise InvalidPlanError(f"{self.sampler.value} sampling is single-shot; use phases=1")
        return self

    @property
    def per_phase(self) -> list[int]:
        return allocate_phases(self.budget, self.phases)


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for a (seed, keys...) stream.

    String keys are hashed so that streams do not depend on Python's
    per-process hash randomisation.
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        entropy.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


class VarianceMap(BaseModel):
    """Per-pixel acquisition score over a support; pixels off the support are EXCLUDED."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    support: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> VarianceMap:
        if self.values.shape != self.support.shape:
            raise DimensionError("variance values and support must have equal shape")
        scores = self.values[self.support]
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise DataError("variances must be finite and non-negative")
        return self

    @classmethod
    def from_scores(cls, support: np.ndarray, scores: np.ndarray) -> VarianceMap:
        """Scatter scores (row-major over the support) onto the grid."""
        support = np.asarray(support, dtype=bool)
        values = np.zeros(support.shape, dtype=np.float64)
        values[support] = scores
        return cls(values=values, support=support)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.support))

    def to_array(self) -> np.ndarray:
        return np.where(self.support, self.values, np.nan)


class ProbabilityMap(BaseModel):
    """Sampling distribution over the support of a VarianceMap."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    support: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> ProbabilityMap:
        probs = self.values[self.support]
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DataError("probabilities must be non-negative and sum to 1")
        return self

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.support))
