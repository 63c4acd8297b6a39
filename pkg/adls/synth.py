"""Synthetic piecewise-planar scenes and a nearest-sample interpolation baseline.

A scene is a ground plane that recedes from the bottom edge to the top plus
random rectangles and triangles, each carrying its own depth plane. Surfaces
are composited front-most-wins, so every pixel's depth lies exactly on the
plane of the surface it shows.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from adls.errors import DimensionError, EmptySceneError, InvalidPlanError
from adls.features import MeasuredIndex
from adls.imaging import MAX_DEPTH
from adls.models import DepthMap, RgbImage, SampleMap, Scene, rng_for


class RgbMode(str, Enum):
    FLAT = "flat"
    NONE = "none"


class ShapeKind(str, Enum):
    GROUND = "ground"
    RECTANGLE = "rectangle"
    TRIANGLE = "triangle"


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=160, ge=2)
    height: int = Field(default=120, ge=2)
    n_objects: int = Field(default=8, ge=0)
    depth_range: tuple[float, float] = (2.0, 85.0)   # meters
    gt_density: float = Field(default=0.5, gt=0, le=1)
    rgb_mode: RgbMode = RgbMode.FLAT
    seed: int = Field(default=0, ge=0)
    scenes_per_drive: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def _check(self) -> SynthSpec:
        lo, hi = self.depth_range
        if not 0 < lo < hi < MAX_DEPTH:
            raise InvalidPlanError(f"depth_range must satisfy 0 < min < max < {MAX_DEPTH:g}, got {self.depth_range}")
        return self


class Plane(BaseModel):
    """depth(row, col) = z + gx * (col - col0) + gy * (row - row0)."""
    kind: ShapeKind
    z: float
    gx: float
    gy: float
    row0: float
    col0: float

    def depth(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.z + self.gx * (cols - self.col0) + self.gy * (rows - self.row0)


class SceneLayers(BaseModel):
    """Rendered geometry: dense depth, the index of the visible surface per pixel, and the surfaces."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    depth: np.ndarray
    labels: np.ndarray   # 0 = ground, i = planes[i]
    planes: list[Plane]


def _ground(spec: SynthSpec) -> Plane:
    lo, hi = spec.depth_range
    return Plane(
        kind=ShapeKind.GROUND,
        z=lo,
        gx=0.0,
        gy=-(hi - lo) / (spec.height - 1),
        row0=spec.height - 1,
        col0=0.0,
    )


def _random_plane(kind: ShapeKind, box: tuple[int, int, int, int], spec: SynthSpec,
                  rng: np.random.Generator) -> Plane:
    """A plane whose values over `box` (top, left, bottom, right) stay inside depth_range."""
    lo, hi = spec.depth_range
    top, left, bottom, right = box
    row0, col0 = (top + bottom) / 2, (left + right) / 2
    half_h, half_w = (bottom - top) / 2, (right - left) / 2
    z = rng.uniform(lo, hi)
    slack = min(z - lo, hi - z) / max(half_h + half_w, 1.0)
    ux, uy = rng.uniform(-1.0, 1.0, size=2)
    return Plane(kind=kind, z=z, gx=ux * slack, gy=uy * slack, row0=row0, col0=col0)


def _triangle_mask(rows: np.ndarray, cols: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    (r0, c0), (r1, c1), (r2, c2) = vertices

    def edge(ra: float, ca: float, rb: float, cb: float) -> np.ndarray:
        return (cb - ca) * (rows - ra) - (rb - ra) * (cols - ca)

    e0, e1, e2 = edge(r0, c0, r1, c1), edge(r1, c1, r2, c2), edge(r2, c2, r0, c0)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _triangle_vertices(box: tuple[int, int, int, int], rng: np.random.Generator,
                       attempts: int = 8) -> np.ndarray | None:
    """Three (row, col) vertices inside `box` spanning a non-zero area, or None."""
    top, left, bottom, right = box
    for _ in range(attempts):
        vertices = np.column_stack([
            rng.integers(top, bottom + 1, size=3),
            rng.integers(left, right + 1, size=3),
        ]).astype(np.float64)
        (r0, c0), (r1, c1), (r2, c2) = vertices
        if (c1 - c0) * (r2 - r0) - (r1 - r0) * (c2 - c0) != 0:
            return vertices
    return None


def render_layers(spec: SynthSpec, rng: np.random.Generator) -> SceneLayers:
    h, w = spec.height, spec.width
    rows, cols = np.indices((h, w), dtype=np.float64)
    ground = _ground(spec)
    depth = ground.depth(rows, cols)
    labels = np.zeros((h, w), dtype=np.int32)
    planes = [ground]

    for i in range(1, spec.n_objects + 1):
        kind = ShapeKind.RECTANGLE if rng.random() < 0.5 else ShapeKind.TRIANGLE
        box_h = int(rng.integers(min(max(2, h // 10), h), min(max(3, h // 3), h) + 1))
        box_w = int(rng.integers(min(max(2, w // 10), w), min(max(3, w // 3), w) + 1))
        top = int(rng.integers(0, h - box_h + 1))
        left = int(rng.integers(0, w - box_w + 1))
        box = (top, left, top + box_h - 1, left + box_w - 1)
        inside = (rows >= box[0]) & (rows <= box[2]) & (cols >= box[1]) & (cols <= box[3])
        if kind is ShapeKind.TRIANGLE:
            vertices = _triangle_vertices(box, rng)
            if vertices is None:
                kind = ShapeKind.RECTANGLE
            else:
                inside &= _triangle_mask(rows, cols, vertices)
        plane = _random_plane(kind, box, spec, rng)
        surface = plane.depth(rows, cols)
        front = inside & (surface < depth)
        depth = np.where(front, surface, depth)
        labels[front] = i
        planes.append(plane)
    return SceneLayers(depth=depth, labels=labels, planes=planes)


def _colors(count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` distinct RGB colors."""
    packed = rng.choice(1 << 24, size=count, replace=False)
    return np.stack([(packed >> 16) & 255, (packed >> 8) & 255, packed & 255], axis=-1).astype(np.uint8)


def generate_scene(spec: SynthSpec, rng: np.random.Generator, scene_id: str = "synth") -> Scene:
    """Render one scene; identical for identical (spec, rng state)."""
    layers = render_layers(spec, rng)
    valid = rng.random(layers.depth.shape) < spec.gt_density
    gt = DepthMap(values=layers.depth, valid=valid)
    rgb = None
    if spec.rgb_mode is RgbMode.FLAT:
        rgb = RgbImage(pixels=_colors(len(layers.planes), rng)[layers.labels])
    return Scene.create(scene_id, gt, rgb)


def scene_id(index: int, scenes_per_drive: int) -> str:
    """`drive<NN>_<NNNN>`: the part before the last underscore names the drive group."""
    return f"drive{index // scenes_per_drive:02d}_{index:04d}"


def generate_corpus(spec: SynthSpec, count: int) -> list[Scene]:
    return [
        generate_scene(spec, rng_for(spec.seed, "synth", i), scene_id(i, spec.scenes_per_drive))
        for i in range(count)
    ]


def interpolation_oracle(samples: SampleMap, shape: tuple[int, int] | None = None) -> DepthMap:
    """Dense map giving every pixel the depth of its L1-nearest measured pixel.

    Ties go to the lower row-major sample index.
    """
    if shape is not None and tuple(shape) != (samples.height, samples.width):
        raise DimensionError(f"sample map is {samples.height}x{samples.width}, expected {shape[0]}x{shape[1]}")
    index = MeasuredIndex(samples)
    if index.size == 0:
        raise EmptySceneError("interpolation needs at least one measured pixel")
    rows, cols = np.indices((samples.height, samples.width)).reshape(2, -1)
    nearest, _ = index.query_many(rows, cols, 1)
    return DepthMap.dense(index.depths[nearest[:, 0]].reshape(samples.height, samples.width))
