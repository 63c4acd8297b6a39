"""Tests for the synthetic scene generator and the interpolation baseline."""

import numpy as np
import pytest
from pydantic import ValidationError

from adls.config import RunConfig
from adls.errors import EmptySceneError
from adls.metrics import evaluate_pooled
from adls.models import SampleMap, SamplerKind, SamplingPlan, Scenario
from adls.sampling import complete_scene, train_pipeline
from adls.synth import (
    _triangle_vertices,
    RgbMode,
    ShapeKind,
    SynthSpec,
    generate_corpus,
    generate_scene,
    interpolation_oracle,
    render_layers,
    scene_id,
)


class TestSynthSpec:
    def test_defaults(self):
        spec = SynthSpec()
        assert spec.depth_range == (2.0, 85.0)
        assert spec.gt_density == 0.5

    @pytest.mark.parametrize("kwargs", [
        {"depth_range": (10.0, 5.0)},
        {"depth_range": (1.0, 300.0)},
        {"gt_density": 0.0},
        {"gt_density": 1.5},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            SynthSpec(**kwargs)


class TestGenerateScene:
    def test_plane_only(self):
        spec = SynthSpec(width=10, height=5, n_objects=0, gt_density=1.0)
        scene = generate_scene(spec, np.random.default_rng(0))
        assert scene.valid_count == 50
        depth = scene.ground_truth.values
        assert np.all(depth[:, 0] == depth[:, 9])
        assert depth[4, 0] == pytest.approx(2.0)
        assert depth[0, 0] == pytest.approx(85.0)
        assert np.all(np.diff(depth[:, 0]) < 0)

    def test_same_seed_same_scene(self, small_spec):
        a = generate_scene(small_spec, np.random.default_rng(3))
        b = generate_scene(small_spec, np.random.default_rng(3))
        np.testing.assert_array_equal(a.ground_truth.values, b.ground_truth.values)
        np.testing.assert_array_equal(a.ground_truth.valid, b.ground_truth.valid)
        np.testing.assert_array_equal(a.rgb.pixels, b.rgb.pixels)

    def test_depth_within_range(self, small_spec):
        scene = generate_scene(small_spec.model_copy(update={"n_objects": 20}), np.random.default_rng(4))
        values = scene.ground_truth.values[scene.ground_truth.valid]
        assert values.min() >= 2.0 - 1e-9
        assert values.max() <= 85.0 + 1e-9

    def test_depth_within_range_many_seeds(self):
        spec = SynthSpec(width=32, height=24, n_objects=20, gt_density=0.6)
        for seed in range(200):
            layers = render_layers(spec, np.random.default_rng(seed))
            assert layers.depth.min() >= 2.0 - 1e-9, seed
            assert layers.depth.max() <= 85.0 + 1e-9, seed

    def test_objects_stay_inside_their_box(self):
        spec = SynthSpec(width=32, height=24, n_objects=20)
        largest_box = (24 // 3) * (32 // 3)
        for seed in range(50):
            labels = render_layers(spec, np.random.default_rng(seed)).labels
            counts = np.bincount(labels.ravel(), minlength=21)
            assert counts[1:].max() <= largest_box, seed

    def test_degenerate_triangle_vertices_redrawn(self):
        vertices = _triangle_vertices((3, 4, 3, 4), np.random.default_rng(0))
        assert vertices is None
        vertices = _triangle_vertices((0, 0, 5, 5), np.random.default_rng(0))
        (r0, c0), (r1, c1), (r2, c2) = vertices
        assert (c1 - c0) * (r2 - r0) - (r1 - r0) * (c2 - c0) != 0

    @pytest.mark.parametrize("size", [(2, 2), (2, 9), (9, 2)])
    def test_smallest_images(self, size):
        width, height = size
        spec = SynthSpec(width=width, height=height, n_objects=3, gt_density=1.0)
        for seed in range(50):
            scene = generate_scene(spec, np.random.default_rng(seed))
            assert scene.valid_count == width * height

    def test_surfaces_are_planar(self, small_spec):
        spec = small_spec.model_copy(update={"n_objects": 12})
        layers = render_layers(spec, np.random.default_rng(5))
        rows, cols = np.indices(layers.depth.shape)
        for label, plane in enumerate(layers.planes):
            shown = layers.labels == label
            np.testing.assert_allclose(layers.depth[shown], plane.depth(rows[shown], cols[shown]), atol=1e-9)
        assert layers.planes[0].kind is ShapeKind.GROUND
        assert len(layers.planes) == 13

    def test_density(self):
        spec = SynthSpec(width=100, height=80, gt_density=0.3)
        scene = generate_scene(spec, np.random.default_rng(6))
        n = 100 * 80
        sd = np.sqrt(n * 0.3 * 0.7)
        assert abs(scene.valid_count - 0.3 * n) < 3 * sd

    def test_objects_get_distinct_colors(self, small_spec):
        spec = small_spec.model_copy(update={"n_objects": 6})
        rng_a, rng_b = np.random.default_rng(8), np.random.default_rng(8)
        layers = render_layers(spec, rng_a)
        scene = generate_scene(spec, rng_b)
        for label in np.unique(layers.labels):
            colors = np.unique(scene.rgb.pixels[layers.labels == label], axis=0)
            assert len(colors) == 1
        labels = np.unique(layers.labels)
        firsts = [tuple(scene.rgb.pixels[layers.labels == label][0]) for label in labels]
        assert len(set(firsts)) == len(labels)

    def test_no_rgb(self, small_spec):
        scene = generate_scene(small_spec.model_copy(update={"rgb_mode": RgbMode.NONE}), np.random.default_rng(0))
        assert scene.rgb is None


class TestCorpus:
    def test_ids_encode_drive(self):
        assert scene_id(7, 5) == "drive01_0007"

    def test_corpus_deterministic(self, small_spec):
        a, b = generate_corpus(small_spec, 3), generate_corpus(small_spec, 3)
        assert [s.id for s in a] == ["drive00_0000", "drive00_0001", "drive01_0002"]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.ground_truth.values, y.ground_truth.values)


class TestInterpolationOracle:
    def test_single_sample_constant(self):
        samples = SampleMap.empty(4, 5)
        samples.measure(np.array([2]), np.array([3]), np.array([7.5]), phase=1)
        assert np.all(interpolation_oracle(samples, (4, 5)).values == 7.5)

    def test_every_pixel_measured(self, rng):
        samples = SampleMap.empty(3, 3)
        rows, cols = np.indices((3, 3)).reshape(2, -1)
        depths = rng.uniform(1, 10, 9)
        samples.measure(rows, cols, depths, phase=1)
        np.testing.assert_array_equal(interpolation_oracle(samples).values.ravel(), depths)

    def test_two_samples_voronoi(self):
        samples = SampleMap.empty(5, 6)
        samples.measure(np.array([0, 4]), np.array([0, 5]), np.array([1.0, 2.0]), phase=1)
        dense = interpolation_oracle(samples).values
        for r in range(5):
            for c in range(6):
                d_a, d_b = r + c, abs(r - 4) + abs(c - 5)
                assert dense[r, c] == (1.0 if d_a <= d_b else 2.0)

    def test_empty(self):
        with pytest.raises(EmptySceneError):
            interpolation_oracle(SampleMap.empty(2, 2))

    def test_forest_beats_nearest_sample(self):
        spec = SynthSpec(width=64, height=48, n_objects=6, seed=11, scenes_per_drive=1)
        corpus = generate_corpus(spec, 9)
        config = RunConfig(
            scenario=Scenario.RGBD, trees_per_phase_forest=4, trees_final=20, pixels_per_image_subsample=500,
        )
        plan = SamplingPlan(budget=100, sampler=SamplerKind.RANDOM)
        pipeline = train_pipeline(corpus[:6], plan, config, np.random.default_rng(0), quiet=True)

        forest_pairs, nearest_pairs = [], []
        for scene in corpus[6:]:
            result = complete_scene(scene, pipeline, np.random.default_rng(1))
            forest_pairs.append((result.prediction, scene.ground_truth))
            nearest_pairs.append((interpolation_oracle(result.samples), scene.ground_truth))
        assert evaluate_pooled(forest_pairs).rmse < evaluate_pooled(nearest_pairs).rmse
