"""Shared fixtures for adls tests."""

import numpy as np
import pytest

from adls.config import RunConfig
from adls.models import DepthMap, RgbImage, Scenario, Scene
from adls.synth import SynthSpec, generate_corpus, generate_scene


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec() -> SynthSpec:
    return SynthSpec(width=32, height=24, n_objects=3, gt_density=0.6, seed=5, scenes_per_drive=2)


@pytest.fixture
def synthetic_scene(small_spec) -> Scene:
    return generate_scene(small_spec, np.random.default_rng(7), "drive00_0000")


@pytest.fixture
def synthetic_corpus(small_spec) -> list[Scene]:
    return generate_corpus(small_spec, 6)


@pytest.fixture
def tiny_config() -> RunConfig:
    """Small forests so the pipeline tests stay fast."""
    return RunConfig(
        scenario=Scenario.RGBD,
        trees_per_phase_forest=4,
        trees_final=6,
        pixels_per_image_subsample=200,
    )


@pytest.fixture
def gradient_scene() -> Scene:
    """8x6 scene: depth grows with the column, every pixel valid, two color halves."""
    cols = np.indices((6, 8))[1]
    depth = 5.0 + cols.astype(np.float64)
    pixels = np.zeros((6, 8, 3), dtype=np.uint8)
    pixels[:, :4] = (200, 30, 30)
    pixels[:, 4:] = (30, 30, 200)
    return Scene.create("grad_0", DepthMap.dense(depth), RgbImage(pixels=pixels))
