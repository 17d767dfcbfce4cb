"""Shared fixtures: the synthetic camera, small scenes and a brute-force matcher."""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from clients.matcher_client import BruteForceMatcher
from core.geometry import PinholeCamera
from core.matching import Matcher
from sim.simworld import SceneSpec, SyntheticScene, default_camera, generate_scene


@pytest.fixture
def camera() -> PinholeCamera:
    return default_camera()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def matcher(camera) -> Matcher:
    return Matcher(BruteForceMatcher(), camera)


@pytest.fixture
def circle_scene() -> SyntheticScene:
    """60 frames on a radius-5 circle around 300 landmarks."""
    return generate_scene(SceneSpec(landmark_count=300, trajectory="circle", frame_count=60), seed=3)


@pytest.fixture
def line_scene() -> SyntheticScene:
    """41 frames, 0.1 m apart, sideways along a 4 m line facing a landmark slab."""
    return generate_scene(SceneSpec(landmark_count=400, trajectory="line", frame_count=41, length=4.0), seed=5)
