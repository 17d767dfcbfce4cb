"""Tests for map bookkeeping: observations, covisibility weights and snapshots."""
import numpy as np
import pytest

from core.errors import SlamError
from core.features import FeatureSet
from core.geometry import PoseSE3
from core.world_map import WorldMap, representative_descriptor, shared_observation_pairs
from sim.simworld import seed_map


def _features(rng: np.random.Generator, n: int = 10) -> FeatureSet:
    descriptors = rng.normal(size=(n, 32))
    descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)
    return FeatureSet(rng.uniform([0, 0], [639, 479], size=(n, 2)), rng.uniform(0.2, 0.9, n), descriptors)


@pytest.fixture
def small_world(camera, rng) -> WorldMap:
    """Three keyframes; points 0-4 seen by kf 0 and 1, points 5-7 by all three."""
    world = WorldMap()
    for k in range(3):
        world.add_keyframe(0.1 * k, PoseSE3.identity(), _features(rng), camera, frame_id=k)
    for p in range(8):
        point = world.add_point(rng.normal(size=3), np.zeros(32))
        observers = (0, 1) if p < 5 else (0, 1, 2)
        for kf_id in observers:
            world.add_observation(point.id, kf_id, p)
    return world


class TestObservations:
    def test_covisibility_counts_shared_points(self, small_world):
        assert small_world.weight(0, 1) == 8
        assert small_world.weight(0, 2) == 3
        assert small_world.weight(1, 2) == 3
        assert small_world.covisible(0) == [1, 2]
        assert small_world.covisible(2, min_weight=4) == []
        small_world.check_integrity()

    def test_duplicate_observation_is_refused(self, small_world):
        assert not small_world.add_observation(0, 0, 9)
        assert not small_world.add_observation(7, 2, 0)

    def test_point_score_is_mean_confidence(self, small_world):
        point = small_world.points[6]
        expected = np.mean([small_world.keyframes[k].features.scores[6] for k in (0, 1, 2)])
        assert point.score == pytest.approx(expected)

    def test_descriptor_is_one_of_the_observed(self, small_world):
        point = small_world.points[6]
        observed = [small_world.keyframes[k].features.descriptors[6] for k in (0, 1, 2)]
        assert any(np.array_equal(point.descriptor, d) for d in observed)

    def test_remove_observation_updates_weights(self, small_world):
        small_world.remove_observation(6, 2)
        assert small_world.weight(0, 2) == 2
        assert 6 not in small_world.keyframes[2].associations.values()
        small_world.check_integrity()

    def test_last_observation_drops_the_point(self, small_world):
        small_world.remove_observation(0, 0)
        small_world.remove_observation(0, 1)
        assert 0 not in small_world.points
        small_world.check_integrity()

    def test_replace_point_moves_observations(self, camera, rng):
        world = WorldMap()
        for k in range(2):
            world.add_keyframe(float(k), PoseSE3.identity(), _features(rng), camera)
        old = world.add_point(np.zeros(3), np.zeros(32))
        new = world.add_point(np.ones(3), np.zeros(32))
        world.add_observation(old.id, 0, 0)
        world.add_observation(new.id, 1, 1)

        world.replace_point(old.id, new.id)

        assert old.id not in world.points
        assert world.points[new.id].observations == {0: 0, 1: 1}
        assert world.weight(0, 1) == 1
        world.check_integrity()

    def test_non_finite_point_is_rejected(self):
        with pytest.raises(SlamError):
            WorldMap().add_point(np.array([0.0, np.nan, 1.0]), np.zeros(4))


class TestKeyframes:
    def test_first_keyframe_is_origin(self, small_world):
        assert small_world.origin_kf == 0

    def test_remove_keyframe_keeps_integrity(self, small_world):
        small_world.remove_keyframe(2)
        assert 2 not in small_world.keyframes
        assert small_world.weight(0, 1) == 8
        assert all(2 not in p.observations for p in small_world.points.values())
        small_world.check_integrity()

    def test_integrity_detects_corrupted_weight(self, small_world):
        small_world.covisibility[0][1] += 1
        with pytest.raises(SlamError):
            small_world.check_integrity()

    def test_integrity_detects_dangling_association(self, small_world):
        small_world.keyframes[2].associations[9] = 12345
        with pytest.raises(SlamError):
            small_world.check_integrity()

    def test_points_of_and_shared_pairs(self, small_world):
        assert small_world.points_of([2]) == {5, 6, 7}
        pairs = shared_observation_pairs(small_world, 1, 2)
        assert sorted(p for p, _, _ in pairs) == [5, 6, 7]


class TestSeededMap:
    def test_covisibility_matches_recount(self, circle_scene):
        world, frame_of = seed_map(circle_scene, [0, 5, 10, 15])
        assert len(world.keyframes) == 4
        assert sorted(frame_of.values()) == [0, 5, 10, 15]
        world.check_integrity()
        for kf_id in world.keyframes:
            assert world.covisible(kf_id)

    def test_median_depth_of_circle_views(self, circle_scene):
        world, _ = seed_map(circle_scene, [0])
        assert 3.0 < world.median_depth(0) < 7.0

    def test_snapshot_lists_landmarks_then_keyframes(self, circle_scene):
        world, _ = seed_map(circle_scene, [0, 5])
        lines = world.snapshot_lines()
        assert lines[0].startswith("# landmarks")
        header = lines.index("# keyframes: id timestamp tx ty tz qx qy qz qw")
        assert header == len(world.points) + 1
        assert len(lines) == header + 1 + len(world.keyframes)
        kf_line = lines[header + 1].split()
        np.testing.assert_allclose([float(v) for v in kf_line[2:5]], circle_scene.pose(0).translation, atol=1e-8)

    def test_summary(self, circle_scene):
        world, _ = seed_map(circle_scene, [0, 5])
        summary = world.get_summary()
        assert "Keyframes: 2" in summary
        assert f"Map points: {len(world.points)}" in summary


class TestRepresentativeDescriptor:
    def test_picks_the_medoid(self):
        descriptors = np.array([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8], [0.0, 1.0]])
        chosen = representative_descriptor(descriptors)
        assert any(np.array_equal(chosen, d) for d in descriptors[1:3])
