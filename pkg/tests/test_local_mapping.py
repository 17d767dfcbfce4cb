"""Tests for map point creation, culling and the local mapping stage."""
import numpy as np
import pytest

from core.config import MappingSection
from core.world_map import WorldMap
from sim.simworld import SceneSpec, generate_scene, render_index, render_stereo, seed_map
from stages.local_mapping import LocalMapper, MappingReport, triangulate_stereo
from stages.timing import StageTimer
from stages.tracking import Frame, Tracker


def _landmark(scene, world, kf_id: int, feature_index: int) -> np.ndarray:
    frame = world.keyframes[kf_id].frame_id
    return scene.landmarks[render_index(scene, frame).labels[feature_index]]


@pytest.fixture
def thinned(line_scene):
    """Two keyframes 0.3 m apart with 100 of their shared points removed."""
    world, _ = seed_map(line_scene, [0, 3])
    shared = sorted(set(world.keyframes[0].point_ids()) & set(world.keyframes[1].point_ids()))
    for point_id in shared[:100]:
        world.remove_point(point_id)
    return world


class TestCreateMapPoints:
    def test_recreates_removed_points(self, line_scene, thinned, matcher):
        mapper = LocalMapper(thinned, matcher)
        created = mapper.create_map_points(1, neighbours=[0])

        assert len(created) >= 80
        for point_id in created:
            point = thinned.points[point_id]
            assert set(point.observations) == {0, 1}
            truth = _landmark(line_scene, thinned, 1, point.observations[1])
            assert np.linalg.norm(point.position - truth) < 0.01
        thinned.check_integrity()

    def test_default_neighbours_are_covisible_keyframes(self, thinned, matcher):
        assert len(LocalMapper(thinned, matcher).create_map_points(1)) >= 80

    def test_projection_window_ablation(self, thinned, matcher):
        mapper = LocalMapper(thinned, matcher, ablations={"lm"})
        assert len(mapper.create_map_points(1, neighbours=[0])) >= 50

    def test_small_baseline_is_skipped(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0, 1])
        for point_id in list(world.keyframes[1].point_ids())[:50]:
            world.remove_point(point_id)
        mapper = LocalMapper(world, matcher, MappingSection(min_baseline_ratio=0.5))
        assert mapper.create_map_points(1, neighbours=[0]) == []


class TestStereoPoints:
    def test_candidates_restrict_the_left_features(self, matcher):
        scene = generate_scene(SceneSpec(landmark_count=200, trajectory="line", frame_count=5,
                                         stereo_baseline=0.11), seed=6)
        left, right = render_stereo(scene, 0)
        pose = scene.pose(0).inverse()
        created = triangulate_stereo(matcher, scene.camera, pose, left.features, right.features, 0.11,
                                     candidates=range(20))
        assert created
        for feature_index, X in created:
            assert feature_index < 20
            np.testing.assert_allclose(X, scene.landmarks[left.labels[feature_index]], atol=1e-6)


class TestCulling:
    def test_points_are_culled_after_the_grace_period(self, thinned, matcher):
        mapper = LocalMapper(thinned, matcher, MappingSection(cull_grace=0, cull_min_observers=3))
        created = mapper.create_map_points(1, neighbours=[0])
        removed = mapper.cull_points()
        assert sorted(removed) == sorted(created)
        assert not set(created) & set(thinned.points)
        thinned.check_integrity()

    def test_grace_period_protects_new_points(self, thinned, matcher):
        mapper = LocalMapper(thinned, matcher, MappingSection(cull_grace=3, cull_min_observers=3))
        created = mapper.create_map_points(1, neighbours=[0])
        assert mapper.cull_points() == []
        assert set(created) <= set(thinned.points)

    def test_initialization_points_are_culled_too(self, line_scene, matcher):
        frames = [Frame(i, line_scene.timestamp(i), render_index(line_scene, i).features, line_scene.camera)
                  for i in (0, 3)]
        world, _ = Tracker(WorldMap(), matcher).initialize_monocular(*frames)
        orphan = world.keyframes[0].point_ids()[0]
        world.remove_observation(orphan, 1)
        mapper = LocalMapper(world, matcher, MappingSection(cull_grace=0, cull_min_observers=2))

        assert orphan in mapper.register_points(0)
        assert mapper.register_points(0) == []
        report = mapper.process(1)

        assert orphan not in world.points
        assert report.culled_points >= 1
        world.check_integrity()

    def test_redundant_keyframes_are_removed(self):
        scene = generate_scene(SceneSpec(landmark_count=400, trajectory="line", frame_count=401, length=4.0), seed=5)
        world, _ = seed_map(scene, [0, 1, 2, 3, 4])
        dropped = []
        mapper = LocalMapper(world, matcher=None, on_keyframe_removed=dropped.append)

        removed = mapper.cull_keyframes(4)

        assert removed
        assert set(removed) <= {1, 2, 3}
        assert dropped == removed
        assert 0 in world.keyframes and 4 in world.keyframes
        world.check_integrity()

    def test_cull_returns_points_and_keyframes(self, thinned, matcher):
        mapper = LocalMapper(thinned, matcher)
        points, keyframes = mapper.cull(kf_id=99)
        assert points == [] and keyframes == []


class TestProcess:
    def test_maps_a_keyframe_and_times_it(self, thinned, matcher):
        timer = StageTimer()
        mapper = LocalMapper(thinned, matcher, timer=timer)

        report = mapper.process(1)

        assert isinstance(report, MappingReport)
        assert report.keyframe == 1
        assert report.new_points >= 80
        assert report.bundle_adjustment is not None
        assert len(timer.samples["LM"]) == 1
        assert mapper.reports == [report]
        thinned.check_integrity()

    def test_removed_keyframe_is_a_no_op(self, thinned, matcher):
        report = LocalMapper(thinned, matcher).process(42)
        assert report.new_points == 0
        assert report.bundle_adjustment is None
