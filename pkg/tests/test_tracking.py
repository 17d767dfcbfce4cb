"""Tests for the tracking front end: initialization, frame tracking, relocalization and keyframes."""
import numpy as np
import pytest

from core.config import TrackerSection
from core.errors import NoCandidateError, NoConsensusError
from core.features import FeatureSet
from core.vocabulary import KeyframeDatabase, VocabularyTree, binarize
from core.world_map import WorldMap
from sim.simworld import SceneSpec, generate_scene, render_index, render_stereo, scene_descriptor_corpus, seed_map
from stages.tracking import Frame, Tracker, TrackingMode


def _frame(scene, index: int) -> Frame:
    return Frame(index, scene.timestamp(index), render_index(scene, index).features, scene.camera)


def _pose_error(frame: Frame, scene) -> float:
    return frame.pose.distance_to(scene.pose(frame.id).inverse())[0]


def _tracking_from(world: WorldMap, matcher, scene, kf_id: int = 0, **kwargs) -> Tracker:
    """A tracker already in Tracking mode at the frame of keyframe `kf_id`."""
    tracker = Tracker(world, matcher, **kwargs)
    kf = world.keyframes[kf_id]
    start = Frame(kf.frame_id, kf.timestamp, kf.features, kf.camera, pose=kf.pose, points=dict(kf.associations))
    tracker._accept_initialization(start, kf_id, None)
    return tracker


class TestMonocularInitialization:
    def test_two_view_seed(self, line_scene, matcher):
        tracker = Tracker(WorldMap(), matcher)
        frame_a, frame_b = _frame(line_scene, 0), _frame(line_scene, 3)

        world, pose_b = tracker.initialize_monocular(frame_a, frame_b)

        assert len(world.keyframes) == 2
        assert len(world.points) >= 150
        truth = line_scene.pose(3).inverse().compose(line_scene.pose(0))
        np.testing.assert_allclose(pose_b.R, truth.R, atol=1e-3)
        direction = pose_b.translation / np.linalg.norm(pose_b.translation)
        np.testing.assert_allclose(direction, truth.translation / np.linalg.norm(truth.translation), atol=1e-3)
        assert world.median_depth(0) == pytest.approx(1.0, abs=1e-9)
        assert tracker.mode == TrackingMode.TRACKING
        world.check_integrity()

    def test_process_waits_for_a_second_frame(self, line_scene, matcher):
        tracker = Tracker(WorldMap(), matcher)
        assert tracker.process(_frame(line_scene, 0)) == []
        assert tracker.mode == TrackingMode.UNINITIALIZED
        created = tracker.process(_frame(line_scene, 3))
        assert [kf.frame_id for kf in created] == [0, 3]
        assert tracker.transitions == [(TrackingMode.UNINITIALIZED, TrackingMode.TRACKING, 3)]

    def test_sparse_frames_are_skipped(self, line_scene, matcher):
        tracker = Tracker(WorldMap(), matcher)
        sparse = Frame(0, 0.0, render_index(line_scene, 0).features.subset(range(10)), line_scene.camera)
        assert tracker.process(sparse) == []
        assert tracker.state.init_frame is None


class TestStereoInitialization:
    def test_metric_points_from_one_pair(self, matcher):
        scene = generate_scene(SceneSpec(landmark_count=300, trajectory="line", frame_count=11,
                                         stereo_baseline=0.11), seed=8)
        left, right = render_stereo(scene, 0)
        frame = Frame(0, 0.0, left.features, scene.camera, right=right.features)
        tracker = Tracker(WorldMap(), matcher, stereo_baseline=0.11)

        world = tracker.initialize_stereo(frame)

        assert len(world.points) >= 100
        in_camera = scene.pose(0).inverse().transform(scene.landmarks)
        for feature_index, point_id in world.keyframes[0].associations.items():
            label = left.labels[feature_index]
            np.testing.assert_allclose(world.points[point_id].position, in_camera[label], atol=1e-6)
        assert tracker.mode == TrackingMode.TRACKING


class TestTracking:
    def test_follows_the_ground_truth(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene)

        for index in range(1, 11):
            frame = _frame(line_scene, index)
            tracker.process(frame)
            assert frame.pose is not None
            assert _pose_error(frame, line_scene) < 0.01
        assert tracker.mode == TrackingMode.TRACKING
        world.check_integrity()

    def test_velocity_is_set_after_consecutive_frames(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene)
        tracker.process(_frame(line_scene, 1))
        assert tracker.state.velocity is not None

    def test_reference_tracking_is_exact(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene)
        frame = _frame(line_scene, 2)
        pose, points = tracker.track_reference(frame)
        frame.pose = pose
        assert _pose_error(frame, line_scene) < 1e-6
        assert len(points) >= 20

    def test_projection_guided_matching(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene, ablations={"mt"})
        frame = _frame(line_scene, 1)
        pose, matches, _ = tracker.track_coarse(frame)
        frame.pose = pose
        assert matches.provenance == "prior"
        assert _pose_error(frame, line_scene) < 1e-6

    def test_local_map_adds_points(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0, 4])
        tracker = _tracking_from(world, matcher, line_scene, kf_id=1)
        frame = _frame(line_scene, 5)
        pose, points = tracker.track_reference(frame)
        subset = dict(list(points.items())[:30])
        refined_pose, refined = tracker.track_local_map(frame, pose, subset)
        assert len(refined) > len(subset)
        assert refined_pose.distance_to(line_scene.pose(5).inverse())[0] < 1e-6


class TestLostAndRelocalization:
    def test_empty_frames_lose_tracking(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene, config=TrackerSection(lost_after=2))
        empty = FeatureSet.empty()
        tracker.process(Frame(1, 0.05, empty, line_scene.camera))
        assert tracker.mode == TrackingMode.TRACKING
        tracker.process(Frame(2, 0.10, empty, line_scene.camera))
        assert tracker.mode == TrackingMode.LOST
        assert tracker.transitions[-1] == (TrackingMode.TRACKING, TrackingMode.LOST, 2)

        assert tracker.process(Frame(3, 0.15, empty, line_scene.camera)) == []
        assert tracker.mode == TrackingMode.LOST

        frame = _frame(line_scene, 4)
        tracker.process(frame)
        assert tracker.mode == TrackingMode.TRACKING
        assert tracker.transitions[-1] == (TrackingMode.LOST, TrackingMode.TRACKING, 4)
        assert _pose_error(frame, line_scene) < 1e-6

    def test_relocalize_without_vocabulary(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0, 5, 10])
        tracker = _tracking_from(world, matcher, line_scene, kf_id=2)
        frame = _frame(line_scene, 7)
        pose, _ = tracker.relocalize(frame)
        frame.pose = pose
        assert _pose_error(frame, line_scene) < 1e-6

    def test_relocalize_with_keyframe_database(self, line_scene, matcher):
        world, frame_of = seed_map(line_scene, [0, 10, 20, 30])
        corpus = np.vstack([binarize(d) for d in scene_descriptor_corpus(line_scene, range(0, 41, 4))])
        vocabulary = VocabularyTree.train(corpus, k=4, depth=3)
        database = KeyframeDatabase()
        for kf_id, kf in world.keyframes.items():
            database.add(kf_id, vocabulary.transform(kf.features))
        tracker = _tracking_from(world, matcher, line_scene, kf_id=0, vocabulary=vocabulary, database=database)

        frame = _frame(line_scene, 29)
        pose, _ = tracker.relocalize(frame)
        frame.pose = pose

        assert frame_of[tracker.state.reference_keyframe] in (20, 30)
        assert _pose_error(frame, line_scene) < 1e-6


    def test_empty_map_has_no_candidate(self, line_scene, matcher):
        tracker = Tracker(WorldMap(), matcher)
        with pytest.raises(NoCandidateError):
            tracker.relocalize(_frame(line_scene, 0))

    def test_every_candidate_is_tried_before_no_consensus(self, line_scene, matcher, monkeypatch):
        world, _ = seed_map(line_scene, [0, 5, 10])
        tracker = _tracking_from(world, matcher, line_scene, kf_id=2)
        elsewhere = generate_scene(SceneSpec(landmark_count=400, trajectory="line", frame_count=5), seed=11)
        frame = _frame(elsewhere, 0)
        tried = []
        match_sets = matcher.match_sets

        def counting(features_a, features_b):
            tried.append(features_a)
            return match_sets(features_a, features_b)

        monkeypatch.setattr(matcher, "match_sets", counting)
        with pytest.raises(NoConsensusError):
            tracker.relocalize(frame)
        assert len(tried) >= 2
        assert len(tried) == 1 + len(world.covisible(2, n=tracker.config.local_map_keyframes))
        assert tracker.state.reference_keyframe == 2

    def test_lost_tracker_stays_lost_without_consensus(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0, 5])
        tracker = _tracking_from(world, matcher, line_scene, config=TrackerSection(lost_after=1))
        tracker.process(Frame(1, 0.05, FeatureSet.empty(), line_scene.camera))
        assert tracker.mode == TrackingMode.LOST

        elsewhere = generate_scene(SceneSpec(landmark_count=400, trajectory="line", frame_count=5), seed=11)
        assert tracker.process(_frame(elsewhere, 0)) == []
        assert tracker.mode == TrackingMode.LOST


class TestKeyframeDecision:
    def test_ratio_and_gap(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene, config=TrackerSection(keyframe_ratio=0.8, max_frame_gap=30))
        reference = len(world.keyframes[0].associations)
        frame = _frame(line_scene, 1)
        assert not tracker.decide_keyframe(frame, reference)
        assert tracker.decide_keyframe(frame, int(0.5 * reference))
        late = Frame(30, 1.5, frame.features, frame.camera)
        assert tracker.decide_keyframe(late, reference)

    def test_promoted_frame_keeps_its_points(self, line_scene, matcher):
        world, _ = seed_map(line_scene, [0])
        tracker = _tracking_from(world, matcher, line_scene, config=TrackerSection(max_frame_gap=1))
        frame = _frame(line_scene, 1)
        created = tracker.process(frame)
        assert len(created) == 1
        assert set(created[0].associations.items()) == set(frame.points.items())
        assert tracker.state.reference_keyframe == created[0].id
        world.check_integrity()
