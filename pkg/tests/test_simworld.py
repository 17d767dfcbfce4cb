"""Tests for synthetic scene generation, rendering, challenges and export."""
import numpy as np
import pytest

from core.errors import RejectionBudgetExceededError, SceneError
from core.features import AdaptiveThresholdState, FeatureSet, extract
from core.geometry import PoseSim3
from sim.simworld import (
    MAX_DESCRIPTOR_COSINE,
    SceneSpec,
    SyntheticDetector,
    default_camera,
    export_dataset,
    generate_scene,
    label_correspondences,
    render_frame,
    render_index,
    render_stereo,
    right_camera_center_pose,
    scene_descriptor_corpus,
    script_challenge,
    seed_map,
)
from stages.local_mapping import right_camera_pose


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(landmark_count=500, frame_count=40), seed=11)


class TestGenerateScene:
    def test_descriptors_are_well_separated(self, scene):
        cosine = scene.descriptors @ scene.descriptors.T
        np.fill_diagonal(cosine, -1.0)
        assert cosine.max() < MAX_DESCRIPTOR_COSINE
        np.testing.assert_allclose(np.linalg.norm(scene.descriptors, axis=1), 1.0)

    def test_same_seed_same_scene(self, scene):
        again = generate_scene(SceneSpec(landmark_count=500, frame_count=40), seed=11)
        np.testing.assert_array_equal(again.landmarks, scene.landmarks)
        np.testing.assert_array_equal(again.descriptors, scene.descriptors)
        np.testing.assert_array_equal(render_index(again, 7).features.keypoints,
                                      render_index(scene, 7).features.keypoints)

    def test_no_landmarks(self):
        with pytest.raises(SceneError):
            generate_scene(SceneSpec(landmark_count=0))

    def test_unknown_trajectory(self):
        with pytest.raises(SceneError):
            generate_scene(SceneSpec(trajectory="figure-eight"))

    def test_descriptor_budget(self):
        with pytest.raises(RejectionBudgetExceededError):
            generate_scene(SceneSpec(landmark_count=100, descriptor_dim=2))

    def test_circle_cameras_look_at_the_origin(self, scene):
        for index in (0, 13, 29):
            pose = scene.pose(index)
            assert np.linalg.norm(pose.translation) == pytest.approx(5.0)
            np.testing.assert_allclose(pose.R[:, 2], -pose.translation / 5.0, atol=1e-12)

    def test_line_trajectory(self, line_scene):
        np.testing.assert_allclose(line_scene.pose(0).translation, 0.0, atol=1e-12)
        np.testing.assert_allclose(line_scene.pose(len(line_scene) - 1).translation, [4.0, 0.0, 0.0])
        np.testing.assert_allclose(line_scene.pose(10).R[:, 2], [0.0, 1.0, 0.0], atol=1e-12)

    def test_square_loop_returns_to_start(self):
        loop = generate_scene(SceneSpec(landmark_count=50, trajectory="square-loop", frame_count=80), seed=1)
        assert np.linalg.norm(loop.pose(79).translation - loop.pose(0).translation) < 1.0
        assert np.max(np.abs(loop.trajectory.positions()[:, :2])) == pytest.approx(5.0)


class TestRender:
    def test_noiseless_keypoints_are_projections(self, scene, camera):
        view = render_index(scene, 5)
        pose = scene.pose(5).inverse()
        expected = (camera.K @ pose.transform(scene.landmarks[view.labels]).T).T
        np.testing.assert_allclose(view.features.keypoints, expected[:, :2] / expected[:, 2:], atol=1e-9)

    def test_scores_follow_the_confidence_model(self, scene):
        scores = np.concatenate([render_index(scene, i).features.scores for i in range(5)])
        assert scores.mean() == pytest.approx(0.7, abs=0.01)
        assert scores.std() == pytest.approx(0.1, abs=0.01)

    def test_outliers_are_labelled(self):
        noisy = generate_scene(SceneSpec(landmark_count=200, frame_count=5, outlier_rate=0.1), seed=3)
        view = render_index(noisy, 0)
        inliers = int(np.sum(view.labels >= 0))
        assert int(np.sum(view.labels < 0)) == round(0.1 * inliers)

    def test_stereo_disparity(self):
        stereo = generate_scene(SceneSpec(landmark_count=200, frame_count=5, stereo_baseline=0.11), seed=3)
        left, right = render_stereo(stereo, 2)
        pairs = label_correspondences(left.labels, right.labels)
        assert len(pairs) > 100
        depths = stereo.pose(2).inverse().transform(stereo.landmarks[left.labels])[:, 2]
        for i, j in pairs.items():
            disparity = left.features.keypoints[i, 0] - right.features.keypoints[j, 0]
            assert disparity == pytest.approx(400.0 * 0.11 / depths[i], abs=1e-9)
            assert left.features.keypoints[i, 1] == pytest.approx(right.features.keypoints[j, 1], abs=1e-9)

    def test_right_camera_centre_and_map_pose_agree(self, scene):
        left = scene.pose(3)
        centre = right_camera_center_pose(left, 0.11)
        np.testing.assert_allclose(centre.translation, left.translation + 0.11 * left.R[:, 0], atol=1e-12)
        np.testing.assert_allclose(right_camera_pose(left.inverse(), 0.11).matrix(), centre.inverse().matrix(),
                                   atol=1e-12)

    def test_mono_scene_has_no_right_camera(self, scene):
        with pytest.raises(SceneError):
            render_stereo(scene, 0)


class TestChallenges:
    def test_lowlight_dims_scores(self, scene):
        dark = script_challenge(scene, "lowlight", 0, 10)
        assert render_index(dark, 3).features.scores.mean() == pytest.approx(0.28, abs=0.02)
        np.testing.assert_array_equal(render_index(dark, 12).features.scores,
                                      render_index(scene, 12).features.scores)

    def test_weak_texture_keeps_a_fraction(self, scene):
        weak = script_challenge(scene, "weak-texture", 0, 10)
        full = len(render_index(scene, 4).features)
        kept = len(render_index(weak, 4).features)
        assert 0.2 * full <= kept <= 0.4 * full

    def test_shake_moves_keypoints_only_inside_the_interval(self, scene):
        shaken = script_challenge(scene, "shake", 5, 10, strength=5.0)
        moved, still = render_index(shaken, 6), render_index(scene, 6)
        common = label_correspondences(moved.labels, still.labels)
        shifts = [np.linalg.norm(moved.features.keypoints[i] - still.features.keypoints[j]) for i, j in common.items()]
        assert np.median(shifts) > 0.5
        np.testing.assert_array_equal(render_index(shaken, 10).features.keypoints,
                                      render_index(scene, 10).features.keypoints)

    def test_empty_interval_is_a_no_op(self, scene):
        assert script_challenge(scene, "lowlight", 4, 4) is scene

    def test_bad_interval_or_kind(self, scene):
        with pytest.raises(SceneError):
            script_challenge(scene, "lowlight", 10, 5)
        with pytest.raises(SceneError):
            script_challenge(scene, "lowlight", 0, 41)
        with pytest.raises(SceneError):
            script_challenge(scene, "fog", 0, 5)


class TestSyntheticDetector:
    def test_extract_recovers_detections(self, camera):
        detections = FeatureSet(np.array([[100.3, 200.7], [500.0, 60.25]]), np.array([0.9, 0.8]),
                                np.eye(2, 256))
        field = SyntheticDetector(camera).infer(detections)
        assert field.width == 400
        assert field.height == 300

        features = extract(field, camera, AdaptiveThresholdState(), nms_radius=0, fixed_threshold=0.3)

        np.testing.assert_allclose(features.keypoints, detections.keypoints, atol=1e-9)
        np.testing.assert_allclose(features.scores, detections.scores)
        np.testing.assert_allclose(features.descriptors, detections.descriptors)

    def test_background_stays_below_its_bound(self, camera):
        field = SyntheticDetector(camera, background=0.05).infer(FeatureSet.empty())
        assert field.scores.max() < 0.05


class TestSeedMap:
    def test_one_point_per_landmark_seen(self, scene):
        world, frame_of = seed_map(scene, [0, 2, 4])
        seen = set()
        for frame in frame_of.values():
            seen |= set(render_index(scene, frame).labels.tolist())
        assert len(world.points) == len(seen)
        world.check_integrity()

    def test_drifted_keyframes_get_duplicate_points(self, scene):
        drift = PoseSim3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.4, 0.0, 0.0]), 1.05)
        plain, _ = seed_map(scene, [0, 2])
        drifted, _ = seed_map(scene, [0, 2], drift=drift, drift_from=1)
        assert len(drifted.points) > len(plain.points)
        drifted.check_integrity()
        assert drifted.weight(0, 1) == 0


class TestExport:
    def test_exports_are_byte_identical(self, tmp_path):
        small = generate_scene(SceneSpec(landmark_count=60, frame_count=6, pixel_noise=0.5), seed=9)
        a = export_dataset(small, tmp_path / "a")
        b = export_dataset(generate_scene(SceneSpec(landmark_count=60, frame_count=6, pixel_noise=0.5), seed=9),
                           tmp_path / "b")
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        assert any(p.name == "scene.yaml" for p in files_a)
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_corpus_has_one_document_per_frame(self, scene):
        corpus = scene_descriptor_corpus(scene, range(0, 10, 2))
        assert len(corpus) == 5
        assert corpus[0].shape[1] == 256

    def test_render_frame_accepts_any_pose(self, scene):
        view = render_frame(scene, scene.pose(0), frame_index=0)
        np.testing.assert_array_equal(view.labels, render_index(scene, 0).labels)
