"""Tests for the adaptive threshold, score filtering, rescaling and extraction."""
import numpy as np
import pytest
from scipy.special import expit

from core.errors import BackendError, SlamError
from core.features import (
    AdaptiveThresholdState,
    DenseDescriptorGrid,
    FeatureSet,
    ScoreField,
    SparseDescriptorGrid,
    compute_adaptive_threshold,
    extract,
    filter_scores,
    rescale_keypoints,
)
from sim.simworld import SyntheticDetector, render_index


def _field(scores: np.ndarray, dim: int = 8) -> ScoreField:
    return ScoreField(scores, SparseDescriptorGrid({}, dim))


@pytest.fixture
def spike_field(rng) -> ScoreField:
    """20 spikes of 0.9 on a flat 0.01 background, each with its own unit descriptor."""
    scores = np.full((300, 400), 0.01)
    cells = {}
    for k in range(20):
        row, col = 30 + 60 * (k // 5), 40 + 80 * (k % 5)
        scores[row, col] = 0.9
        descriptor = rng.normal(size=256)
        cells[(row, col)] = descriptor / np.linalg.norm(descriptor)
    return ScoreField(scores, SparseDescriptorGrid(cells, 256))


class TestAdaptiveThreshold:
    def test_matches_closed_form(self, rng):
        field = _field(rng.uniform(0.0, 1.0, size=(30, 40)))
        state = AdaptiveThresholdState(mu1=0.1, mu2=0.01, last_match_count=120)
        scores = field.scores
        expected = scores.mean() + np.sqrt(scores.var()) / 2 + 0.1 * expit(0.01 * 120)
        assert compute_adaptive_threshold(field, state) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("matches", [0, 1, 10, 100, 1000])
    def test_stays_within_bounds(self, rng, matches):
        field = _field(rng.uniform(0.0, 0.5, size=(20, 20)))
        state = AdaptiveThresholdState(mu1=0.2, mu2=0.01, last_match_count=matches)
        base = field.scores.mean() + np.sqrt(field.scores.var()) / 2
        threshold = compute_adaptive_threshold(field, state)
        assert base + 0.1 - 1e-12 <= threshold <= base + 0.2 + 1e-12

    def test_monotone_in_match_count(self, rng):
        field = _field(rng.uniform(0.0, 1.0, size=(20, 20)))
        values = [compute_adaptive_threshold(field, AdaptiveThresholdState(last_match_count=m))
                  for m in range(0, 500, 25)]
        assert np.all(np.diff(values) >= 0.0)

    def test_saturates_for_many_matches(self, rng):
        field = _field(rng.uniform(0.0, 1.0, size=(20, 20)))
        state = AdaptiveThresholdState(mu1=0.2, mu2=0.01, last_match_count=100000)
        base = field.scores.mean() + np.sqrt(field.scores.var()) / 2
        assert compute_adaptive_threshold(field, state) == pytest.approx(base + 0.2, abs=1e-9)

    def test_rejects_invalid_parameters(self):
        with pytest.raises(SlamError):
            AdaptiveThresholdState(mu1=-0.1)
        with pytest.raises(SlamError):
            AdaptiveThresholdState(mu2=0.0)


class TestFilterScores:
    def test_without_nms_keeps_cells_strictly_above(self, rng):
        field = _field(rng.uniform(0.0, 1.0, size=(30, 30)))
        threshold = float(np.median(field.scores))
        rows, cols, values = filter_scores(field, threshold, nms_radius=0)
        assert len(rows) == int((field.scores > threshold).sum())
        assert np.all(values > threshold)
        assert np.all(np.diff(values) <= 0.0)

    def test_nms_keeps_the_stronger_neighbour(self):
        scores = np.zeros((20, 20))
        scores[10, 10] = 0.9
        scores[10, 12] = 0.8
        scores[2, 2] = 0.7
        rows, cols, values = filter_scores(_field(scores), 0.1, nms_radius=4)
        assert list(zip(rows, cols)) == [(10, 10), (2, 2)]
        np.testing.assert_allclose(values, [0.9, 0.7])

    def test_rejects_non_finite_threshold(self):
        with pytest.raises(SlamError):
            filter_scores(_field(np.zeros((4, 4))), float("nan"))


class TestScoreField:
    def test_rejects_scores_outside_unit_interval(self):
        with pytest.raises(SlamError):
            _field(np.full((4, 4), 1.5))

    def test_rejects_empty_grid(self):
        with pytest.raises(SlamError):
            _field(np.zeros((0, 0)))


class TestRescale:
    def test_scales_each_axis(self, camera):
        out = rescale_keypoints(np.array([[100.0, 150.0]]), camera, (400, 300))
        np.testing.assert_allclose(out, [[160.0, 240.0]])

    def test_round_trip(self, camera, rng):
        keypoints = rng.uniform([0, 0], [399, 299], size=(100, 2))
        full = rescale_keypoints(keypoints, camera, (400, 300))
        back = rescale_keypoints(full, camera.scaled(400, 300), (640, 480))
        np.testing.assert_allclose(back, keypoints, atol=1e-9)

    def test_clamps_to_image(self, camera):
        out = rescale_keypoints(np.array([[-3.0, 500.0]]), camera, (400, 300))
        np.testing.assert_allclose(out, [[0.0, 479.0]])


class TestExtract:
    def test_spikes_on_flat_background(self, camera, spike_field):
        features = extract(spike_field, camera, AdaptiveThresholdState())

        assert len(features) == 20
        np.testing.assert_allclose(features.scores, 0.9)
        np.testing.assert_allclose(np.linalg.norm(features.descriptors, axis=1), 1.0)
        expected = {(1.6 * (40 + 80 * (k % 5)), 1.6 * (30 + 60 * (k // 5))) for k in range(20)}
        found = {(round(x, 6), round(y, 6)) for x, y in features.keypoints}
        assert found == {(round(x, 6), round(y, 6)) for x, y in expected}

    def test_keypoints_inside_image(self, camera, rng):
        scores = rng.uniform(0.0, 1.0, size=(30, 40))
        grid = DenseDescriptorGrid(rng.normal(size=(4, 5, 16)), stride=8)
        features = extract(ScoreField(scores, grid), camera, AdaptiveThresholdState(), nms_radius=1)
        assert len(features) > 0
        assert camera.in_image(features.keypoints).all()
        assert np.all(features.scores > features.threshold)

    def test_fixed_threshold_overrides_adaptive(self, camera, spike_field):
        features = extract(spike_field, camera, AdaptiveThresholdState(), fixed_threshold=0.95)
        assert len(features) == 0
        assert features.threshold == 0.95

    def test_image_without_backend(self, camera):
        with pytest.raises(BackendError):
            extract(np.zeros((480, 640), dtype=np.uint8), camera, AdaptiveThresholdState())

    def test_synthetic_detector_keeps_exact_positions(self, camera, circle_scene):
        view = render_index(circle_scene, 0)
        detector = SyntheticDetector(camera, seed=0)
        features = extract(view.features, camera, AdaptiveThresholdState(), detector)

        assert len(features) >= 0.6 * len(view.features)
        interior = (features.keypoints[:, 0] < camera.width - 1) & (features.keypoints[:, 1] < camera.height - 1)
        for keypoint in features.keypoints[interior]:
            assert np.min(np.linalg.norm(view.features.keypoints - keypoint, axis=1)) < 1e-6


class TestFeatureSet:
    def test_rejects_mismatched_lengths(self):
        with pytest.raises(SlamError):
            FeatureSet(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 8)))

    def test_subset_and_empty(self, rng):
        features = FeatureSet(rng.uniform(size=(5, 2)), rng.uniform(size=5), rng.normal(size=(5, 8)))
        part = features.subset([0, 3])
        assert len(part) == 2
        np.testing.assert_array_equal(part.keypoints, features.keypoints[[0, 3]])
        assert len(FeatureSet.empty(8)) == 0
        assert FeatureSet.empty(8).dim == 8
