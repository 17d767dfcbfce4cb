"""Tests for the ONNX detector and matcher clients and backend selection."""
import os

import numpy as np
import pytest

from clients.detector_client import NeuralDetector
from clients.matcher_client import BruteForceMatcher, NeuralMatcher
from core.config import RunConfig
from core.errors import BackendError
from sim.simworld import SyntheticDetector
from stages.system import make_backends

DETECTOR_MODEL = os.environ.get("SLAM_DETECTOR_MODEL")
MATCHER_MODEL = os.environ.get("SLAM_MATCHER_MODEL")


class FakeSession:
    def __init__(self, outputs):
        self.outputs = outputs
        self.feeds = None

    def run(self, names, feeds):
        self.feeds = feeds
        return self.outputs


def _detector(stride: int = 8) -> NeuralDetector:
    detector = NeuralDetector.__new__(NeuralDetector)
    detector.descriptor_stride = stride
    return detector


def _matcher(outputs) -> NeuralMatcher:
    matcher = NeuralMatcher.__new__(NeuralMatcher)
    matcher.session = FakeSession(outputs)
    matcher.input_names = ["kpts0", "kpts1", "desc0", "desc1"]
    return matcher


class TestMissingModels:
    def test_detector(self, tmp_path):
        with pytest.raises(BackendError):
            NeuralDetector(str(tmp_path / "superpoint.onnx"))

    def test_matcher(self, tmp_path):
        with pytest.raises(BackendError):
            NeuralMatcher(str(tmp_path / "lightglue.onnx"))


class TestDetectorOutputs:
    def test_cell_logits_become_a_dense_map(self):
        logits = np.zeros((1, 65, 2, 3))
        logits[0, 64] = 5.0  # dustbin wins everywhere
        logits[0, 8 * 3 + 5, 1, 2] = 20.0
        dense = _detector()._dense_scores(logits, (16, 24))
        assert dense.shape == (16, 24)
        assert dense[8 + 3, 16 + 5] == pytest.approx(1.0, abs=1e-6)
        assert dense[0, 0] < 0.01

    def test_dense_map_passes_through(self):
        raw = np.random.default_rng(0).uniform(size=(1, 16, 24))
        np.testing.assert_array_equal(_detector()._dense_scores(raw, (16, 24)), raw[0])

    def test_shape_mismatch(self):
        with pytest.raises(BackendError):
            _detector()._dense_scores(np.zeros((1, 10, 10)), (16, 24))

    def test_infer_builds_a_score_field(self):
        detector = _detector()
        scores = np.full((1, 16, 24), 0.2)
        descriptors = np.ones((1, 4, 2, 3))
        detector.session = FakeSession([scores, descriptors])
        detector.input_name = "image"
        field = detector.infer(np.zeros((16, 24)))
        assert field.width == 24 and field.height == 16
        assert field.descriptors.dim == 4
        assert detector.session.feeds["image"].shape == (1, 1, 16, 24)


class TestMatcherOutputs:
    def test_dustbins_are_dropped(self):
        log_scores = np.full((1, 3, 4), -50.0)
        log_scores[0, 0, 1] = 0.0
        log_scores[0, 1, 0] = np.log(0.5)
        P = _matcher([log_scores]).match(np.zeros((2, 2)), np.zeros((2, 8)), np.zeros((3, 2)), np.zeros((3, 8)))
        assert P.shape == (2, 3)
        assert P[0, 1] == pytest.approx(1.0)
        assert P[1, 0] == pytest.approx(0.5)

    def test_rows_and_columns_stay_below_one(self):
        log_scores = np.log(np.full((1, 2, 2), 0.9))
        P = _matcher([log_scores]).match(np.zeros((2, 2)), np.zeros((2, 8)), np.zeros((2, 2)), np.zeros((2, 8)))
        assert np.all(P.sum(axis=0) <= 1.0 + 1e-12)
        assert np.all(P.sum(axis=1) <= 1.0 + 1e-12)

    def test_wrong_output_shape(self):
        with pytest.raises(BackendError):
            _matcher([np.zeros((1, 5, 5))]).match(np.zeros((2, 2)), np.zeros((2, 8)),
                                                  np.zeros((3, 2)), np.zeros((3, 8)))


class TestBackendSelection:
    def test_synthetic_backend_by_default(self, camera):
        detector, matcher = make_backends(RunConfig(), camera)
        assert isinstance(detector, SyntheticDetector)
        assert isinstance(matcher, BruteForceMatcher)
        assert detector.width == 400 and detector.height == 300

    def test_neural_backend_needs_models(self, camera, tmp_path):
        config = RunConfig()
        config.run.backend = "neural"
        config.run.detector_model = str(tmp_path / "missing.onnx")
        with pytest.raises(BackendError):
            make_backends(config, camera)


@pytest.mark.skipif(not (DETECTOR_MODEL and MATCHER_MODEL),
                    reason="set SLAM_DETECTOR_MODEL and SLAM_MATCHER_MODEL to run against real ONNX graphs")
class TestOnnxModels:
    def test_detect_and_match_a_shifted_image(self, camera):
        from core.features import AdaptiveThresholdState, extract

        rng = np.random.default_rng(0)
        image = (rng.uniform(size=(480, 640)) * 255).astype(np.uint8)
        shifted = np.roll(image, 8, axis=1)
        detector = NeuralDetector(DETECTOR_MODEL)
        a = extract(image, camera, AdaptiveThresholdState(), detector)
        b = extract(shifted, camera, AdaptiveThresholdState(), detector)
        assert len(a) > 0 and len(b) > 0
        P = NeuralMatcher(MATCHER_MODEL).match(a.keypoints, a.descriptors, b.keypoints, b.descriptors)
        assert P.shape == (len(a), len(b))
        assert np.all((P >= 0.0) & (P <= 1.0))
