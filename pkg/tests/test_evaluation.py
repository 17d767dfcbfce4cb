"""Tests for timestamp association, alignment, ATE/RPE and trajectory files."""
import numpy as np
import pytest

from core.errors import EmptyOverlapError, EvaluationError, TooShortTrajectoryError
from core.evaluation import (
    PairedTrajectories,
    TrajectoryEstimate,
    TrajectoryEvaluator,
    align,
    associate,
    ate_rmse,
    read_trajectory,
    relative_errors,
    rpe_rmse,
    write_error_csv,
    write_trajectory,
)
from core.geometry import PoseSE3


def _helix(n: int = 20, spacing: float = 0.05) -> TrajectoryEstimate:
    poses = [PoseSE3.from_rotvec(np.array([0.0, 0.1 * k, 0.02 * k]),
                                 np.array([np.cos(0.2 * k), np.sin(0.2 * k), 0.05 * k]))
             for k in range(n)]
    return TrajectoryEstimate([spacing * k for k in range(n)], poses)


def _shifted(trajectory: TrajectoryEstimate, offset) -> TrajectoryEstimate:
    return TrajectoryEstimate(trajectory.timestamps,
                              [PoseSE3(p.rotation, p.translation + offset) for p in trajectory.poses])


@pytest.fixture
def groundtruth() -> TrajectoryEstimate:
    return _helix()


class TestTrajectoryEstimate:
    def test_rejects_non_increasing_timestamps(self):
        with pytest.raises(EvaluationError):
            TrajectoryEstimate([0.0, 0.0], [PoseSE3.identity()] * 2)
        trajectory = TrajectoryEstimate([1.0], [PoseSE3.identity()])
        with pytest.raises(EvaluationError):
            trajectory.append(0.5, PoseSE3.identity())

    def test_rejects_length_mismatch(self):
        with pytest.raises(EvaluationError):
            TrajectoryEstimate([0.0, 1.0], [PoseSE3.identity()])


class TestAssociate:
    def test_identical_timestamps_pair_one_to_one(self, groundtruth):
        pairs = associate(groundtruth, groundtruth)
        assert len(pairs) == len(groundtruth)
        np.testing.assert_array_equal(pairs.timestamps, groundtruth.timestamps)

    def test_disjoint_timestamps(self, groundtruth):
        late = TrajectoryEstimate([t + 100.0 for t in groundtruth.timestamps], groundtruth.poses)
        with pytest.raises(EmptyOverlapError):
            associate(late, groundtruth)

    def test_jittered_timestamps_pair_with_their_nearest(self, groundtruth, rng):
        jitter = rng.uniform(-0.01, 0.01, len(groundtruth))
        estimate = TrajectoryEstimate(np.asarray(groundtruth.timestamps) + jitter, groundtruth.poses)
        pairs = associate(estimate, groundtruth, max_dt=0.02)
        assert len(pairs) == len(groundtruth)
        for est, gt in zip(pairs.estimate, pairs.groundtruth):
            assert est is gt

    def test_each_sample_used_once(self):
        gt = TrajectoryEstimate([0.0, 0.01], [PoseSE3.identity()] * 2)
        est = TrajectoryEstimate([0.004], [PoseSE3.identity()])
        assert len(associate(est, gt, max_dt=0.02)) == 1

    def test_rejects_non_positive_max_dt(self, groundtruth):
        with pytest.raises(EvaluationError):
            associate(groundtruth, groundtruth, max_dt=0.0)


class TestAte:
    def test_identical_trajectories(self, groundtruth):
        assert ate_rmse(associate(groundtruth, groundtruth)) == 0.0

    def test_constant_offset_without_alignment(self, groundtruth):
        pairs = associate(_shifted(groundtruth, [3.0, 4.0, 0.0]), groundtruth)
        assert ate_rmse(align(pairs, "none")) == pytest.approx(5.0)

    def test_rmse_of_known_errors(self):
        gt = [PoseSE3.identity(), PoseSE3.identity()]
        est = [PoseSE3.identity(), PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 2.0, 0.0]))]
        assert ate_rmse(PairedTrajectories(np.array([0.0, 1.0]), est, gt)) == pytest.approx(np.sqrt(2.0))

    def test_alignment_modes_are_nested(self, groundtruth, rng):
        noisy = TrajectoryEstimate(groundtruth.timestamps, [
            PoseSE3(p.rotation, 1.3 * p.translation + np.array([0.5, -0.2, 0.1]) + rng.normal(scale=0.02, size=3))
            for p in groundtruth.poses])
        pairs = associate(noisy, groundtruth)
        none, se3, sim3 = (ate_rmse(align(pairs, mode)) for mode in ("none", "se3", "sim3"))
        assert sim3 <= se3 + 1e-12
        assert se3 <= none + 1e-12

    def test_similarity_is_removed_exactly(self, groundtruth):
        scaled = TrajectoryEstimate(groundtruth.timestamps, [
            PoseSE3(p.rotation, 0.5 * p.translation + np.array([1.0, 2.0, 3.0])) for p in groundtruth.poses])
        aligned = align(associate(scaled, groundtruth), "sim3")
        assert ate_rmse(aligned) < 1e-9
        assert aligned.alignment.scale == pytest.approx(2.0)

    def test_unknown_alignment_mode(self, groundtruth):
        with pytest.raises(EvaluationError):
            align(associate(groundtruth, groundtruth), "affine")


class TestRpe:
    def test_invariant_to_a_global_rigid_motion(self, groundtruth):
        offset = PoseSE3.from_rotvec(np.array([0.3, -0.1, 0.2]), np.array([1.0, -2.0, 0.5]))
        moved = TrajectoryEstimate(groundtruth.timestamps, [offset.compose(p) for p in groundtruth.poses])
        translation, rotation = rpe_rmse(associate(moved, groundtruth), delta=2)
        assert translation < 1e-9
        assert rotation < 1e-9

    def test_corrupted_pose_touches_two_intervals(self, groundtruth):
        k = 7
        poses = list(groundtruth.poses)
        poses[k] = poses[k].retract(np.array([0.1, 0.0, 0.0, 0.0, 0.05, 0.0]))
        pairs = associate(TrajectoryEstimate(groundtruth.timestamps, poses), groundtruth)
        translations, rotations = relative_errors(pairs, delta=1)
        changed = set(np.flatnonzero((translations > 1e-9) | (rotations > 1e-9)))
        assert changed == {k - 1, k}

    def test_too_short(self):
        single = TrajectoryEstimate([0.0], [PoseSE3.identity()])
        with pytest.raises(TooShortTrajectoryError):
            rpe_rmse(associate(single, single), delta=1)

    def test_delta_from_seconds(self, groundtruth):
        pairs = associate(groundtruth, groundtruth)
        assert rpe_rmse(pairs, seconds=0.25) == pytest.approx((0.0, 0.0), abs=1e-9)


class TestTrajectoryFiles:
    def test_write_then_read(self, groundtruth, tmp_path):
        path = tmp_path / "trajectory.txt"
        write_trajectory(path, groundtruth)
        loaded = read_trajectory(path)
        assert len(loaded) == len(groundtruth)
        np.testing.assert_allclose(loaded.timestamps, groundtruth.timestamps, atol=1e-9)
        np.testing.assert_allclose(loaded.positions(), groundtruth.positions(), atol=1e-8)

    def test_euroc_groundtruth_csv(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text(
            "#timestamp [ns],p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z []\n"
            "1000000000,1.0,2.0,3.0,1.0,0.0,0.0,0.0\n"
            "1050000000,1.5,2.0,3.0,0.6,0.0,0.0,0.8\n")
        trajectory = read_trajectory(path)
        assert trajectory.timestamps == pytest.approx([1.0, 1.05])
        np.testing.assert_allclose(trajectory.poses[0].translation, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(trajectory.poses[1].rotation, [0.0, 0.0, 0.8, 0.6])

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "trajectory.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(EvaluationError):
            read_trajectory(path)

    def test_error_csv_has_one_row_per_pair(self, groundtruth, tmp_path):
        path = tmp_path / "errors.csv"
        write_error_csv(path, associate(groundtruth, groundtruth))
        rows = path.read_text().splitlines()
        assert rows[0] == "timestamp,ate,rpe_translation,rpe_rotation"
        assert len(rows) == len(groundtruth) + 1
        assert rows[-1].endswith(",,")


class TestTrajectoryEvaluator:
    def test_summary_reports_ate(self, groundtruth):
        evaluator = TrajectoryEvaluator("sim3")
        results = evaluator.evaluate(_shifted(groundtruth, [1.0, 0.0, 0.0]), groundtruth)
        summary = evaluator.get_summary(results)
        assert "ATE rmse:   0.000000 m" in summary
        assert "RPE trans rmse" in summary
        assert results["pairs"] == len(groundtruth)

    def test_alignment_needs_three_pairs(self):
        short = TrajectoryEstimate([0.0, 1.0], [PoseSE3.identity()] * 2)
        with pytest.raises(EvaluationError):
            TrajectoryEvaluator("se3").evaluate(short, short)
