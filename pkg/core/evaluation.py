"""Trajectory association, alignment and ATE / RPE metrics, plus trajectory file I/O."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import EmptyOverlapError, EvaluationError, TooShortTrajectoryError
from core.geometry import PoseSE3, PoseSim3, rotation_angle, solve_sim3_umeyama

logger = logging.getLogger(__name__)

ALIGN_MODES = ("none", "se3", "sim3")


@dataclass
class TrajectoryEstimate:
    """Time-ordered camera-to-world poses."""
    timestamps: List[float] = field(default_factory=list)
    poses: List[PoseSE3] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = [float(t) for t in self.timestamps]
        if len(self.timestamps) != len(self.poses):
            raise EvaluationError("timestamps and poses differ in length")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise EvaluationError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def append(self, timestamp: float, pose: PoseSE3) -> None:
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise EvaluationError(f"timestamp {timestamp} does not follow {self.timestamps[-1]}")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        return np.array([pose.translation for pose in self.poses]).reshape(-1, 3)


@dataclass
class PairedTrajectories:
    timestamps: np.ndarray
    estimate: List[PoseSE3]
    groundtruth: List[PoseSE3]
    alignment: PoseSim3 = field(default_factory=PoseSim3.identity)

    def __len__(self) -> int:
        return len(self.estimate)

    def errors(self) -> np.ndarray:
        """Per-pair Euclidean position error."""
        est = np.array([p.translation for p in self.estimate]).reshape(-1, 3)
        gt = np.array([p.translation for p in self.groundtruth]).reshape(-1, 3)
        return np.linalg.norm(est - gt, axis=1)


def associate(estimate: TrajectoryEstimate, groundtruth: TrajectoryEstimate,
              max_dt: float = 0.02) -> PairedTrajectories:
    """Greedy one-to-one pairing of the closest timestamps within max_dt."""
    if max_dt <= 0:
        raise EvaluationError("max_dt must be positive")
    est_t = np.asarray(estimate.timestamps)
    gt_t = np.asarray(groundtruth.timestamps)
    candidates = []
    for i, t in enumerate(est_t):
        lo = np.searchsorted(gt_t, t - max_dt, side="left")
        hi = np.searchsorted(gt_t, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(gt_t[j] - t)
            if dt <= max_dt:
                candidates.append((dt, i, j))
    candidates.sort()

    used_est, used_gt, pairs = set(), set(), []
    for dt, i, j in candidates:
        if i in used_est or j in used_gt:
            continue
        used_est.add(i)
        used_gt.add(j)
        pairs.append((i, j))
    if not pairs:
        raise EmptyOverlapError("no timestamps pair up within max_dt")
    pairs.sort()
    return PairedTrajectories(np.array([est_t[i] for i, _ in pairs]),
                              [estimate.poses[i] for i, _ in pairs],
                              [groundtruth.poses[j] for _, j in pairs])


def _apply(S: PoseSim3, pose: PoseSE3) -> PoseSE3:
    """Similarity applied to a camera-to-world pose: the camera centre moves, orientation rotates."""
    return PoseSE3.from_matrix(S.R @ pose.R, S.transform(pose.translation[None])[0])


def align(pairs: PairedTrajectories, mode: str = "sim3") -> PairedTrajectories:
    """Umeyama alignment of the estimated positions onto the ground truth."""
    if mode not in ALIGN_MODES:
        raise EvaluationError(f"unknown alignment mode {mode!r}; expected one of {ALIGN_MODES}")
    if mode == "none":
        return PairedTrajectories(pairs.timestamps, list(pairs.estimate), list(pairs.groundtruth))
    est = np.array([p.translation for p in pairs.estimate])
    gt = np.array([p.translation for p in pairs.groundtruth])
    S = solve_sim3_umeyama(est, gt, with_scale=mode == "sim3")
    return PairedTrajectories(pairs.timestamps, [_apply(S, p) for p in pairs.estimate],
                              list(pairs.groundtruth), S)


def _statistics(values: np.ndarray) -> Dict[str, float]:
    return {
        "rmse": float(np.sqrt(np.mean(values ** 2))),
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "std": float(np.std(values)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def ate_rmse(pairs: PairedTrajectories) -> float:
    if len(pairs) == 0:
        raise EvaluationError("ATE needs at least one pair")
    errors = pairs.errors()
    return float(np.sqrt(np.mean(errors ** 2)))


def ate_statistics(pairs: PairedTrajectories) -> Dict[str, float]:
    if len(pairs) == 0:
        raise EvaluationError("ATE needs at least one pair")
    return _statistics(pairs.errors())


def frame_delta(pairs: PairedTrajectories, seconds: float) -> int:
    """Frame delta closest to a time delta, from the median sample spacing."""
    if len(pairs) < 2:
        raise TooShortTrajectoryError("need two samples to measure spacing")
    spacing = float(np.median(np.diff(pairs.timestamps)))
    return max(1, int(round(seconds / spacing)))


def relative_errors(pairs: PairedTrajectories, delta: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Per-index (translation, rotation angle) of (gt_i⁻¹ gt_i+Δ)⁻¹ (est_i⁻¹ est_i+Δ)."""
    if delta < 1:
        raise EvaluationError("RPE delta must be at least one frame")
    if len(pairs) <= delta:
        raise TooShortTrajectoryError(f"{len(pairs)} pairs cannot span a delta of {delta}")
    translations, rotations = [], []
    for i in range(len(pairs) - delta):
        gt_rel = pairs.groundtruth[i].inverse().compose(pairs.groundtruth[i + delta])
        est_rel = pairs.estimate[i].inverse().compose(pairs.estimate[i + delta])
        error = gt_rel.inverse().compose(est_rel)
        translations.append(np.linalg.norm(error.translation))
        rotations.append(rotation_angle(error.R))
    return np.asarray(translations), np.asarray(rotations)


def rpe_rmse(pairs: PairedTrajectories, delta: int = 1,
             seconds: Optional[float] = None) -> Tuple[float, float]:
    if seconds is not None:
        delta = frame_delta(pairs, seconds)
    translations, rotations = relative_errors(pairs, delta)
    return float(np.sqrt(np.mean(translations ** 2))), float(np.sqrt(np.mean(rotations ** 2)))


def rpe_statistics(pairs: PairedTrajectories, delta: int = 1,
                   seconds: Optional[float] = None) -> Dict[str, Dict[str, float]]:
    if seconds is not None:
        delta = frame_delta(pairs, seconds)
    translations, rotations = relative_errors(pairs, delta)
    return {"translation": _statistics(translations), "rotation": _statistics(rotations)}


# -- trajectory files ------------------------------------------------------

def read_trajectory(path: Union[str, Path]) -> TrajectoryEstimate:
    """Space-separated "timestamp tx ty tz qx qy qz qw" lines, or an EuRoC ground-truth CSV."""
    path = Path(path)
    text = path.read_text()
    first = next((line for line in text.splitlines() if line.strip()), "")
    if "," in first:
        return read_euroc_groundtruth(path)

    trajectory = TrajectoryEstimate()
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise EvaluationError(f"{path}:{number}: expected 8 fields, got {len(parts)}")
        values = [float(v) for v in parts]
        trajectory.append(values[0], PoseSE3(values[4:8], values[1:4]))
    return trajectory


def write_trajectory(path: Union[str, Path], trajectory: TrajectoryEstimate) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for timestamp, pose in zip(trajectory.timestamps, trajectory.poses):
        values = " ".join(f"{v:.9f}" for v in (*pose.translation, *pose.rotation))
        lines.append(f"{timestamp:.9f} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


_EUROC_FIELDS = ("p_RS_R_x", "p_RS_R_y", "p_RS_R_z", "q_RS_w", "q_RS_x", "q_RS_y", "q_RS_z")


def _euroc_columns(header: Sequence[str]) -> List[int]:
    names = [h.strip().lstrip("#").split("[")[0].strip() for h in header]
    if all(field_name in names for field_name in _EUROC_FIELDS):
        return [names.index(field_name) for field_name in _EUROC_FIELDS]
    return list(range(1, 8))


def read_euroc_groundtruth(path: Union[str, Path]) -> TrajectoryEstimate:
    """EuRoC / TUM-VI ground-truth CSV: nanosecond timestamps, position, w-first quaternion."""
    path = Path(path)
    trajectory = TrajectoryEstimate()
    columns = list(range(1, 8))
    with open(path, newline="") as f:
        for number, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if row[0].lstrip().startswith("#"):
                columns = _euroc_columns(row)
                continue
            try:
                timestamp = int(row[0]) * 1e-9
                x, y, z, qw, qx, qy, qz = (float(row[c]) for c in columns)
            except (ValueError, IndexError) as e:
                raise EvaluationError(f"{path}:{number}: {e}") from e
            trajectory.append(timestamp, PoseSE3([qx, qy, qz, qw], [x, y, z]))
    return trajectory


def write_error_csv(path: Union[str, Path], pairs: PairedTrajectories, delta: int = 1) -> None:
    """Per-frame position error, plus the relative error starting at each frame when available."""
    errors = pairs.errors()
    translations = rotations = np.zeros(0)
    if len(pairs) > delta:
        translations, rotations = relative_errors(pairs, delta)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "ate", "rpe_translation", "rpe_rotation"])
        for k, (timestamp, error) in enumerate(zip(pairs.timestamps, errors)):
            rel_t = f"{translations[k]:.9f}" if k < len(translations) else ""
            rel_r = f"{rotations[k]:.9f}" if k < len(rotations) else ""
            writer.writerow([f"{timestamp:.9f}", f"{error:.9f}", rel_t, rel_r])


class TrajectoryEvaluator:
    def __init__(self, align_mode: str = "sim3", max_dt: float = 0.02, delta: int = 1,
                 seconds: Optional[float] = None):
        if align_mode not in ALIGN_MODES:
            raise EvaluationError(f"unknown alignment mode {align_mode!r}")
        self.align_mode = align_mode
        self.max_dt = max_dt
        self.delta = delta
        self.seconds = seconds

    def evaluate(self, estimate: TrajectoryEstimate, groundtruth: TrajectoryEstimate) -> Dict:
        pairs = associate(estimate, groundtruth, self.max_dt)
        if self.align_mode != "none" and len(pairs) < 3:
            raise EvaluationError(f"{self.align_mode} alignment needs at least 3 pairs")
        aligned = align(pairs, self.align_mode)
        results = {
            "pairs": len(aligned),
            "align": self.align_mode,
            "scale": aligned.alignment.scale,
            "ate": ate_statistics(aligned),
        }
        try:
            results["rpe"] = rpe_statistics(aligned, self.delta, self.seconds)
        except TooShortTrajectoryError:
            logger.warning("trajectory too short for RPE with delta %d", self.delta)
        return results

    def get_summary(self, results: Dict) -> str:
        ate = results["ate"]
        lines = [
            f"=== Trajectory error ({results['pairs']} pairs, align {results['align']}) ===",
            f"ATE rmse:   {ate['rmse']:.6f} m",
            f"ATE mean:   {ate['mean']:.6f} m",
            f"ATE median: {ate['median']:.6f} m",
            f"ATE std:    {ate['std']:.6f} m",
            f"ATE max:    {ate['max']:.6f} m",
        ]
        if results["align"] == "sim3":
            lines.append(f"Scale:      {results['scale']:.6f}")
        if "rpe" in results:
            rpe = results["rpe"]
            lines.append(f"RPE trans rmse: {rpe['translation']['rmse']:.6f} m (std {rpe['translation']['std']:.6f})")
            lines.append(f"RPE rot rmse:   {np.rad2deg(rpe['rotation']['rmse']):.6f} deg "
                         f"(std {np.rad2deg(rpe['rotation']['std']):.6f})")
        return "\n".join(lines)
