"""Pipeline orchestration: frames in, trajectory, map snapshot and run report out."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from clients.detector_client import NeuralDetector
from clients.matcher_client import BruteForceMatcher, NeuralMatcher
from core.config import RunConfig
from core.dataset import DatasetFrame, DatasetReader
from core.errors import InitializationError
from core.evaluation import TrajectoryEstimate, write_trajectory
from core.features import AdaptiveThresholdState, DetectorBackend, FeatureSet, extract
from core.geometry import PinholeCamera, PoseSE3
from core.matching import Matcher, MatcherBackend
from core.vocabulary import KeyframeDatabase, VocabularyTree
from core.world_map import WorldMap
from sim.simworld import SyntheticDetector
from stages.local_mapping import LocalMapper
from stages.loop_closing import LoopCloser, LoopEvent
from stages.timing import StageTimer
from stages.tracking import Frame, Tracker, TrackingMode

logger = logging.getLogger(__name__)


@dataclass
class TrajectorySample:
    timestamp: float
    reference_kf: Optional[int]
    relative: PoseSE3  # frame pose relative to the reference keyframe, or absolute without one
    absolute: PoseSE3


@dataclass
class RunReport:
    frames: int = 0
    tracked_frames: int = 0
    lost_frames: int = 0
    initialized_at: int = -1
    keyframes: int = 0
    map_points: int = 0
    match_counts: List[int] = field(default_factory=list)
    loop_events: List[LoopEvent] = field(default_factory=list)
    transitions: List[Tuple[str, str, int]] = field(default_factory=list)
    stage_failures: List[Tuple[str, int, str]] = field(default_factory=list)  # (stage, keyframe id, error)

    @property
    def accepted_loops(self) -> int:
        return sum(1 for event in self.loop_events if event.accepted)

    def lines(self) -> List[str]:
        counts = np.asarray(self.match_counts, dtype=float)
        lines = [
            f"frames {self.frames}",
            f"tracked_frames {self.tracked_frames}",
            f"lost_frames {self.lost_frames}",
            f"initialized_at {self.initialized_at}",
            f"keyframes {self.keyframes}",
            f"map_points {self.map_points}",
            f"match_count_mean {counts.mean() if len(counts) else 0.0:.3f}",
            f"match_count_min {int(counts.min()) if len(counts) else 0}",
            f"loop_candidates {len(self.loop_events)}",
            f"loops_accepted {self.accepted_loops}",
            f"stage_failures {len(self.stage_failures)}",
        ]
        for before, after, frame in self.transitions:
            lines.append(f"transition {frame} {before} {after}")
        for event in self.loop_events:
            lines.append(f"loop_event {event.kf_id} {event.candidate} {'accepted' if event.accepted else 'rejected'} "
                         f"{event.inliers} {event.verified_matches}")
        for stage, kf_id, error in self.stage_failures:
            lines.append(f"stage_failure {stage} {kf_id} {error}")
        return lines


def make_backends(config: RunConfig, camera: PinholeCamera) -> Tuple[DetectorBackend, MatcherBackend]:
    if config.run.backend == "neural":
        detector = NeuralDetector(config.run.detector_model, config.features.descriptor_stride)
        return detector, NeuralMatcher(config.run.matcher_model)
    features = config.features
    detector = SyntheticDetector(camera, features.width, features.height, features.background_score, config.run.seed)
    return detector, BruteForceMatcher()


class SlamSystem:
    """Tracking, local mapping and loop closing over one shared map.

    Deterministic mode runs the stages round-robin in the caller's thread; otherwise local
    mapping and loop closing run on their own threads fed by FIFO queues.
    """

    def __init__(self, config: RunConfig, camera: PinholeCamera, vocabulary: Optional[VocabularyTree] = None,
                 detector: Optional[DetectorBackend] = None, matcher_backend: Optional[MatcherBackend] = None,
                 baseline: Optional[float] = None):
        self.config = config
        self.camera = camera
        self.vocabulary = vocabulary
        self.deterministic = config.run.deterministic
        ablations = config.ablations
        adaptive_weights = "lc" not in ablations
        stereo_baseline = (baseline or config.stereo.baseline) if config.stereo_mode else None

        default_detector, default_matcher = (None, None) if detector is not None and matcher_backend is not None \
            else make_backends(config, camera)
        self.detector = detector or default_detector
        self.matcher = Matcher(matcher_backend or default_matcher, camera, config.matcher.min_confidence)
        self.world = WorldMap()
        self.timer = StageTimer()
        self.database = KeyframeDatabase(vocabulary) if vocabulary is not None else None

        self.tracker = Tracker(self.world, self.matcher, config.tracker, config.mapping, stereo_baseline,
                               vocabulary, self.database, ablations, adaptive_weights, config.run.seed)
        features = config.features
        self.tracker.state.threshold_state = AdaptiveThresholdState(features.mu1, features.mu2, 0,
                                                                    features.width, features.height)
        self.mapper = LocalMapper(self.world, self.matcher, config.mapping, ablations, stereo_baseline,
                                  on_keyframe_removed=self._forget_keyframe, timer=self.timer)
        self.loop_closer: Optional[LoopCloser] = None
        if vocabulary is not None:
            self.loop_closer = LoopCloser(self.world, self.matcher, vocabulary, self.database, config.loop,
                                          config.mapping, with_scale=not config.stereo_mode,
                                          adaptive_weights=adaptive_weights, local_mapper=self.mapper,
                                          seed=config.run.seed, timer=self.timer)
            self.mapper.downstream = self.loop_closer

        self.samples: List[TrajectorySample] = []
        self.frames = 0
        self.lost_frames = 0
        self.initialized_at = -1
        self._started = False

    def start(self) -> None:
        if self.deterministic or self._started:
            return
        self.mapper.start()
        if self.loop_closer is not None:
            self.loop_closer.start()
        self._started = True

    def finish(self) -> None:
        if not self._started:
            return
        self.mapper.wait_idle()
        if self.loop_closer is not None:
            self.loop_closer.wait_idle()
        self.mapper.shutdown()
        if self.loop_closer is not None:
            self.loop_closer.shutdown()
        self._started = False
        for stage, kf_id, error in self.stage_failures():
            logger.error("%s failed on keyframe %d: %s", stage, kf_id, error)

    def stage_failures(self) -> List[Tuple[str, int, str]]:
        stages = [self.mapper] + ([self.loop_closer] if self.loop_closer is not None else [])
        return [(stage.name, kf_id, error) for stage in stages for kf_id, error in stage.failures]

    def _forget_keyframe(self, kf_id: int) -> None:
        if self.database is not None:
            self.database.erase(kf_id)

    def extract(self, data) -> FeatureSet:
        features = self.config.features
        fixed = features.fixed_threshold if features.threshold_mode == "fixed" else None
        return extract(data, self.camera, self.tracker.state.threshold_state, self.detector,
                       features.nms_radius, fixed)

    def process_frame(self, frame: DatasetFrame) -> Frame:
        with self.timer.measure("FE"):
            left = self.extract(frame.left)
            right = None
            if frame.right is not None and self.config.stereo_mode:
                right = self.extract(frame.right)
        current = Frame(frame.index, frame.timestamp, left, self.camera, right=right)
        with self.timer.measure("TT"):
            keyframes = self.tracker.process(current)
        self.frames += 1

        if self.tracker.mode == TrackingMode.UNINITIALIZED:
            if self.frames >= self.config.tracker.init_frame_budget:
                raise InitializationError(f"no initialization within {self.frames} frames")
        elif self.initialized_at < 0:
            self.initialized_at = frame.index

        for kf in keyframes:
            self._dispatch(kf.id)
        if keyframes and self.tracker.state.init_frame is None and len(keyframes) == 2:
            # monocular initialization also fixed the anchor frame's pose
            anchor = self.world.keyframes[keyframes[0].id]
            self._record(anchor.timestamp, anchor.pose, anchor.id)
        if current.pose is not None and self.tracker.mode == TrackingMode.TRACKING:
            self._record(current.timestamp, current.pose, self.tracker.state.reference_keyframe)
        elif self.initialized_at >= 0:
            self.lost_frames += 1
        return current

    def _dispatch(self, kf_id: int) -> None:
        if not self.deterministic:
            self.mapper.insert_keyframe(kf_id)
            return
        self.mapper.process(kf_id)
        if self.loop_closer is not None:
            self.loop_closer.process(kf_id)

    def _record(self, timestamp: float, pose: PoseSE3, reference_kf: Optional[int]) -> None:
        with self.world.lock:
            ref = self.world.keyframes.get(reference_kf) if reference_kf is not None else None
            relative = pose.compose(ref.pose.inverse()) if ref is not None else pose
        self.samples.append(TrajectorySample(timestamp, reference_kf if ref is not None else None, relative, pose))

    def trajectory(self) -> TrajectoryEstimate:
        """Camera-to-world poses, re-anchored on the current reference keyframe poses."""
        trajectory = TrajectoryEstimate()
        with self.world.lock:
            for sample in self.samples:
                ref = self.world.keyframes.get(sample.reference_kf) if sample.reference_kf is not None else None
                pose = sample.relative.compose(ref.pose) if ref is not None else sample.absolute
                if trajectory.timestamps and sample.timestamp <= trajectory.timestamps[-1]:
                    continue
                trajectory.append(sample.timestamp, pose.inverse())
        return trajectory

    def report(self) -> RunReport:
        return RunReport(
            frames=self.frames,
            tracked_frames=len(self.samples),
            lost_frames=self.lost_frames,
            initialized_at=self.initialized_at,
            keyframes=len(self.world.keyframes),
            map_points=len(self.world.points),
            match_counts=list(self.tracker.match_counts),
            loop_events=list(self.loop_closer.events) if self.loop_closer is not None else [],
            transitions=[(a.value, b.value, f) for a, b, f in self.tracker.transitions],
            stage_failures=self.stage_failures(),
        )

    def get_summary(self) -> str:
        report = self.report()
        lines = [
            f"Frames: {report.frames}",
            f"Tracked: {report.tracked_frames}",
            f"Lost: {report.lost_frames}",
            self.world.get_summary(),
            f"Loops accepted: {report.accepted_loops} of {len(report.loop_events)} candidates",
        ]
        if report.stage_failures:
            lines.append(f"Stage failures: {len(report.stage_failures)}")
        return "\n".join(lines)


def write_outputs(out_dir: Union[str, Path], trajectory: TrajectoryEstimate, snapshot: List[str],
                  report: RunReport, timer: Optional[StageTimer] = None) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("trajectory.txt", "map.txt", "report.txt")}
    write_trajectory(paths["trajectory.txt"], trajectory)
    paths["map.txt"].write_text("\n".join(snapshot) + "\n")
    paths["report.txt"].write_text("\n".join(report.lines()) + "\n")
    if timer is not None:
        paths["timing.txt"] = out / "timing.txt"
        timer.write(paths["timing.txt"])
    return paths


def run_slam(config: RunConfig, reader: DatasetReader, vocabulary: Optional[VocabularyTree] = None,
             out_dir: Union[str, Path, None] = None,
             system: Optional[SlamSystem] = None) -> Tuple[TrajectoryEstimate, List[str], RunReport]:
    """Run the full pipeline over a dataset; per-frame tracking failures are counted, not raised."""
    system = system or SlamSystem(config, reader.camera, vocabulary, baseline=reader.baseline)
    system.start()
    try:
        for frame in reader:
            system.process_frame(frame)
    finally:
        system.finish()
    trajectory = system.trajectory()
    snapshot = system.world.snapshot_lines()
    report = system.report()
    logger.info("run finished: %d/%d frames tracked, %d keyframes, %d loops",
                report.tracked_frames, report.frames, report.keyframes, report.accepted_loops)
    if out_dir is not None:
        write_outputs(out_dir, trajectory, snapshot, report, system.timer)
    return trajectory, snapshot, report
