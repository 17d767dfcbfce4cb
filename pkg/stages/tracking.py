"""Per-frame front end: initialization, frame-to-frame tracking, local-map refinement,
relocalization and keyframe decisions."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from core.bundle_adjustment import information_weight, optimize_pose
from core.config import MappingSection, TrackerSection
from core.errors import (
    DegenerateConfigurationError,
    GeometryError,
    InsufficientMatchesError,
    NoCandidateError,
    NoConsensusError,
    TooFewMatchesError,
)
from core.features import AdaptiveThresholdState, FeatureSet
from core.geometry import PinholeCamera, PoseSE3, project_points, solve_essential_ransac, solve_pnp_ransac, triangulate
from core.matching import Matcher, MatchSet
from core.vocabulary import KeyframeDatabase, VocabularyTree
from core.world_map import KeyFrame, WorldMap
from stages.local_mapping import triangulate_stereo

logger = logging.getLogger(__name__)


class TrackingMode(Enum):
    UNINITIALIZED = "uninitialized"
    TRACKING = "tracking"
    LOST = "lost"


@dataclass
class Frame:
    id: int
    timestamp: float
    features: FeatureSet
    camera: PinholeCamera
    pose: Optional[PoseSE3] = None  # world-to-camera, set when tracking succeeded
    right: Optional[FeatureSet] = None
    points: Dict[int, int] = field(default_factory=dict)  # feature index -> map point id (inliers)

    @property
    def num_tracked(self) -> int:
        return len(self.points)


@dataclass
class TrackerState:
    mode: TrackingMode = TrackingMode.UNINITIALIZED
    last_frame: Optional[Frame] = None
    reference_keyframe: Optional[int] = None
    velocity: Optional[PoseSE3] = None
    threshold_state: AdaptiveThresholdState = field(default_factory=AdaptiveThresholdState)
    failures: int = 0
    last_keyframe_frame: int = -1
    init_frame: Optional[Frame] = None
    corrections_seen: int = 0


@dataclass
class TrackingResult:
    pose: PoseSE3
    points: Dict[int, int]
    matches: int = 0


class Tracker:
    """Front end owning the tracking state machine.

    Modes move Uninitialized -> Tracking on initialization, Tracking -> Lost after
    `lost_after` consecutive failures and Lost -> Tracking on relocalization.
    """

    def __init__(self, world: WorldMap, matcher: Matcher, config: Optional[TrackerSection] = None,
                 mapping: Optional[MappingSection] = None, stereo_baseline: Optional[float] = None,
                 vocabulary: Optional[VocabularyTree] = None, database: Optional[KeyframeDatabase] = None,
                 ablations: Set[str] = frozenset(), adaptive_weights: bool = True, seed: int = 0):
        self.world = world
        self.matcher = matcher
        self.config = config or TrackerSection()
        self.mapping = mapping or MappingSection()
        self.stereo_baseline = stereo_baseline
        self.vocabulary = vocabulary
        self.database = database
        self.ablations = set(ablations)
        self.adaptive_weights = adaptive_weights
        self.seed = seed
        self.state = TrackerState()
        self.transitions: List[Tuple[TrackingMode, TrackingMode, int]] = []
        self.match_counts: List[int] = []

    @property
    def mode(self) -> TrackingMode:
        return self.state.mode

    def _set_mode(self, mode: TrackingMode, frame_id: int) -> None:
        if mode != self.state.mode:
            self.transitions.append((self.state.mode, mode, frame_id))
            logger.info("frame %d: %s -> %s", frame_id, self.state.mode.value, mode.value)
            self.state.mode = mode

    # -- helpers ---------------------------------------------------------

    def _weights(self, point_ids: List[int]) -> np.ndarray:
        if not self.adaptive_weights:
            return np.ones(len(point_ids))
        lam = self.mapping.lam
        return np.array([information_weight(self.world.points[p].score, self.world.points[p].num_observations, lam)
                         for p in point_ids])

    def _correspondences(self, pairs: Dict[int, int]) -> Tuple[List[int], List[int], np.ndarray]:
        """Live (feature, point) pairs and the point positions."""
        features, point_ids = [], []
        for feature_index, point_id in sorted(pairs.items()):
            if point_id in self.world.points:
                features.append(feature_index)
                point_ids.append(point_id)
        positions = np.array([self.world.points[p].position for p in point_ids]).reshape(-1, 3)
        return features, point_ids, positions

    def _solve(self, frame: Frame, pairs: Dict[int, int], initial: Optional[PoseSE3]) -> TrackingResult:
        """Motion-only optimization from `initial`, falling back to PnP when that leaves too few inliers."""
        quota = self.config.min_inliers
        with self.world.lock:
            features, point_ids, positions = self._correspondences(pairs)
            weights = self._weights(point_ids)
        if len(features) < quota:
            raise TooFewMatchesError(f"{len(features)} map-point matches, need {quota}")
        pixels = frame.features.keypoints[features]

        result = None
        if initial is not None:
            result = optimize_pose(frame.camera, initial, positions, pixels, weights)
        if result is None or result.num_inliers < quota:
            try:
                pose, _ = solve_pnp_ransac(frame.camera, positions, pixels, self.config.pnp_iterations,
                                           self.config.pnp_threshold, quota, self.seed + frame.id)
            except GeometryError as e:
                raise TooFewMatchesError(f"pose recovery failed: {e}") from e
            result = optimize_pose(frame.camera, pose, positions, pixels, weights)
        if result.num_inliers < quota:
            raise TooFewMatchesError(f"{result.num_inliers} inliers, need {quota}")
        points = {features[k]: point_ids[k] for k in np.flatnonzero(result.inliers)}
        return TrackingResult(result.pose, points, len(features))

    def _reference(self) -> Optional[KeyFrame]:
        ref = self.state.reference_keyframe
        if ref is not None and ref in self.world.keyframes:
            return self.world.keyframes[ref]
        if not self.world.keyframes:
            return None
        newest = max(self.world.keyframes)
        self.state.reference_keyframe = newest
        return self.world.keyframes[newest]

    # -- initialization --------------------------------------------------

    def initialize_monocular(self, frame_a: Frame, frame_b: Frame) -> Tuple[WorldMap, PoseSE3]:
        """Two-view map seed: essential matrix, triangulation, median depth normalized to 1."""
        need = self.config.init_min_features
        if len(frame_a.features) < need or len(frame_b.features) < need:
            raise InsufficientMatchesError(f"initialization needs {need} features per frame")
        matches = self.matcher.match_sets(frame_a.features, frame_b.features)
        if len(matches) < need:
            raise InsufficientMatchesError(f"{len(matches)} initialization matches, need {need}")
        pix_a = frame_a.features.keypoints[matches.index_a]
        pix_b = frame_b.features.keypoints[matches.index_b]
        relative, mask = solve_essential_ransac(pix_a, pix_b, frame_a.camera, min_parallax_deg=self.mapping.min_parallax_deg,
                                                seed=self.seed)

        pose_a = PoseSE3.identity()
        triangulated = []
        for k in np.flatnonzero(mask):
            try:
                X = triangulate(frame_a.camera, pose_a, frame_b.camera, relative, pix_a[k], pix_b[k],
                                self.mapping.min_parallax_deg)
            except GeometryError:
                continue
            triangulated.append((k, X))
        if len(triangulated) < max(need // 2, 0.5 * mask.sum()):
            raise DegenerateConfigurationError(f"only {len(triangulated)} of {int(mask.sum())} inliers triangulated")

        depths = np.array([X[2] for _, X in triangulated])
        scale = 1.0 / float(np.median(depths))
        pose_b = PoseSE3(relative.rotation, relative.translation * scale)

        world = self.world
        with world.lock:
            kf_a = world.add_keyframe(frame_a.timestamp, pose_a, frame_a.features, frame_a.camera, frame_a.id)
            kf_b = world.add_keyframe(frame_b.timestamp, pose_b, frame_b.features, frame_b.camera, frame_b.id)
            for k, X in triangulated:
                ia, ib = int(matches.index_a[k]), int(matches.index_b[k])
                point = world.add_point(X * scale, frame_a.features.descriptors[ia], kf_a.id)
                world.add_observation(point.id, kf_a.id, ia)
                world.add_observation(point.id, kf_b.id, ib)
        frame_a.pose, frame_b.pose = pose_a, pose_b
        frame_a.points = dict(kf_a.associations)
        frame_b.points = dict(kf_b.associations)
        self._accept_initialization(frame_b, kf_b.id, PoseSE3.identity())
        logger.info("monocular initialization between frames %d and %d: %d points",
                    frame_a.id, frame_b.id, len(triangulated))
        return world, pose_b

    def initialize_stereo(self, frame: Frame) -> WorldMap:
        """Metric map seed from one rectified pair."""
        if frame.right is None or not self.stereo_baseline:
            raise InsufficientMatchesError("stereo initialization needs a right view and a baseline")
        pose = PoseSE3.identity()
        created = triangulate_stereo(self.matcher, frame.camera, pose, frame.features, frame.right,
                                     self.stereo_baseline)
        if len(created) < self.config.init_min_features:
            raise InsufficientMatchesError(f"{len(created)} stereo points, need {self.config.init_min_features}")
        world = self.world
        with world.lock:
            kf = world.add_keyframe(frame.timestamp, pose, frame.features, frame.camera, frame.id, right=frame.right)
            for feature_index, X in created:
                point = world.add_point(X, frame.features.descriptors[feature_index], kf.id)
                world.add_observation(point.id, kf.id, feature_index)
        frame.pose = pose
        frame.points = dict(kf.associations)
        self._accept_initialization(frame, kf.id, None)
        logger.info("stereo initialization at frame %d: %d points", frame.id, len(created))
        return world

    def _accept_initialization(self, frame: Frame, kf_id: int, velocity: Optional[PoseSE3]) -> None:
        self.state.last_frame = frame
        self.state.reference_keyframe = kf_id
        self.state.velocity = velocity
        self.state.last_keyframe_frame = frame.id
        self.state.failures = 0
        self.state.init_frame = None
        self._set_mode(TrackingMode.TRACKING, frame.id)

    # -- tracking --------------------------------------------------------

    def track_coarse(self, frame: Frame) -> Tuple[PoseSE3, MatchSet, Dict[int, int]]:
        """Match against the previous frame and refine the constant-velocity prediction."""
        last = self.state.last_frame
        if last is None or last.pose is None:
            raise TooFewMatchesError("no previous frame")
        predicted = last.pose if self.state.velocity is None else self.state.velocity.compose(last.pose)
        if "mt" in self.ablations:
            matches = self._prior_matches(last, frame, predicted)
        else:
            matches = self.matcher.match_sets(last.features, frame.features)
        self.state.threshold_state.last_match_count = len(matches)
        pairs = {int(b): last.points[int(a)] for a, b in zip(matches.index_a, matches.index_b)
                 if int(a) in last.points}
        result = self._solve(frame, pairs, predicted)
        return result.pose, matches, result.points

    def _prior_matches(self, last: Frame, frame: Frame, predicted: PoseSE3) -> MatchSet:
        """Projection-guided search around where the previous frame's map points should land."""
        with self.world.lock:
            features, point_ids, positions = self._correspondences(last.points)
        if not features:
            return MatchSet.empty("prior")
        pixels, _, valid = project_points(frame.camera, predicted, positions)
        pixels[~valid] = np.nan
        subset = last.features.subset(features)
        matches = self.matcher.match_in_window(subset, frame.features, pixels, self.config.prior_radius)
        index_a = np.asarray(features, dtype=int)[matches.index_a]
        return MatchSet(index_a, matches.index_b, matches.confidence, matches.provenance)

    def track_reference(self, frame: Frame) -> Tuple[PoseSE3, Dict[int, int]]:
        ref = self._reference()
        if ref is None:
            raise TooFewMatchesError("no reference keyframe")
        matches = self.matcher.match_sets(ref.features, frame.features)
        pairs = {int(b): ref.associations[int(a)] for a, b in zip(matches.index_a, matches.index_b)
                 if int(a) in ref.associations}
        self.state.threshold_state.last_match_count = len(matches)
        result = self._solve(frame, pairs, None)
        return result.pose, result.points

    def relocalize(self, frame: Frame) -> Tuple[PoseSE3, Dict[int, int]]:
        """Query the keyframe database and try every candidate until one reaches the inlier quota."""
        candidates = self._relocalization_candidates(frame)
        if not candidates:
            raise NoCandidateError("the keyframe database returned no relocalization candidate")
        for kf_id in candidates:
            kf = self.world.keyframes.get(kf_id)
            if kf is None:
                continue
            matches = self.matcher.match_sets(kf.features, frame.features)
            pairs = {int(b): kf.associations[int(a)] for a, b in zip(matches.index_a, matches.index_b)
                     if int(a) in kf.associations}
            if len(pairs) < 4:
                logger.debug("relocalization candidate %d shares %d points; trying the next", kf_id, len(pairs))
                continue
            try:
                result = self._solve(frame, pairs, None)
            except TooFewMatchesError:
                continue
            self.state.reference_keyframe = kf_id
            logger.info("frame %d relocalized against keyframe %d (%d inliers)", frame.id, kf_id, len(result.points))
            return result.pose, result.points
        raise NoConsensusError(f"none of {len(candidates)} relocalization candidates reached "
                               f"{self.config.min_inliers} inliers")

    def _relocalization_candidates(self, frame: Frame) -> List[int]:
        if self.vocabulary is not None and self.database is not None and len(self.database):
            bow = self.vocabulary.transform(frame.features)
            ranked = self.database.relocalization_candidates(bow, lambda kf: self.world.covisible(kf, n=10))
            return [c.kf_id for c in ranked]
        ref = self._reference()
        if ref is None:
            raise NoCandidateError("the map has no keyframes")
        return [ref.id] + self.world.covisible(ref.id, n=self.config.local_map_keyframes)

    def track_local_map(self, frame: Frame, pose: PoseSE3,
                        points: Dict[int, int]) -> Tuple[PoseSE3, Dict[int, int]]:
        """Project the reference keyframe's covisibility neighbourhood and refine on the enlarged set."""
        ref = self._reference()
        if ref is None:
            return pose, points
        with self.world.lock:
            local_kfs = [ref.id] + self.world.covisible(ref.id, n=self.config.local_map_keyframes)
            candidates = sorted(self.world.points_of(local_kfs) - set(points.values()))
            positions = np.array([self.world.points[p].position for p in candidates]).reshape(-1, 3)
            descriptors = np.array([self.world.points[p].descriptor for p in candidates]).reshape(len(candidates), -1)
            scores = np.array([self.world.points[p].score for p in candidates])
        if not candidates:
            return pose, points

        pixels, _, valid = project_points(frame.camera, pose, positions)
        visible = np.flatnonzero(valid & frame.camera.in_image(pixels))
        free = np.array([i for i in range(len(frame.features)) if i not in points], dtype=int)
        if len(visible) == 0 or len(free) == 0:
            return pose, points
        projected = FeatureSet(pixels[visible], scores[visible], descriptors[visible])
        window = self.matcher.match_in_window(projected, frame.features.subset(free), pixels[visible],
                                              self.config.local_map_radius)
        if len(window) == 0:
            return pose, points

        combined = dict(points)
        for a, b in zip(window.index_a, window.index_b):
            combined[int(free[b])] = candidates[int(visible[a])]
        with self.world.lock:
            features, point_ids, positions = self._correspondences(combined)
            weights = self._weights(point_ids)
        result = optimize_pose(frame.camera, pose, positions, frame.features.keypoints[features], weights)
        refined = {features[k]: point_ids[k] for k in np.flatnonzero(result.inliers)}
        if len(refined) < len(points):
            return pose, points
        return result.pose, refined

    def decide_keyframe(self, frame: Frame, tracked: int) -> bool:
        ref = self._reference()
        if ref is None:
            return True
        if frame.id - self.state.last_keyframe_frame >= self.config.max_frame_gap:
            return True
        return tracked < self.config.keyframe_ratio * len(ref.associations)

    # -- driver ----------------------------------------------------------

    def process(self, frame: Frame) -> List[KeyFrame]:
        """Track one frame; returns the keyframes it created (two on monocular initialization)."""
        self._follow_corrections()
        mode = self.state.mode
        if mode == TrackingMode.UNINITIALIZED:
            return self._initialize(frame)
        if mode == TrackingMode.LOST:
            try:
                pose, points = self.relocalize(frame)
            except (NoCandidateError, NoConsensusError) as e:
                logger.debug("frame %d: relocalization failed: %s", frame.id, e)
                return []
            self.state.velocity = None
            self.state.failures = 0
            self._set_mode(TrackingMode.TRACKING, frame.id)
            return self._accept(frame, pose, points)

        try:
            pose, matches, points = self.track_coarse(frame)
            self.match_counts.append(len(matches))
        except TooFewMatchesError as coarse_error:
            try:
                pose, points = self.track_reference(frame)
            except TooFewMatchesError as e:
                logger.debug("frame %d: coarse (%s) and reference (%s) tracking failed", frame.id, coarse_error, e)
                self.state.failures += 1
                if self.state.failures >= self.config.lost_after:
                    self._set_mode(TrackingMode.LOST, frame.id)
                    self.state.velocity = None
                return []
        return self._accept(frame, pose, points)

    def _follow_corrections(self) -> None:
        """Carry the last frame into every loop correction published since the previous frame."""
        with self.world.lock:
            pending = self.world.corrections[self.state.corrections_seen:]
            self.state.corrections_seen = len(self.world.corrections)
        last = self.state.last_frame
        if not pending or last is None or last.pose is None:
            return
        moved = last.pose.to_sim3()
        for deltas in pending:
            delta = deltas.get(self.state.reference_keyframe)
            if delta is not None:
                moved = moved.compose(delta)
        last.pose = moved.to_se3()
        self.state.velocity = None
        logger.debug("frame %d moved through %d loop correction(s)", last.id, len(pending))

    def _accept(self, frame: Frame, pose: PoseSE3, points: Dict[int, int]) -> List[KeyFrame]:
        pose, points = self.track_local_map(frame, pose, points)
        last = self.state.last_frame
        if last is not None and last.pose is not None and last.id == frame.id - 1:
            self.state.velocity = pose.compose(last.pose.inverse())
        else:
            self.state.velocity = None
        frame.pose = pose
        frame.points = points
        self.state.failures = 0
        self.state.last_frame = frame
        if not self.decide_keyframe(frame, len(points)):
            return []
        return [self._insert_keyframe(frame)]

    def _insert_keyframe(self, frame: Frame) -> KeyFrame:
        with self.world.lock:
            kf = self.world.add_keyframe(frame.timestamp, frame.pose, frame.features, frame.camera, frame.id,
                                         right=frame.right)
            for feature_index, point_id in frame.points.items():
                if point_id in self.world.points:
                    self.world.add_observation(point_id, kf.id, feature_index)
        self.state.reference_keyframe = kf.id
        self.state.last_keyframe_frame = frame.id
        logger.debug("frame %d promoted to keyframe %d with %d points", frame.id, kf.id, len(kf.associations))
        return kf

    def _initialize(self, frame: Frame) -> List[KeyFrame]:
        before = set(self.world.keyframes)
        if frame.right is not None and self.stereo_baseline:
            try:
                self.initialize_stereo(frame)
            except InsufficientMatchesError as e:
                logger.debug("frame %d: stereo initialization failed: %s", frame.id, e)
                return []
        else:
            anchor = self.state.init_frame
            if len(frame.features) < self.config.init_min_features:
                return []
            if anchor is None:
                self.state.init_frame = frame
                return []
            try:
                self.initialize_monocular(anchor, frame)
            except InsufficientMatchesError:
                self.state.init_frame = frame
                return []
            except GeometryError as e:
                logger.debug("initialization %d-%d rejected: %s", anchor.id, frame.id, e)
                return []
        return [self.world.keyframes[kf_id] for kf_id in sorted(set(self.world.keyframes) - before)]
