"""Local mapping stage: new map points from keyframe pairs, culling and windowed bundle adjustment."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Set, Tuple

import numpy as np

from core.bundle_adjustment import BundleAdjustmentReport, local_bundle_adjust
from core.config import MappingSection
from core.errors import GeometryError, RankDeficiencyError
from core.features import FeatureSet
from core.geometry import PinholeCamera, PoseSE3, project_points, triangulate
from core.matching import Matcher, MatchSet
from core.world_map import WorldMap
from stages.pipeline import PipelineStage
from stages.timing import StageTimer

logger = logging.getLogger(__name__)

STEREO_MIN_PARALLAX_DEG = 0.1
PRIOR_WINDOW_RADIUS = 15.0


def right_camera_pose(pose: PoseSE3, baseline: float) -> PoseSE3:
    """World-to-camera pose of the right camera of a rectified pair."""
    return PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([-baseline, 0.0, 0.0])).compose(pose)


def triangulate_stereo(matcher: Matcher, camera: PinholeCamera, pose: PoseSE3, left: FeatureSet,
                       right: FeatureSet, baseline: float,
                       candidates: Optional[Sequence[int]] = None) -> List[Tuple[int, np.ndarray]]:
    """(left feature index, world point) for left-right matches that triangulate."""
    indices = np.arange(len(left)) if candidates is None else np.asarray(candidates, dtype=int)
    if len(indices) == 0 or len(right) == 0:
        return []
    matches = matcher.match_sets(left.subset(indices), right)
    right_pose = right_camera_pose(pose, baseline)
    out = []
    for a, b in zip(matches.index_a, matches.index_b):
        feature_index = int(indices[a])
        try:
            X = triangulate(camera, pose, camera, right_pose, left.keypoints[feature_index],
                            right.keypoints[b], STEREO_MIN_PARALLAX_DEG)
        except GeometryError:
            continue
        out.append((feature_index, X))
    return out


@dataclass
class MappingReport:
    keyframe: int
    new_points: int = 0
    culled_points: int = 0
    culled_keyframes: List[int] = field(default_factory=list)
    bundle_adjustment: Optional[BundleAdjustmentReport] = None


class LocalMapper(PipelineStage):
    """Consumes keyframes from the tracker in FIFO order.

    The stage is the only one that inserts or removes map structure outside loop correction.
    `on_keyframe_removed` lets the owner drop culled keyframes from its database.
    """

    name = "local-mapping"

    def __init__(self, world: WorldMap, matcher: Matcher, config: Optional[MappingSection] = None,
                 ablations: Set[str] = frozenset(), stereo_baseline: Optional[float] = None,
                 on_keyframe_removed: Optional[Callable[[int], None]] = None,
                 timer: Optional[StageTimer] = None):
        super().__init__(timer)
        self.world = world
        self.matcher = matcher
        self.config = config or MappingSection()
        self.ablations = set(ablations)
        self.stereo_baseline = stereo_baseline
        self.on_keyframe_removed = on_keyframe_removed
        self.reports: List[MappingReport] = []
        self._recent_points: List[int] = []

    @property
    def adaptive_weights(self) -> bool:
        return "lc" not in self.ablations

    # -- operations ------------------------------------------------------

    def create_map_points(self, kf_id: int, neighbours: Optional[Sequence[int]] = None) -> List[int]:
        """Triangulate matches between unassociated features of a keyframe and its neighbours."""
        world = self.world
        config = self.config
        with world.lock:
            kf = world.keyframes[kf_id]
            if neighbours is None:
                neighbours = world.covisible(kf_id, n=config.neighbours)
                if not neighbours:
                    neighbours = sorted((k for k in world.keyframes if k < kf_id), reverse=True)[:config.neighbours]
        created: List[int] = []
        for other_id in neighbours:
            with world.lock:
                other = world.keyframes.get(other_id)
                if other is None or other_id == kf_id:
                    continue
                baseline = float(np.linalg.norm(kf.pose.center() - other.pose.center()))
                depth = world.median_depth(other_id)
                if not np.isfinite(depth) or depth <= 0 or baseline / depth < config.min_baseline_ratio:
                    logger.debug("keyframe pair %d-%d: baseline too small", kf_id, other_id)
                    continue
                free_a = np.array([i for i in range(len(kf.features)) if i not in kf.associations], dtype=int)
                free_b = np.array([i for i in range(len(other.features)) if i not in other.associations], dtype=int)
            if len(free_a) == 0 or len(free_b) == 0:
                continue
            matches = self._match_pair(kf.features.subset(free_a), other.features.subset(free_b), kf, other, depth)
            for a, b in zip(matches.index_a, matches.index_b):
                ia, ib = int(free_a[a]), int(free_b[b])
                try:
                    X = triangulate(kf.camera, kf.pose, other.camera, other.pose, kf.features.keypoints[ia],
                                    other.features.keypoints[ib], config.min_parallax_deg)
                except GeometryError:
                    continue
                with world.lock:
                    if ia in kf.associations or ib in other.associations:
                        continue
                    point = world.add_point(X, kf.features.descriptors[ia], kf_id)
                    world.add_observation(point.id, kf_id, ia)
                    world.add_observation(point.id, other_id, ib)
                created.append(point.id)
        if kf.right is not None and self.stereo_baseline:
            created.extend(self._create_stereo_points(kf_id))
        self._recent_points.extend(created)
        return created

    def _match_pair(self, set_a: FeatureSet, set_b: FeatureSet, kf, other, depth: float) -> MatchSet:
        if "lm" not in self.ablations:
            return self.matcher.match_sets(set_a, set_b)
        # projection window around each feature's ray at the neighbour's median depth
        rays = np.array([kf.camera.backproject(p, depth) for p in set_a.keypoints]).reshape(-1, 3)
        predicted, _, ahead = project_points(other.camera, other.pose, kf.pose.inverse().transform(rays))
        predicted[~ahead] = np.nan
        return self.matcher.match_in_window(set_a, set_b, predicted, PRIOR_WINDOW_RADIUS)

    def _create_stereo_points(self, kf_id: int) -> List[int]:
        world = self.world
        with world.lock:
            kf = world.keyframes[kf_id]
            free = [i for i in range(len(kf.features)) if i not in kf.associations]
        created = []
        for feature_index, X in triangulate_stereo(self.matcher, kf.camera, kf.pose, kf.features, kf.right,
                                                   self.stereo_baseline, free):
            with world.lock:
                point = world.add_point(X, kf.features.descriptors[feature_index], kf_id)
                world.add_observation(point.id, kf_id, feature_index)
            created.append(point.id)
        return created

    def register_points(self, kf_id: int) -> List[int]:
        """Queue the points a keyframe created outside this stage (initialization) for culling."""
        with self.world.lock:
            kf = self.world.keyframes.get(kf_id)
            if kf is None:
                return []
            owned = sorted(p for p in set(kf.point_ids()) if self.world.points[p].reference_kf == kf_id)
        known = set(self._recent_points)
        fresh = [p for p in owned if p not in known]
        self._recent_points.extend(fresh)
        return fresh

    def cull_points(self) -> List[int]:
        """Drop recent points still seen by too few keyframes once their grace period is over."""
        world = self.world
        removed = []
        keep = []
        with world.lock:
            for point_id in self._recent_points:
                point = world.points.get(point_id)
                if point is None:
                    continue
                if world.insertions - point.created_at < self.config.cull_grace:
                    keep.append(point_id)
                elif point.num_observations < self.config.cull_min_observers:
                    world.remove_point(point_id)
                    removed.append(point_id)
        self._recent_points = keep
        return removed

    def cull_keyframes(self, kf_id: int) -> List[int]:
        """Remove covisible keyframes whose points are mostly seen by enough other keyframes."""
        world = self.world
        removed = []
        with world.lock:
            for other_id in world.covisible(kf_id):
                if other_id in (kf_id, world.origin_kf) or other_id not in world.keyframes:
                    continue
                if self._redundant(other_id):
                    world.remove_keyframe(other_id)
                    removed.append(other_id)
                    if self.on_keyframe_removed is not None:
                        self.on_keyframe_removed(other_id)
        if removed:
            logger.debug("culled keyframes %s", removed)
        return removed

    def _redundant(self, kf_id: int) -> bool:
        point_ids = self.world.keyframes[kf_id].point_ids()
        if not point_ids:
            return False
        shared = sum(1 for p in point_ids
                     if self.world.points[p].num_observations - 1 >= self.config.cull_min_observers)
        return shared >= self.config.redundancy * len(point_ids)

    def cull(self, kf_id: Optional[int] = None) -> Tuple[List[int], List[int]]:
        """(removed point ids, removed keyframe ids)."""
        points = self.cull_points()
        keyframes = self.cull_keyframes(kf_id) if kf_id is not None and kf_id in self.world.keyframes else []
        return points, keyframes

    def process(self, kf_id: int) -> MappingReport:
        with self._measure("LM"):
            return self._map_keyframe(kf_id)

    def _map_keyframe(self, kf_id: int) -> MappingReport:
        report = MappingReport(kf_id)
        if kf_id not in self.world.keyframes:
            return report
        self.register_points(kf_id)
        report.new_points = len(self.create_map_points(kf_id))
        report.culled_points = len(self.cull_points())
        try:
            report.bundle_adjustment = local_bundle_adjust(
                self.world, kf_id, self.config.window, self.config.lam, self.config.ba_iterations,
                self.adaptive_weights, remove_outliers=True)
        except RankDeficiencyError as e:
            logger.debug("local BA around keyframe %d skipped: %s", kf_id, e)
        report.culled_keyframes = self.cull_keyframes(kf_id)
        self.reports.append(report)
        logger.debug("keyframe %d mapped: %d new points, %d culled points, %d culled keyframes",
                     kf_id, report.new_points, report.culled_points, len(report.culled_keyframes))
        return report

