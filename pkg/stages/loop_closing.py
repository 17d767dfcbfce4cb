"""Loop closing stage: place recognition, Sim(3) estimation, covisibility verification and correction."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy.spatial import cKDTree

from core.bundle_adjustment import BundleAdjustmentReport, global_bundle_adjust, total_objective
from core.config import LoopSection, MappingSection
from core.errors import GeometryError, NoCandidateError, NoConsensusError, RankDeficiencyError, TooFewMatchesError
from core.features import FeatureSet
from core.geometry import PoseSE3, PoseSim3, project_points, solve_sim3_umeyama
from core.matching import Matcher
from core.pose_graph import essential_graph
from core.vocabulary import UNANCHORED_MIN_SCORE, KeyframeDatabase, VocabularyTree
from core.world_map import WorldMap
from stages.pipeline import PipelineStage
from stages.timing import StageTimer

logger = logging.getLogger(__name__)

SIM3_CHI2 = 9.210  # 2 DoF, 99%
SIM3_ITERATIONS = 300
VERIFY_NEIGHBOURS = 5
GROUP_NEIGHBOURS = 10


@dataclass
class Sim3Estimate:
    transform: PoseSim3  # camera of K_m -> camera of K_a
    point_pairs: List[Tuple[int, int]]  # (point of K_a, point of K_m) inliers
    matches: int

    @property
    def num_inliers(self) -> int:
        return len(self.point_pairs)


@dataclass
class VerificationResult:
    passed: bool
    total: int
    per_keyframe: Dict[int, int] = field(default_factory=dict)


@dataclass
class LoopCorrectionReport:
    query_kf: int
    match_kf: int
    transform: PoseSim3
    corrected_keyframes: List[int] = field(default_factory=list)
    fused_points: int = 0
    pre_objective: float = 0.0
    post_objective: float = 0.0
    pose_graph_initial_cost: float = 0.0
    pose_graph_final_cost: float = 0.0
    global_ba: Optional[BundleAdjustmentReport] = None


@dataclass
class LoopEvent:
    kf_id: int
    candidate: int
    accepted: bool
    reason: str = ""
    inliers: int = 0
    verified_matches: int = 0
    report: Optional[LoopCorrectionReport] = None


def _sim3_inliers(S: PoseSim3, cam_a, cam_m, Xa: np.ndarray, Xm: np.ndarray,
                  pix_a: np.ndarray, pix_m: np.ndarray) -> np.ndarray:
    """Reprojection test of the transformed points in both keyframes."""
    identity = PoseSE3.identity()
    in_a, _, valid_a = project_points(cam_a, identity, S.transform(Xm))
    in_m, _, valid_m = project_points(cam_m, identity, S.inverse().transform(Xa))
    err_a = np.sum((in_a - pix_a) ** 2, axis=1)
    err_m = np.sum((in_m - pix_m) ** 2, axis=1)
    return valid_a & valid_m & (err_a < SIM3_CHI2) & (err_m < SIM3_CHI2)


def compute_sim3(world: WorldMap, matcher: Matcher, kf_a: int, kf_m: int, with_scale: bool = True,
                 min_inliers: int = 20, iterations: int = SIM3_ITERATIONS, seed: int = 0) -> Sim3Estimate:
    """Similarity taking K_m's camera frame to K_a's, from matched map points of both keyframes."""
    with world.lock:
        ka, km = world.keyframes[kf_a], world.keyframes[kf_m]
        matches = matcher.match_sets(ka.features, km.features)
        rows = [(int(a), int(b), ka.associations[int(a)], km.associations[int(b)])
                for a, b in zip(matches.index_a, matches.index_b)
                if int(a) in ka.associations and int(b) in km.associations]
        if len(rows) < min_inliers:
            raise TooFewMatchesError(f"{len(rows)} map-point matches between keyframes {kf_a} and {kf_m}")
        Xa = ka.pose.transform(np.array([world.points[r[2]].position for r in rows]))
        Xm = km.pose.transform(np.array([world.points[r[3]].position for r in rows]))
        pix_a = ka.features.keypoints[[r[0] for r in rows]]
        pix_m = km.features.keypoints[[r[1] for r in rows]]
        cam_a, cam_m = ka.camera, km.camera

    rng = np.random.default_rng(seed)
    n = len(rows)
    best: Optional[PoseSim3] = None
    best_mask = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        sample = rng.choice(n, size=3, replace=False)
        try:
            S = solve_sim3_umeyama(Xm[sample], Xa[sample], with_scale)
        except GeometryError:
            continue
        mask = _sim3_inliers(S, cam_a, cam_m, Xa, Xm, pix_a, pix_m)
        if mask.sum() > best_mask.sum():
            best, best_mask = S, mask
            if mask.all():
                break
    if best is None or best_mask.sum() < min_inliers:
        raise NoConsensusError(f"Sim(3) consensus {int(best_mask.sum())} below {min_inliers}")

    refined = solve_sim3_umeyama(Xm[best_mask], Xa[best_mask], with_scale)
    refined_mask = _sim3_inliers(refined, cam_a, cam_m, Xa, Xm, pix_a, pix_m)
    if refined_mask.sum() >= best_mask.sum():
        best, best_mask = refined, refined_mask
    pairs = [(rows[k][2], rows[k][3]) for k in np.flatnonzero(best_mask)]
    logger.debug("Sim(3) %d->%d: %d/%d inliers, scale %.4f", kf_m, kf_a, len(pairs), n, best.scale)
    return Sim3Estimate(best, pairs, n)


def verify_covisible(world: WorldMap, matcher: Matcher, kf_a: int, kf_m: int, transform: PoseSim3,
                     threshold: int = 40, radius: float = 5.0) -> VerificationResult:
    """Project K_m's points into K_a's best covisible keyframes through T_ja·T_am and count matches."""
    with world.lock:
        neighbours = world.covisible(kf_a, n=VERIFY_NEIGHBOURS)
        if not neighbours:
            return VerificationResult(False, 0)
        ka, km = world.keyframes[kf_a], world.keyframes[kf_m]
        point_ids = km.point_ids()
        if not point_ids:
            return VerificationResult(False, 0)
        in_m = km.pose.transform(np.array([world.points[p].position for p in point_ids]))
        descriptors = np.array([world.points[p].descriptor for p in point_ids])
        scores = np.array([world.points[p].score for p in point_ids])
        views = [(j, world.keyframes[j].pose, world.keyframes[j].features, world.keyframes[j].camera)
                 for j in neighbours]
        S_a_inv = ka.pose.to_sim3().inverse()

    counts: Dict[int, int] = {}
    for j, pose_j, features_j, camera_j in views:
        T_jm = pose_j.to_sim3().compose(S_a_inv).compose(transform)
        pixels, _, valid = project_points(camera_j, PoseSE3.identity(), T_jm.transform(in_m))
        visible = np.flatnonzero(valid & camera_j.in_image(pixels))
        if len(visible) == 0:
            counts[j] = 0
            continue
        projected = FeatureSet(pixels[visible], scores[visible], descriptors[visible])
        counts[j] = len(matcher.match_in_window(projected, features_j, pixels[visible], radius))
    total = sum(counts.values())
    return VerificationResult(total >= threshold, total, counts)


def fuse_duplicates(world: WorldMap, points_a: Iterable[int], points_m: Iterable[int], radius: float) -> int:
    """Merge mutual-nearest point pairs closer than `radius`; the point with more observations survives."""
    with world.lock:
        ids_a = sorted(p for p in set(points_a) if p in world.points)
        ids_m = sorted(p for p in set(points_m) - set(ids_a) if p in world.points)
        if not ids_a or not ids_m or radius <= 0:
            return 0
        pos_a = np.array([world.points[p].position for p in ids_a])
        pos_m = np.array([world.points[p].position for p in ids_m])
        dist_am, near_m = cKDTree(pos_m).query(pos_a)
        _, near_a = cKDTree(pos_a).query(pos_m)
        fused = 0
        for i, (d, j) in enumerate(zip(dist_am, near_m)):
            if d >= radius or near_a[j] != i:
                continue
            a, m = ids_a[i], ids_m[j]
            keep, drop = (a, m) if (world.points[a].num_observations, -a) > (world.points[m].num_observations, -m) \
                else (m, a)
            world.replace_point(drop, keep)
            fused += 1
        return fused


def spanning_parents(world: WorldMap) -> Dict[int, int]:
    """Parent of every keyframe: the earlier keyframe it shares most points with."""
    parents = {}
    ordered = sorted(world.keyframes)
    for index, kf_id in enumerate(ordered[1:], start=1):
        row = world.covisibility.get(kf_id, {})
        earlier = [(w, -k) for k, w in row.items() if k < kf_id and k in world.keyframes]
        parents[kf_id] = -max(earlier)[1] if earlier else ordered[index - 1]
    return parents


def _propagate_points(world: WorldMap, neighbourhood: List[int], uncorrected: Dict[int, PoseSim3],
                      corrected: Dict[int, PoseSim3]) -> Dict[int, int]:
    """Move the points seen around K_a with their reference keyframe; returns point id -> keyframe used."""
    corrected_by: Dict[int, int] = {}
    for k in neighbourhood:
        if k not in world.keyframes:
            continue
        for point_id in world.keyframes[k].point_ids():
            if point_id in corrected_by:
                continue
            point = world.points[point_id]
            ref = point.reference_kf if point.reference_kf in corrected else k
            local = uncorrected[ref].transform(point.position[None])
            point.position = corrected[ref].inverse().transform(local)[0]
            corrected_by[point_id] = ref
    return corrected_by


def _apply_optimized(world: WorldMap, initial: Dict[int, PoseSim3], uncorrected: Dict[int, PoseSim3],
                     optimized: Dict[int, PoseSim3], corrected_by: Dict[int, int]) -> Dict[int, PoseSim3]:
    """Write the optimized graph into the map and return each keyframe's pose change."""
    for point_id, point in world.points.items():
        ref = corrected_by.get(point_id, point.reference_kf)
        if ref not in optimized:
            ref = next((k for k in point.observations if k in optimized), None)
            if ref is None:
                continue
        local = initial[ref].transform(point.position[None])
        point.position = optimized[ref].inverse().transform(local)[0]

    deltas = {}
    for k, S in optimized.items():
        if k in world.keyframes:
            deltas[k] = uncorrected[k].inverse().compose(S)
            world.keyframes[k].pose = S.to_se3()
    # keyframes tracking inserted while the graph was solved follow their strongest optimized neighbour
    for k in sorted(set(world.keyframes) - set(optimized)):
        anchor = next((j for j in world.covisible(k) if j in deltas), None)
        if anchor is None:
            continue
        deltas[k] = deltas[anchor]
        world.keyframes[k].pose = world.keyframes[k].pose.to_sim3().compose(deltas[anchor]).to_se3()
    return deltas


def correct_loop(world: WorldMap, kf_a: int, kf_m: int, transform: PoseSim3, with_scale: bool = True,
                 fusion_radius: float = 0.05, min_edge_weight: int = 100,
                 past_loops: Iterable[Tuple[int, int]] = (), lam: int = 5, ba_iterations: int = 10,
                 adaptive_weights: bool = True) -> LoopCorrectionReport:
    """Propagate the loop transform, fuse the seam, optimize the essential graph, then global BA.

    The map lock is held while the graph is built and while the correction is written back, so
    tracking sees either the old map or the fully corrected one. The graph solve and the solve
    step of global BA run without it.
    """
    report = LoopCorrectionReport(kf_a, kf_m, transform)
    with world.lock:
        report.pre_objective = total_objective(world, lam, adaptive_weights)
        uncorrected = {k: kf.pose.to_sim3() for k, kf in world.keyframes.items()}
        neighbourhood = [kf_a] + world.covisible(kf_a)
        corrected_a = transform.compose(uncorrected[kf_m])
        to_corrected = uncorrected[kf_a].inverse().compose(corrected_a)
        corrected = {k: uncorrected[k].compose(to_corrected) for k in neighbourhood}

        loop_side = [kf_m] + world.covisible(kf_m)
        seam = set(neighbourhood)
        loop_connections = {i: [j for j in loop_side if j not in seam] for i in neighbourhood}
        initial = {k: corrected.get(k, uncorrected[k]) for k in uncorrected}
        graph = essential_graph(uncorrected, initial, uncorrected, spanning_parents(world),
                                lambda k: world.covisibility.get(k, {}), loop_connections, past_loops,
                                fixed=[kf_m], with_scale=with_scale, min_weight=min_edge_weight)

    report.pose_graph_initial_cost = graph.cost()
    optimized = graph.optimize()
    report.pose_graph_final_cost = graph.cost()

    with world.lock:
        corrected_by = _propagate_points(world, neighbourhood, uncorrected, corrected)
        report.fused_points = fuse_duplicates(world, corrected_by, world.points_of(loop_side), fusion_radius)
        deltas = _apply_optimized(world, initial, uncorrected, optimized, corrected_by)
        world.record_correction(deltas)
    report.corrected_keyframes = sorted(neighbourhood)

    try:
        report.global_ba = global_bundle_adjust(world, lam, ba_iterations, adaptive_weights)
    except RankDeficiencyError as e:
        logger.debug("global BA after loop skipped: %s", e)
    report.post_objective = total_objective(world, lam, adaptive_weights)
    logger.info("loop %d <-> %d corrected: %d keyframes moved, %d points fused, objective %.4g -> %.4g",
                kf_a, kf_m, len(report.corrected_keyframes), report.fused_points,
                report.pre_objective, report.post_objective)
    return report


class LoopCloser(PipelineStage):
    """Keyframe database upkeep, the consistency gate and loop correction."""

    name = "loop-closing"

    def __init__(self, world: WorldMap, matcher: Matcher, vocabulary: VocabularyTree,
                 database: Optional[KeyframeDatabase] = None, config: Optional[LoopSection] = None,
                 mapping: Optional[MappingSection] = None, with_scale: bool = True,
                 adaptive_weights: bool = True, local_mapper: Optional[PipelineStage] = None, seed: int = 0,
                 timer: Optional[StageTimer] = None):
        super().__init__(timer)
        self.world = world
        self.matcher = matcher
        self.vocabulary = vocabulary
        self.database = database if database is not None else KeyframeDatabase(vocabulary)
        self.config = config or LoopSection()
        self.mapping = mapping or MappingSection()
        self.with_scale = with_scale
        self.adaptive_weights = adaptive_weights
        self.local_mapper = local_mapper
        self.seed = seed
        self.events: List[LoopEvent] = []
        self.past_loops: List[Tuple[int, int]] = []
        self._groups: List[Tuple[Set[int], int]] = []
        self._last_loop_kf = -1

    def add_keyframe(self, kf_id: int) -> None:
        kf = self.world.keyframes.get(kf_id)
        if kf is None:
            return
        if kf.bow is None:
            kf.bow = self.vocabulary.transform(kf.features)
        self.database.add(kf_id, kf.bow)

    def detect(self, kf_id: int) -> List[int]:
        """Candidates whose covisibility group has been detected in enough consecutive keyframes."""
        world = self.world
        kf = world.keyframes[kf_id]
        if kf.bow is None:
            kf.bow = self.vocabulary.transform(kf.features)
        if len(world.keyframes) <= self.config.min_keyframe_gap or \
                kf_id - self._last_loop_kf < self.config.min_keyframe_gap:
            self._groups = []
            return []
        recent = {k for k in world.keyframes if kf_id - k < self.config.min_keyframe_gap}
        covisible = set(world.covisible(kf_id))
        floor = self.database.similarity_floor(kf.bow, covisible)
        try:
            candidates = self.database.detect_candidates(
                kf_id, kf.bow, covisible | recent, lambda k: world.covisible(k, n=GROUP_NEIGHBOURS),
                self.config.top_n, UNANCHORED_MIN_SCORE if floor is None else floor)
        except NoCandidateError:
            self._groups = []
            return []

        consistent = []
        groups: List[Tuple[Set[int], int]] = []
        for candidate in candidates:
            if candidate.kf_id in recent:
                continue
            group = {candidate.kf_id} | set(world.covisible(candidate.kf_id))
            count = 1 + max((c for g, c in self._groups if g & group), default=0)
            groups.append((group, count))
            if count >= self.config.consistency:
                consistent.append(candidate.kf_id)
        self._groups = groups
        return consistent

    def close(self, kf_id: int, candidate: int) -> LoopEvent:
        event = LoopEvent(kf_id, candidate, False)
        try:
            estimate = compute_sim3(self.world, self.matcher, kf_id, candidate, self.with_scale,
                                    self.config.sim3_min_inliers, seed=self.seed + kf_id)
        except (TooFewMatchesError, NoConsensusError) as e:
            event.reason = str(e)
            return event
        event.inliers = estimate.num_inliers
        verification = verify_covisible(self.world, self.matcher, kf_id, candidate, estimate.transform,
                                        self.config.verify_threshold, self.config.verify_radius)
        event.verified_matches = verification.total
        if not verification.passed:
            event.reason = f"covisibility verification found {verification.total} matches"
            return event

        stopped = self.local_mapper is None or self.local_mapper.request_stop()
        try:
            if not stopped:
                event.reason = "local mapping did not stop"
                return event
            event.report = correct_loop(
                self.world, kf_id, candidate, estimate.transform, self.with_scale, self.mapping.fusion_radius,
                self.config.covisibility_edge, self.past_loops, self.mapping.lam,
                self.config.global_ba_iterations, self.adaptive_weights)
        finally:
            if self.local_mapper is not None:
                self.local_mapper.release()
        event.accepted = True
        event.reason = "corrected"
        self.past_loops.append((kf_id, candidate))
        self._last_loop_kf = kf_id
        self._groups = []
        return event

    def process(self, kf_id: int) -> Optional[LoopEvent]:
        if kf_id not in self.world.keyframes:
            return None
        with self._measure("PR"):
            candidates = self.detect(kf_id)
            self.add_keyframe(kf_id)
        for candidate in candidates:
            if candidate not in self.world.keyframes:
                continue
            with self._measure("LC"):
                event = self.close(kf_id, candidate)
            self.events.append(event)
            logger.info("loop candidate %d for keyframe %d: %s", candidate, kf_id, event.reason)
            if event.accepted:
                return event
        return None

    def forget(self, kf_id: int) -> None:
        self.database.erase(kf_id)
