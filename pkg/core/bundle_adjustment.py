"""Weighted reprojection objective, Levenberg-Marquardt bundle adjustment and motion-only refinement.

Each observation of map point X_i in keyframe j contributes rho(e^T Λ_i e) with
e = π(P_j X_i) − u_ij, Λ_i = ½(f_sp + f_o) I and rho the Huber kernel on chi².
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from core.errors import RankDeficiencyError, SlamError
from core.geometry import DEPTH_EPSILON, PinholeCamera, PoseSE3, skew
from core.world_map import MapPoint, WorldMap

logger = logging.getLogger(__name__)

CHI2_2DOF = 5.991
INITIAL_DAMPING = 1e-4
DAMPING_UP = 10.0
DAMPING_DOWN = 0.5
MIN_RELATIVE_DECREASE = 1e-6
GRADIENT_TOLERANCE = 1e-10


def observation_weight(obs: int, lam: int) -> float:
    """f_o: 0 for unobserved points, Obs/λ below λ, logistic(Obs) from λ on."""
    if obs < 0 or lam < 1:
        raise SlamError("observation count must be >= 0 and lambda >= 1")
    if obs == 0:
        return 0.0
    if obs < lam:
        return obs / lam
    return float(1.0 / (1.0 + np.exp(-obs)))


def information_weight(score: float, obs: int, lam: int) -> float:
    return 0.5 * (score + observation_weight(obs, lam))


def information_matrix(point: MapPoint, lam: int) -> np.ndarray:
    return information_weight(point.score, point.num_observations, lam) * np.eye(2)


def huber(chi2: np.ndarray, delta2: float = CHI2_2DOF) -> Tuple[np.ndarray, np.ndarray]:
    """Huber kernel on squared errors: (rho(s), rho'(s))."""
    chi2 = np.asarray(chi2, dtype=float)
    inlier = chi2 <= delta2
    root = np.sqrt(np.maximum(chi2, 1e-300))
    delta = np.sqrt(delta2)
    rho = np.where(inlier, chi2, 2.0 * delta * root - delta2)
    drho = np.where(inlier, 1.0, delta / root)
    return rho, drho


def reprojection_jacobians(camera: PinholeCamera, pose: PoseSE3, point: np.ndarray,
                           pixel: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(residual, d residual / d pose-delta (2×6), d residual / d point (2×3)).

    The pose derivative is taken with respect to the (rho, phi) increment of PoseSE3.retract.
    """
    p = pose.R @ np.asarray(point, dtype=float) + pose.translation
    if p[2] <= DEPTH_EPSILON:
        raise SlamError("point is behind the camera")
    z = p[2]
    projected = np.array([camera.fx * p[0] / z + camera.cx, camera.fy * p[1] / z + camera.cy])
    residual = projected - (np.zeros(2) if pixel is None else np.asarray(pixel, dtype=float))
    J_proj = np.array([[camera.fx / z, 0.0, -camera.fx * p[0] / z ** 2],
                       [0.0, camera.fy / z, -camera.fy * p[1] / z ** 2]])
    J_pose = J_proj @ np.hstack([np.eye(3), -skew(p)])
    J_point = J_proj @ pose.R
    return residual, J_pose, J_point


def _residuals(camera: PinholeCamera, pose: PoseSE3, points: np.ndarray,
               pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pc = points @ pose.R.T + pose.translation
    z = pc[:, 2]
    valid = z > DEPTH_EPSILON
    safe = np.where(valid, z, 1.0)
    projected = np.column_stack([camera.fx * pc[:, 0] / safe + camera.cx,
                                 camera.fy * pc[:, 1] / safe + camera.cy])
    return projected - pixels, valid


def pose_objective(camera: PinholeCamera, pose: PoseSE3, points: np.ndarray, pixels: np.ndarray,
                   weights: Optional[np.ndarray] = None, mask: Optional[np.ndarray] = None) -> float:
    """Robust motion-only objective over the masked observations; inf if any lies behind the camera."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    weights = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)
    if mask is not None:
        points, pixels, weights = points[mask], pixels[mask], weights[mask]
    if len(points) == 0:
        return 0.0
    residual, valid = _residuals(camera, pose, points, pixels)
    if not valid.all():
        return float("inf")
    rho, _ = huber(weights * np.sum(residual ** 2, axis=1))
    return float(rho.sum())


@dataclass
class PoseOptimizationResult:
    pose: PoseSE3
    inliers: np.ndarray
    initial_cost: float
    final_cost: float

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def optimize_pose(camera: PinholeCamera, pose: PoseSE3, points: np.ndarray, pixels: np.ndarray,
                  weights: Optional[np.ndarray] = None, rounds: int = 4, iterations: int = 10,
                  chi2_threshold: float = CHI2_2DOF) -> PoseOptimizationResult:
    """Gauss-Newton on the pose with landmarks fixed, reclassifying inliers between rounds.

    The returned pose never has a higher objective than the input pose on the final inlier set.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    weights = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    inliers = np.ones(len(points), dtype=bool)
    if len(points) == 0:
        return PoseOptimizationResult(pose, inliers, 0.0, 0.0)

    start = pose
    current = pose
    for _ in range(rounds):
        cost = pose_objective(camera, current, points, pixels, weights, inliers)
        for _ in range(iterations):
            if not inliers.any():
                break
            H = np.zeros((6, 6))
            g = np.zeros(6)
            pc = points[inliers] @ current.R.T + current.translation
            residual, valid = _residuals(camera, current, points[inliers], pixels[inliers])
            if not valid.all():
                break
            chi2 = weights[inliers] * np.sum(residual ** 2, axis=1)
            _, drho = huber(chi2)
            scale = drho * weights[inliers]
            for p, r, s in zip(pc, residual, scale):
                z = p[2]
                J_proj = np.array([[camera.fx / z, 0.0, -camera.fx * p[0] / z ** 2],
                                   [0.0, camera.fy / z, -camera.fy * p[1] / z ** 2]])
                J = J_proj @ np.hstack([np.eye(3), -skew(p)])
                H += s * J.T @ J
                g += s * J.T @ r
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)):
                break
            candidate = current.retract(step)
            candidate_cost = pose_objective(camera, candidate, points, pixels, weights, inliers)
            if candidate_cost >= cost:
                break
            current, cost = candidate, candidate_cost
            if np.linalg.norm(step) < 1e-10:
                break

        residual, valid = _residuals(camera, current, points, pixels)
        chi2 = weights * np.sum(residual ** 2, axis=1)
        inliers = valid & (chi2 <= chi2_threshold)

    initial_cost = pose_objective(camera, start, points, pixels, weights, inliers)
    final_cost = pose_objective(camera, current, points, pixels, weights, inliers)
    if final_cost > initial_cost:
        current, final_cost = start, initial_cost
    return PoseOptimizationResult(current, inliers, initial_cost, final_cost)


@dataclass
class BundleAdjustmentReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    keyframes: List[int] = field(default_factory=list)
    fixed_keyframes: List[int] = field(default_factory=list)
    points: int = 0
    removed_observations: int = 0
    cost_history: List[float] = field(default_factory=list)


class _BundleProblem:
    """Sparse reprojection problem over a set of free and fixed keyframes."""

    def __init__(self, world: WorldMap, free_kfs: Sequence[int], fixed_kfs: Sequence[int],
                 point_ids: Sequence[int], lam: int, adaptive_weights: bool):
        self.free_kfs = list(free_kfs)
        self.fixed_kfs = list(fixed_kfs)
        self.kf_ids = self.free_kfs + self.fixed_kfs
        kf_index = {kf_id: i for i, kf_id in enumerate(self.kf_ids)}
        self.point_ids = list(point_ids)

        self.poses = [world.keyframes[kf_id].pose for kf_id in self.kf_ids]
        self.points = np.array([world.points[p].position for p in self.point_ids]).reshape(-1, 3)

        obs_pose, obs_point, pixels, intrinsics, weights = [], [], [], [], []
        for j, point_id in enumerate(self.point_ids):
            point = world.points[point_id]
            w = information_weight(point.score, point.num_observations, lam) if adaptive_weights else 1.0
            for kf_id, feature_index in sorted(point.observations.items()):
                if kf_id not in kf_index:
                    continue
                kf = world.keyframes[kf_id]
                obs_pose.append(kf_index[kf_id])
                obs_point.append(j)
                pixels.append(kf.features.keypoints[feature_index])
                intrinsics.append((kf.camera.fx, kf.camera.fy, kf.camera.cx, kf.camera.cy))
                weights.append(w)
        self.obs_pose = np.asarray(obs_pose, dtype=int)
        self.obs_point = np.asarray(obs_point, dtype=int)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.intrinsics = np.asarray(intrinsics, dtype=float).reshape(-1, 4)
        self.weights = np.asarray(weights, dtype=float)
        self.n_free = len(self.free_kfs)

    @property
    def num_parameters(self) -> int:
        return 6 * self.n_free + 3 * len(self.point_ids)

    def _camera_points(self, poses: List[PoseSE3], points: np.ndarray) -> np.ndarray:
        R = np.stack([pose.R for pose in poses])
        t = np.stack([pose.translation for pose in poses])
        return np.einsum("nij,nj->ni", R[self.obs_pose], points[self.obs_point]) + t[self.obs_pose]

    def residuals(self, poses: List[PoseSE3], points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pc = self._camera_points(poses, points)
        z = pc[:, 2]
        valid = z > DEPTH_EPSILON
        safe = np.where(valid, z, 1.0)
        fx, fy, cx, cy = self.intrinsics.T
        projected = np.column_stack([fx * pc[:, 0] / safe + cx, fy * pc[:, 1] / safe + cy])
        return projected - self.pixels, pc, valid

    def chi2(self, poses: List[PoseSE3], points: np.ndarray) -> np.ndarray:
        residual, _, valid = self.residuals(poses, points)
        chi2 = self.weights * np.sum(residual ** 2, axis=1)
        return np.where(valid, chi2, np.inf)

    def cost(self, poses: List[PoseSE3], points: np.ndarray) -> float:
        chi2 = self.chi2(poses, points)
        if not np.all(np.isfinite(chi2)):
            return float("inf")
        rho, _ = huber(chi2)
        return float(rho.sum())

    def linearize(self, poses: List[PoseSE3], points: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray]:
        """Normal equations (H, g) of the IRLS-weighted system."""
        residual, pc, _ = self.residuals(poses, points)
        chi2 = self.weights * np.sum(residual ** 2, axis=1)
        _, drho = huber(chi2)
        root = np.sqrt(drho * self.weights)

        fx, fy = self.intrinsics[:, 0], self.intrinsics[:, 1]
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        n = len(pc)
        J_proj = np.zeros((n, 2, 3))
        J_proj[:, 0, 0] = fx / z
        J_proj[:, 0, 2] = -fx * x / z ** 2
        J_proj[:, 1, 1] = fy / z
        J_proj[:, 1, 2] = -fy * y / z ** 2

        R = np.stack([pose.R for pose in poses])[self.obs_pose]
        J_point = np.einsum("nij,njk->nik", J_proj, R)
        lift = np.zeros((n, 3, 6))
        lift[:, :, :3] = np.eye(3)
        lift[:, 0, 4], lift[:, 0, 5] = z, -y
        lift[:, 1, 3], lift[:, 1, 5] = -z, x
        lift[:, 2, 3], lift[:, 2, 4] = y, -x
        J_pose = np.einsum("nij,njk->nik", J_proj, lift)

        J_pose *= root[:, None, None]
        J_point *= root[:, None, None]
        r = (residual * root[:, None]).reshape(-1)

        rows, cols, vals = [], [], []
        obs_rows = 2 * np.arange(n)
        point_cols = 6 * self.n_free + 3 * self.obs_point
        for a in range(2):
            for b in range(3):
                rows.append(obs_rows + a)
                cols.append(point_cols + b)
                vals.append(J_point[:, a, b])
        free = self.obs_pose < self.n_free
        pose_cols = 6 * self.obs_pose[free]
        for a in range(2):
            for b in range(6):
                rows.append(obs_rows[free] + a)
                cols.append(pose_cols + b)
                vals.append(J_pose[free, a, b])
        J = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(2 * n, self.num_parameters))
        H = (J.T @ J).tocsr()
        g = J.T @ r
        return H, g

    def apply(self, poses: List[PoseSE3], points: np.ndarray,
              delta: np.ndarray) -> Tuple[List[PoseSE3], np.ndarray]:
        updated = [poses[i].retract(delta[6 * i:6 * i + 6]) for i in range(self.n_free)]
        updated += poses[self.n_free:]
        return updated, points + delta[6 * self.n_free:].reshape(-1, 3)

    def solve(self, max_iterations: int) -> Tuple[List[PoseSE3], np.ndarray, BundleAdjustmentReport]:
        poses, points = list(self.poses), self.points.copy()
        cost = self.cost(poses, points)
        report = BundleAdjustmentReport(cost, cost, 0, False, cost_history=[cost])
        damping = INITIAL_DAMPING
        for _ in range(max_iterations):
            if cost <= 0.0:
                report.converged = True
                break
            H, g = self.linearize(poses, points)
            if np.max(np.abs(g)) < GRADIENT_TOLERANCE:
                report.converged = True
                break
            accepted = False
            while damping < 1e12:
                augmented = H + damping * sparse.diags(H.diagonal())
                delta = spsolve(augmented.tocsc(), -g)
                if not np.all(np.isfinite(delta)):
                    raise RankDeficiencyError("damped normal equations are singular")
                new_poses, new_points = self.apply(poses, points, delta)
                new_cost = self.cost(new_poses, new_points)
                if new_cost < cost:
                    accepted = True
                    break
                damping *= DAMPING_UP
            if not accepted:
                report.converged = True
                break
            decrease = (cost - new_cost) / cost
            poses, points, cost = new_poses, new_points, new_cost
            damping = max(damping * DAMPING_DOWN, 1e-12)
            report.iterations += 1
            report.cost_history.append(cost)
            if decrease < MIN_RELATIVE_DECREASE:
                report.converged = True
                break
        report.final_cost = cost
        return poses, points, report


def _multi_view_points(world: WorldMap, kf_ids: Set[int]) -> List[int]:
    point_ids = []
    for point_id in sorted(world.points_of(kf_ids)):
        if world.points[point_id].num_observations >= 2:
            point_ids.append(point_id)
    return point_ids


def _prepare(world: WorldMap, free: List[int], fixed: List[int], point_ids: List[int], lam: int,
             adaptive_weights: bool) -> _BundleProblem:
    """Copy the window out of the map; the caller holds `world.lock`."""
    if not fixed:
        raise RankDeficiencyError("no fixed keyframe: the gauge is unconstrained")
    if not point_ids:
        raise RankDeficiencyError("window has no landmark observed from two keyframes")
    point_set = set(point_ids)
    free = [kf for kf in free if point_set.intersection(world.keyframes[kf].associations.values())]
    problem = _BundleProblem(world, free, fixed, point_ids, lam, adaptive_weights)
    behind = ~np.isfinite(problem.chi2(problem.poses, problem.points))
    if behind.any():
        dropped = {point_ids[j] for j in problem.obs_point[behind]}
        logger.debug("excluding %d landmarks behind an observing camera", len(dropped))
        point_ids = [p for p in point_ids if p not in dropped]
        problem = _BundleProblem(world, free, fixed, point_ids, lam, adaptive_weights)
    observed = np.bincount(problem.obs_point, minlength=len(point_ids))
    if not point_ids or len(problem.obs_point) == 0 or observed.min() < 2:
        raise RankDeficiencyError("a landmark has a single constraining view")
    return problem


def _write_back(world: WorldMap, problem: _BundleProblem, poses: List[PoseSE3], points: np.ndarray,
                remove_outliers: bool) -> int:
    """Store the solution; keyframes, points and observations removed during the solve are skipped."""
    removed = 0
    with world.lock:
        for kf_id, pose in zip(problem.kf_ids[:problem.n_free], poses[:problem.n_free]):
            if kf_id in world.keyframes:
                world.keyframes[kf_id].pose = pose
        for point_id, position in zip(problem.point_ids, points):
            if point_id in world.points:
                world.points[point_id].position = position
        if remove_outliers:
            chi2 = problem.chi2(poses, points)
            for k in np.flatnonzero(chi2 > CHI2_2DOF):
                point = world.points.get(problem.point_ids[problem.obs_point[k]])
                kf_id = problem.kf_ids[problem.obs_pose[k]]
                if point is None or kf_id not in point.observations:
                    continue
                world.remove_observation(point.id, kf_id)
                removed += 1
    return removed


def _run(world: WorldMap, free: List[int], fixed: List[int], point_ids: List[int], lam: int,
         adaptive_weights: bool, max_iterations: int, remove_outliers: bool) -> BundleAdjustmentReport:
    """Snapshot under the map lock, solve without it, then re-lock to write the result back."""
    with world.lock:
        problem = _prepare(world, free, fixed, point_ids, lam, adaptive_weights)

    poses, points, report = problem.solve(max_iterations)
    report.keyframes = list(problem.free_kfs)
    report.fixed_keyframes = list(problem.fixed_kfs)
    report.points = len(problem.point_ids)
    report.removed_observations = _write_back(world, problem, poses, points, remove_outliers)
    logger.debug("BA over %d keyframes (%d fixed), %d points: %.4g -> %.4g in %d iterations",
                 problem.n_free, len(problem.fixed_kfs), len(problem.point_ids), report.initial_cost,
                 report.final_cost, report.iterations)
    return report


def local_bundle_adjust(world: WorldMap, center_kf: int, window: int = 10, lam: int = 5,
                        max_iterations: int = 20, adaptive_weights: bool = True,
                        fixed: Iterable[int] = (), remove_outliers: bool = False) -> BundleAdjustmentReport:
    """Optimize the center keyframe, its covisibility neighbours and the points they observe.

    Keyframes outside the window that observe those points stay fixed as anchors, as does the
    map's first keyframe and anything passed in `fixed`. The map is untouched on RankDeficiencyError.
    The map lock is held only while the window is copied out and while the result is written back.
    """
    with world.lock:
        local = [center_kf] + world.covisible(center_kf, n=window)
        extra_fixed = set(fixed)
        local_set = set(local)
        point_ids = _multi_view_points(world, local_set)
        anchors: Set[int] = set()
        for point_id in point_ids:
            anchors.update(kf for kf in world.points[point_id].observations if kf not in local_set)
        free = [kf for kf in local if kf not in extra_fixed and kf != world.origin_kf]
        fixed_kfs = sorted((anchors | extra_fixed | ({world.origin_kf} & local_set)) & set(world.keyframes))
    return _run(world, free, fixed_kfs, point_ids, lam, adaptive_weights, max_iterations, remove_outliers)


def global_bundle_adjust(world: WorldMap, lam: int = 5, max_iterations: int = 10,
                         adaptive_weights: bool = True, fixed: Iterable[int] = ()) -> BundleAdjustmentReport:
    """All keyframes and points, with the map's first keyframe held fixed."""
    with world.lock:
        all_kfs = sorted(world.keyframes)
        fixed_kfs = sorted(set(fixed) | ({world.origin_kf} & set(all_kfs)))
        free = [kf for kf in all_kfs if kf not in fixed_kfs]
        point_ids = _multi_view_points(world, set(all_kfs))
    return _run(world, free, fixed_kfs, point_ids, lam, adaptive_weights, max_iterations, False)


def total_objective(world: WorldMap, lam: int = 5, adaptive_weights: bool = True) -> float:
    """Robust reprojection objective of the whole map."""
    with world.lock:
        kf_ids = sorted(world.keyframes)
        point_ids = _multi_view_points(world, set(kf_ids))
        if not point_ids:
            return 0.0
        problem = _BundleProblem(world, [], kf_ids, point_ids, lam, adaptive_weights)
        return problem.cost(problem.poses, problem.points)
