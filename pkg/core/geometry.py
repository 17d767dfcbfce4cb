"""Rigid and similarity transforms, pinhole projection and multi-view solvers.

Pose convention: every stored pose is world-to-camera, x_cam = R @ x_world + t.
Quaternions are scalar-last (x, y, z, w), the convention of scipy's Rotation.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from core.errors import (
    DegenerateConfigurationError,
    GeometryError,
    InsufficientCorrespondencesError,
    LowParallaxError,
    NegativeDepthError,
    NoConsensusError,
)

logger = logging.getLogger(__name__)

DEPTH_EPSILON = 1e-6
RANSAC_CONFIDENCE = 0.999

# A landmark is a finite 3-vector in the world frame.
Landmark3D = np.ndarray


def as_landmark(position) -> Landmark3D:
    point = np.asarray(position, dtype=float).reshape(3)
    if not np.all(np.isfinite(point)):
        raise GeometryError(f"landmark has non-finite coordinates: {point}")
    return point


def _unit_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < 1e-12:
        raise GeometryError(f"invalid quaternion {q}")
    q = q / norm
    # w >= 0 keeps a single representative per rotation
    return -q if q[3] < 0 else q


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians."""
    return float(np.linalg.norm(Rotation.from_matrix(R).as_rotvec()))


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quaternion(self.rotation))
        translation = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(translation)):
            raise GeometryError(f"non-finite translation {translation}")
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return cls(Rotation.from_rotvec(rotvec).as_quat(), t)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply other first."""
        rotation = Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)
        return PoseSE3(rotation.as_quat(), self.R @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        R_inv = self.R.T
        return PoseSE3(Rotation.from_quat(self.rotation).inv().as_quat(), -R_inv @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.translation

    def retract(self, delta: np.ndarray) -> "PoseSE3":
        """Left perturbation: R' = Exp(phi) R, t' = Exp(phi) t + rho, delta = (rho, phi)."""
        delta = np.asarray(delta, dtype=float)
        update = Rotation.from_rotvec(delta[3:6])
        rotation = update * Rotation.from_quat(self.rotation)
        return PoseSE3(rotation.as_quat(), update.apply(self.translation) + delta[:3])

    def to_sim3(self) -> "PoseSim3":
        return PoseSim3(self.rotation, self.translation, 1.0)

    def distance_to(self, other: "PoseSE3") -> Tuple[float, float]:
        """(translation distance, rotation angle) between two poses."""
        relative = self.inverse().compose(other)
        return float(np.linalg.norm(self.translation - other.translation)), rotation_angle(relative.R)


@dataclass(frozen=True)
class PoseSim3:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", _unit_quaternion(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0.0:
            raise GeometryError(f"Sim(3) scale must be positive, got {scale}")
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls) -> "PoseSim3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray, scale: float) -> "PoseSim3":
        return cls(Rotation.from_matrix(R).as_quat(), t, scale)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def compose(self, other: "PoseSim3") -> "PoseSim3":
        rotation = Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)
        return PoseSim3(rotation.as_quat(),
                        self.scale * (self.R @ other.translation) + self.translation,
                        self.scale * other.scale)

    def inverse(self) -> "PoseSim3":
        inv_scale = 1.0 / self.scale
        R_inv = self.R.T
        return PoseSim3(Rotation.from_quat(self.rotation).inv().as_quat(),
                        -inv_scale * (R_inv @ self.translation), inv_scale)

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.R.T) + self.translation

    def to_se3(self) -> PoseSE3:
        """Rigid camera pose equivalent to this world-to-camera similarity (translation / scale)."""
        return PoseSE3(self.rotation, self.translation / self.scale)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= 0) & (pixels[:, 0] < self.width)
                & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height))

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels (N, 2) to normalized image coordinates (N, 2)."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack([(pixels[:, 0] - self.cx) / self.fx,
                                (pixels[:, 1] - self.cy) / self.fy])

    def backproject(self, pixel: np.ndarray, depth: float) -> np.ndarray:
        """Camera-frame point at the given depth along the pixel's ray."""
        u, v = float(pixel[0]), float(pixel[1])
        return depth * np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def scaled(self, width: int, height: int) -> "PinholeCamera":
        sx, sy = width / self.width, height / self.height
        return PinholeCamera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def project(camera: PinholeCamera, pose: PoseSE3, point: np.ndarray) -> Optional[np.ndarray]:
    """Pixel of a world point, or None when the point is at or behind the image plane."""
    p = pose.R @ np.asarray(point, dtype=float) + pose.translation
    if p[2] <= DEPTH_EPSILON:
        return None
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def project_points(camera: PinholeCamera, pose: PoseSE3,
                   points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection: (pixels (N, 2), depths (N,), valid mask (N,))."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = points @ pose.R.T + pose.translation
    depth = pc[:, 2]
    valid = depth > DEPTH_EPSILON
    safe = np.where(valid, depth, 1.0)
    pixels = np.column_stack([camera.fx * pc[:, 0] / safe + camera.cx,
                              camera.fy * pc[:, 1] / safe + camera.cy])
    return pixels, depth, valid


def _projection_matrix(camera: PinholeCamera, pose: PoseSE3) -> np.ndarray:
    return camera.K @ np.hstack([pose.R, pose.translation[:, None]])


def parallax_angle(poseA: PoseSE3, poseB: PoseSE3, point: np.ndarray) -> float:
    """Angle in radians subtended at a point by two camera centres."""
    rayA = point - poseA.center()
    rayB = point - poseB.center()
    denom = np.linalg.norm(rayA) * np.linalg.norm(rayB)
    if denom < 1e-15:
        return 0.0
    return float(np.arccos(np.clip(rayA @ rayB / denom, -1.0, 1.0)))


def _ray_angle(camA: PinholeCamera, poseA: PoseSE3, camB: PinholeCamera, poseB: PoseSE3,
               pixA: np.ndarray, pixB: np.ndarray) -> float:
    rayA = poseA.R.T @ np.append(camA.normalize(pixA)[0], 1.0)
    rayB = poseB.R.T @ np.append(camB.normalize(pixB)[0], 1.0)
    cosine = rayA @ rayB / (np.linalg.norm(rayA) * np.linalg.norm(rayB))
    return float(np.arccos(np.clip(cosine, -1.0, 1.0)))


def triangulate(camA: PinholeCamera, poseA: PoseSE3, camB: PinholeCamera, poseB: PoseSE3,
                pixA: np.ndarray, pixB: np.ndarray,
                min_parallax_deg: float = 1.0,
                max_error_px: float = float(np.sqrt(5.991))) -> Landmark3D:
    """Linear DLT followed by one Gauss-Newton step on the two-view reprojection error."""
    pixA = np.asarray(pixA, dtype=float)
    pixB = np.asarray(pixB, dtype=float)
    baseline = np.linalg.norm(poseA.center() - poseB.center())
    min_parallax = np.deg2rad(min_parallax_deg)
    if baseline < 1e-12 or _ray_angle(camA, poseA, camB, poseB, pixA, pixB) < min_parallax:
        raise LowParallaxError("viewing rays are nearly parallel")

    PA = _projection_matrix(camA, poseA)
    PB = _projection_matrix(camB, poseB)
    A = np.vstack([pixA[0] * PA[2] - PA[0],
                   pixA[1] * PA[2] - PA[1],
                   pixB[0] * PB[2] - PB[0],
                   pixB[1] * PB[2] - PB[1]])
    _, _, Vt = np.linalg.svd(A)
    X_h = Vt[-1]
    if abs(X_h[3]) < 1e-12:
        raise LowParallaxError("triangulated point at infinity")
    X = X_h[:3] / X_h[3]

    for pose in (poseA, poseB):
        if (pose.R @ X + pose.translation)[2] <= DEPTH_EPSILON:
            raise NegativeDepthError("triangulated point behind a camera")

    if parallax_angle(poseA, poseB, X) < min_parallax:
        raise LowParallaxError("parallax below minimum")

    X = _refine_point(X, ((camA, poseA, pixA), (camB, poseB, pixB)))

    for cam, pose, pix in ((camA, poseA, pixA), (camB, poseB, pixB)):
        projected = project(cam, pose, X)
        if projected is None:
            raise NegativeDepthError("refined point behind a camera")
        if np.linalg.norm(projected - pix) > max_error_px:
            raise GeometryError("reprojection error above threshold")
    return X


def _refine_point(X: np.ndarray, views) -> np.ndarray:
    H = np.zeros((3, 3))
    g = np.zeros(3)
    for cam, pose, pix in views:
        p = pose.R @ X + pose.translation
        z = p[2]
        r = np.array([cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy]) - pix
        J_proj = np.array([[cam.fx / z, 0.0, -cam.fx * p[0] / z ** 2],
                           [0.0, cam.fy / z, -cam.fy * p[1] / z ** 2]])
        J = J_proj @ pose.R
        H += J.T @ J
        g += J.T @ r
    try:
        step = np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return X
    return X + step if np.all(np.isfinite(step)) else X


def _ransac_iterations(inlier_ratio: float, sample_size: int, cap: int) -> int:
    if inlier_ratio <= 0.0:
        return cap
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio ** sample_size
    needed = np.log(1.0 - RANSAC_CONFIDENCE) / np.log(max(1.0 - p_good, 1e-12))
    return int(min(cap, max(1, np.ceil(needed))))


def reprojection_errors(camera: PinholeCamera, pose: PoseSE3, points: np.ndarray,
                        pixels: np.ndarray) -> np.ndarray:
    """Per-point pixel error; infinite for points behind the camera."""
    projected, _, valid = project_points(camera, pose, points)
    errors = np.linalg.norm(projected - pixels, axis=1)
    errors[~valid] = np.inf
    return errors


def solve_pnp_ransac(camera: PinholeCamera, points: np.ndarray, pixels: np.ndarray,
                     iterations: int = 200, threshold_px: float = 3.0,
                     min_inliers: int = 15, seed: int = 0) -> Tuple[PoseSE3, np.ndarray]:
    """P3P inside RANSAC with a fixed-seed generator, polished on all inliers."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n < 4:
        raise InsufficientCorrespondencesError(f"PnP needs at least 4 correspondences, got {n}")

    rng = np.random.default_rng(seed)
    K = camera.K
    best_pose: Optional[PoseSE3] = None
    best_mask = np.zeros(n, dtype=bool)
    budget = iterations
    trial = 0
    while trial < budget:
        trial += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            count, rvecs, tvecs = cv2.solveP3P(points[sample].reshape(3, 1, 3),
                                               pixels[sample].reshape(3, 1, 2),
                                               K, np.zeros(5), flags=cv2.SOLVEPNP_P3P)
        except cv2.error:
            continue
        for k in range(count):
            R, _ = cv2.Rodrigues(rvecs[k])
            pose = PoseSE3.from_matrix(R, tvecs[k].reshape(3))
            mask = reprojection_errors(camera, pose, points, pixels) <= threshold_px
            if mask.sum() > best_mask.sum():
                best_pose, best_mask = pose, mask
                budget = min(budget, _ransac_iterations(mask.mean(), 3, iterations))

    if best_pose is None or best_mask.sum() < max(min_inliers, 4):
        raise NoConsensusError(f"PnP consensus {int(best_mask.sum())} below {min_inliers}")

    rvec, _ = cv2.Rodrigues(best_pose.R)
    rvec, tvec = cv2.solvePnPRefineLM(points[best_mask].reshape(-1, 1, 3),
                                      pixels[best_mask].reshape(-1, 1, 2),
                                      K, np.zeros(5), rvec.copy(), best_pose.translation.reshape(3, 1).copy())
    R, _ = cv2.Rodrigues(rvec)
    polished = PoseSE3.from_matrix(R, tvec.reshape(3))
    mask = reprojection_errors(camera, polished, points, pixels) <= threshold_px
    if mask.sum() < best_mask.sum():
        return best_pose, best_mask
    return polished, mask


def _eight_point(x1: np.ndarray, x2: np.ndarray) -> Optional[np.ndarray]:
    """Essential matrix from normalized correspondences, x2^T E x1 = 0."""
    A = np.column_stack([x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
                         x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
                         x1[:, 0], x1[:, 1], np.ones(len(x1))])
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(E)
    if S[0] < 1e-12:
        return None
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _sampson_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    numerator = np.sum(h2 * Ex1, axis=1) ** 2
    denominator = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.sqrt(numerator / np.maximum(denominator, 1e-30))


def _triangulate_normalized(R: np.ndarray, t: np.ndarray, x1: np.ndarray,
                            x2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation in normalized coordinates; returns (points in frame 1, depth in frame 2)."""
    d1 = np.column_stack([x1, np.ones(len(x1))])
    d2 = np.column_stack([x2, np.ones(len(x2))]) @ R  # ray of camera 2 expressed in frame 1
    c2 = -R.T @ t
    # Solve a*d1 - b*d2 = c2 per correspondence in least squares.
    a11 = np.sum(d1 * d1, axis=1)
    a12 = -np.sum(d1 * d2, axis=1)
    a22 = np.sum(d2 * d2, axis=1)
    b1 = d1 @ c2
    b2 = -(d2 @ c2)
    det = a11 * a22 - a12 * a12
    safe = np.where(np.abs(det) < 1e-15, 1e-15, det)
    a = (b1 * a22 - a12 * b2) / safe
    b = (a11 * b2 - a12 * b1) / safe
    points = 0.5 * (a[:, None] * d1 + (c2 + b[:, None] * d2))
    depth2 = (points @ R.T + t)[:, 2]
    return points, depth2


def solve_essential_ransac(pixA: np.ndarray, pixB: np.ndarray, camera: PinholeCamera,
                           iterations: int = 200, threshold_px: float = 1.0,
                           min_parallax_deg: float = 1.0, min_inliers: int = 8,
                           seed: int = 0) -> Tuple[PoseSE3, np.ndarray]:
    """Relative pose of B with respect to A (x_B = R x_A + t), translation of unit norm."""
    pixA = np.asarray(pixA, dtype=float).reshape(-1, 2)
    pixB = np.asarray(pixB, dtype=float).reshape(-1, 2)
    n = len(pixA)
    if n < 8:
        raise InsufficientCorrespondencesError(f"essential matrix needs 8 correspondences, got {n}")
    x1 = camera.normalize(pixA)
    x2 = camera.normalize(pixB)

    design = np.column_stack([x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
                              x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
                              x1[:, 0], x1[:, 1], np.ones(n)])
    singular = np.linalg.svd(design, compute_uv=False)
    if singular[7] < 1e-9 * singular[0]:
        raise DegenerateConfigurationError("correspondences admit a family of essential matrices")

    threshold = threshold_px / camera.focal
    rng = np.random.default_rng(seed)
    best_E = None
    best_mask = np.zeros(n, dtype=bool)
    budget = iterations
    trial = 0
    while trial < budget:
        trial += 1
        sample = rng.choice(n, size=8, replace=False)
        E = _eight_point(x1[sample], x2[sample])
        if E is None:
            continue
        mask = _sampson_distance(E, x1, x2) <= threshold
        if mask.sum() > best_mask.sum():
            best_E, best_mask = E, mask
            budget = min(budget, _ransac_iterations(mask.mean(), 8, iterations))

    if best_E is None or best_mask.sum() < min_inliers:
        raise DegenerateConfigurationError("not enough essential-matrix inliers")
    refit = _eight_point(x1[best_mask], x2[best_mask])
    if refit is not None:
        refit_mask = _sampson_distance(refit, x1, x2) <= threshold
        if refit_mask.sum() >= best_mask.sum():
            best_E, best_mask = refit, refit_mask

    R1, R2, t = cv2.decomposeEssentialMat(best_E)
    t = t.reshape(3)
    best = None
    for R, tt in ((R1, t), (R1, -t), (R2, t), (R2, -t)):
        points, depth2 = _triangulate_normalized(R, tt, x1[best_mask], x2[best_mask])
        positive = (points[:, 2] > 0) & (depth2 > 0)
        if best is None or positive.sum() > best[0].sum():
            best = (positive, R, tt, points)
    positive, R, t, points = best
    if positive.sum() < min_inliers:
        raise DegenerateConfigurationError("no decomposition places the points in front of both cameras")

    c2 = -R.T @ t
    rays1 = points[positive]
    rays2 = points[positive] - c2
    cosines = np.sum(rays1 * rays2, axis=1) / (np.linalg.norm(rays1, axis=1) * np.linalg.norm(rays2, axis=1))
    median_parallax = np.median(np.arccos(np.clip(cosines, -1.0, 1.0)))
    if median_parallax < np.deg2rad(min_parallax_deg):
        raise DegenerateConfigurationError(
            f"median parallax {np.rad2deg(median_parallax):.3f} deg below minimum (pure rotation?)")

    mask = np.zeros(n, dtype=bool)
    mask[np.flatnonzero(best_mask)[positive]] = True
    return PoseSE3.from_matrix(R, t / np.linalg.norm(t)), mask


def solve_sim3_umeyama(pointsA: np.ndarray, pointsB: np.ndarray, with_scale: bool = True) -> PoseSim3:
    """Least-squares similarity with B ≈ s R A + t."""
    A = np.asarray(pointsA, dtype=float).reshape(-1, 3)
    B = np.asarray(pointsB, dtype=float).reshape(-1, 3)
    if len(A) != len(B):
        raise GeometryError("point sets differ in size")
    if len(A) < 3:
        raise DegenerateConfigurationError("Umeyama alignment needs at least 3 pairs")
    mu_a = A.mean(axis=0)
    mu_b = B.mean(axis=0)
    Ac = A - mu_a
    Bc = B - mu_b
    spread = np.linalg.svd(Ac, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
        raise DegenerateConfigurationError("points are collinear or coincident")

    cov = Bc.T @ Ac / len(A)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_a = np.sum(Ac ** 2) / len(A)
        scale = float(np.trace(np.diag(D) @ S) / var_a)
    else:
        scale = 1.0
    t = mu_b - scale * R @ mu_a
    return PoseSim3.from_matrix(R, t, scale)
