"""Synthetic worlds: landmark fields, camera trajectories, rendered detections and dataset export.

Trajectory poses are camera-to-world; cameras look along +z with y pointing down.
"""
import dataclasses
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from core.errors import RejectionBudgetExceededError, SceneError
from core.evaluation import TrajectoryEstimate
from core.features import FeatureSet, ScoreField, SparseDescriptorGrid
from core.geometry import PinholeCamera, PoseSE3, PoseSim3, project_points
from core.world_map import WorldMap

logger = logging.getLogger(__name__)

TRAJECTORIES = ("line", "circle", "square-loop", "shake-overlay")
CHALLENGES = ("lowlight", "shake", "weak-texture")
CHALLENGE_DEFAULTS = {"lowlight": 0.4, "weak-texture": 0.3, "shake": 5.0}
MAX_DESCRIPTOR_COSINE = 0.8
CONFIDENCE_MEAN = 0.7
CONFIDENCE_STD = 0.1
START_NS = 1_000_000_000
WORLD_UP = np.array([0.0, 0.0, 1.0])


def default_camera() -> PinholeCamera:
    return PinholeCamera(400.0, 400.0, 320.0, 240.0, 640, 480)


@dataclass
class SceneSpec:
    landmark_count: int = 500
    trajectory: str = "circle"
    frame_count: int = 300
    rate: float = 20.0
    radius: float = 5.0  # circle radius, or half the side of the square loop
    length: float = 4.0  # line length
    laps: float = 1.0
    shake_deg: float = 3.0  # ground-truth jitter of the shake-overlay trajectory
    pixel_noise: float = 0.0
    descriptor_noise: float = 0.0
    outlier_rate: float = 0.0
    descriptor_dim: int = 256
    stereo_baseline: float = 0.0
    camera: PinholeCamera = field(default_factory=default_camera)


@dataclass(frozen=True)
class Challenge:
    kind: str
    start: int
    stop: int  # exclusive
    strength: float

    def active(self, frame_index: int) -> bool:
        return self.start <= frame_index < self.stop


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    landmarks: np.ndarray
    descriptors: np.ndarray
    trajectory: TrajectoryEstimate
    challenges: Tuple[Challenge, ...] = ()

    @property
    def camera(self) -> PinholeCamera:
        return self.spec.camera

    def __len__(self) -> int:
        return len(self.trajectory)

    def pose(self, index: int) -> PoseSE3:
        return self.trajectory.poses[index]

    def timestamp(self, index: int) -> float:
        return self.trajectory.timestamps[index]


@dataclass
class RenderedView:
    features: FeatureSet
    labels: np.ndarray  # landmark index per feature, -1 for injected outliers


def look_at(position: np.ndarray, target: np.ndarray) -> PoseSE3:
    """Camera-to-world pose at `position` looking toward `target` with world z up."""
    z = np.asarray(target, float) - np.asarray(position, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, WORLD_UP)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return PoseSE3.from_matrix(np.column_stack([x, y, z]), position)


def _square_point(s: float, half: float) -> np.ndarray:
    """Point at arc-length fraction s in [0, 1) along a square of half-side `half`."""
    side = 2.0 * half
    d = (s % 1.0) * 4.0 * side
    corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
    edge = int(d // side)
    frac = (d - edge * side) / side
    a = np.array(corners[edge])
    b = np.array(corners[(edge + 1) % 4])
    return np.append(a + frac * (b - a), 0.0)


def _trajectory(spec: SceneSpec, rng: np.random.Generator) -> TrajectoryEstimate:
    n = spec.frame_count
    trajectory = TrajectoryEstimate()
    for i in range(n):
        s = spec.laps * i / n
        if spec.trajectory == "line":
            position = np.array([spec.length * i / max(n - 1, 1), 0.0, 0.0])
            pose = look_at(position, position + np.array([0.0, 1.0, 0.0]))
        elif spec.trajectory == "square-loop":
            position = _square_point(s, spec.radius)
            pose = look_at(position, 2.0 * position)
        else:
            angle = 2.0 * np.pi * s
            position = spec.radius * np.array([np.cos(angle), np.sin(angle), 0.0])
            pose = look_at(position, np.zeros(3))
            if spec.trajectory == "shake-overlay":
                jitter = Rotation.from_rotvec(_random_axis(rng) * np.deg2rad(rng.uniform(-1, 1) * spec.shake_deg))
                pose = PoseSE3.from_matrix(pose.R @ jitter.as_matrix(), pose.translation)
        trajectory.append(i / spec.rate, pose)
    return trajectory


def _random_axis(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis / np.linalg.norm(axis)


def _landmarks(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.landmark_count
    if spec.trajectory == "line":
        lo = np.array([-2.0, 3.0, -1.5])
        hi = np.array([spec.length + 2.0, 6.0, 1.5])
        return rng.uniform(lo, hi, size=(n, 3))
    if spec.trajectory == "square-loop":
        wall = spec.radius + 3.0
        side = rng.integers(0, 4, size=n)
        along = rng.uniform(-wall, wall, size=n)
        depth = wall + rng.uniform(-0.3, 0.3, size=n)
        height = rng.uniform(-1.5, 1.5, size=n)
        x = np.select([side == 0, side == 1, side == 2], [depth, -depth, along], along)
        y = np.select([side == 0, side == 1, side == 2], [along, along, depth], -depth)
        return np.column_stack([x, y, height])
    half = 0.4 * spec.radius
    return rng.uniform([-half, -half, -half / 2], [half, half, half / 2], size=(n, 3))


def _descriptors(count: int, dim: int, rng: np.random.Generator, budget_factor: int = 100) -> np.ndarray:
    """Unit descriptors with pairwise cosine below MAX_DESCRIPTOR_COSINE, by rejection sampling."""
    accepted = np.zeros((count, dim))
    n = 0
    attempts = 0
    budget = budget_factor * count
    while n < count:
        if attempts >= budget:
            raise RejectionBudgetExceededError(
                f"placed {n} of {count} descriptors in {dim} dimensions within {budget} draws")
        attempts += 1
        candidate = rng.normal(size=dim)
        candidate /= np.linalg.norm(candidate)
        if n and np.max(accepted[:n] @ candidate) >= MAX_DESCRIPTOR_COSINE:
            continue
        accepted[n] = candidate
        n += 1
    return accepted


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    if spec.landmark_count < 1:
        raise SceneError("a scene needs at least one landmark")
    if spec.trajectory not in TRAJECTORIES:
        raise SceneError(f"unknown trajectory {spec.trajectory!r}; expected one of {TRAJECTORIES}")
    if spec.frame_count < 1 or spec.rate <= 0:
        raise SceneError("frame_count and rate must be positive")
    rng = np.random.default_rng([seed, 0])
    landmarks = _landmarks(spec, rng)
    descriptors = _descriptors(spec.landmark_count, spec.descriptor_dim, np.random.default_rng([seed, 1]))
    trajectory = _trajectory(spec, np.random.default_rng([seed, 2]))
    logger.debug("generated %s scene: %d landmarks, %d frames", spec.trajectory, len(landmarks), len(trajectory))
    return SyntheticScene(spec, seed, landmarks, descriptors, trajectory)


def script_challenge(scene: SyntheticScene, kind: str, start: int, stop: int,
                     strength: Optional[float] = None) -> SyntheticScene:
    """A copy of the scene with a challenge active on frames [start, stop)."""
    if kind not in CHALLENGES:
        raise SceneError(f"unknown challenge {kind!r}; expected one of {CHALLENGES}")
    if not 0 <= start <= stop <= len(scene):
        raise SceneError(f"interval [{start}, {stop}) outside a {len(scene)}-frame trajectory")
    if start == stop:
        return scene
    challenge = Challenge(kind, start, stop, CHALLENGE_DEFAULTS[kind] if strength is None else strength)
    return dataclasses.replace(scene, challenges=scene.challenges + (challenge,))


def _weak_texture_mask(scene: SyntheticScene, keep: float) -> np.ndarray:
    rng = np.random.default_rng([scene.seed, 3])
    order = rng.permutation(len(scene.landmarks))
    mask = np.zeros(len(scene.landmarks), dtype=bool)
    mask[order[:int(round(keep * len(order)))]] = True
    return mask


def render_frame(scene: SyntheticScene, pose: PoseSE3, frame_index: int = 0,
                 camera: Optional[PinholeCamera] = None, stream: int = 0) -> RenderedView:
    """Noisy detections of the visible landmarks from a camera-to-world pose."""
    camera = camera or scene.camera
    spec = scene.spec
    rng = np.random.default_rng([scene.seed, frame_index, 10 + stream])
    active = [c for c in scene.challenges if c.active(frame_index)]

    for challenge in active:
        if challenge.kind == "shake":
            angle = np.deg2rad(rng.uniform(-challenge.strength, challenge.strength))
            jitter = Rotation.from_rotvec(_random_axis(rng) * angle).as_matrix()
            pose = PoseSE3.from_matrix(pose.R @ jitter, pose.translation)

    candidates = np.ones(len(scene.landmarks), dtype=bool)
    for challenge in active:
        if challenge.kind == "weak-texture":
            candidates &= _weak_texture_mask(scene, challenge.strength)

    pixels, _, valid = project_points(camera, pose.inverse(), scene.landmarks)
    visible = np.flatnonzero(valid & candidates & camera.in_image(pixels))
    keypoints = pixels[visible]
    if spec.pixel_noise > 0:
        keypoints = keypoints + rng.normal(scale=spec.pixel_noise, size=keypoints.shape)
        inside = camera.in_image(keypoints)
        visible, keypoints = visible[inside], keypoints[inside]

    descriptors = scene.descriptors[visible]
    if spec.descriptor_noise > 0 and len(visible):
        descriptors = descriptors + rng.normal(scale=spec.descriptor_noise, size=descriptors.shape)
        descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)
    labels = visible.astype(int)

    n_outliers = int(round(spec.outlier_rate * len(visible)))
    if n_outliers:
        outlier_pixels = rng.uniform([0, 0], [camera.width - 1, camera.height - 1], size=(n_outliers, 2))
        outlier_desc = rng.normal(size=(n_outliers, spec.descriptor_dim))
        outlier_desc /= np.linalg.norm(outlier_desc, axis=1, keepdims=True)
        keypoints = np.vstack([keypoints, outlier_pixels])
        descriptors = np.vstack([descriptors, outlier_desc])
        labels = np.concatenate([labels, -np.ones(n_outliers, dtype=int)])

    scores = np.clip(rng.normal(CONFIDENCE_MEAN, CONFIDENCE_STD, size=len(labels)), 0.0, 1.0)
    for challenge in active:
        if challenge.kind == "lowlight":
            scores = scores * challenge.strength

    features = FeatureSet(keypoints.reshape(-1, 2), scores, descriptors.reshape(-1, spec.descriptor_dim))
    return RenderedView(features, labels)


def right_camera_center_pose(pose: PoseSE3, baseline: float) -> PoseSE3:
    """Camera-to-world pose of the right camera of a rectified pair."""
    return pose.compose(PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([baseline, 0.0, 0.0])))


def render_index(scene: SyntheticScene, index: int) -> RenderedView:
    return render_frame(scene, scene.pose(index), index)


def render_stereo(scene: SyntheticScene, index: int) -> Tuple[RenderedView, RenderedView]:
    if scene.spec.stereo_baseline <= 0:
        raise SceneError("scene has no stereo baseline")
    pose = scene.pose(index)
    left = render_frame(scene, pose, index, stream=0)
    right = render_frame(scene, right_camera_center_pose(pose, scene.spec.stereo_baseline), index, stream=1)
    return left, right


def label_correspondences(labels_a: np.ndarray, labels_b: np.ndarray) -> Dict[int, int]:
    """Feature index in A -> feature index in B for every landmark both views detect."""
    where_b = {int(label): j for j, label in enumerate(labels_b) if label >= 0}
    return {i: where_b[int(label)] for i, label in enumerate(labels_a) if label >= 0 and int(label) in where_b}


class SyntheticDetector:
    """Rasterizes rendered detections into a score field at the detection resolution.

    Every detection becomes a score spike over a uniform background below `background`, with its
    exact sub-cell position kept as an offset and its descriptor stored at the spike's cell.
    """

    name = "synthetic"

    def __init__(self, camera: PinholeCamera, width: int = 400, height: int = 300,
                 background: float = 0.05, seed: int = 0):
        self.camera = camera
        self.width = width
        self.height = height
        self.background = background
        self.seed = seed
        self.calls = 0

    def infer(self, detections: FeatureSet) -> ScoreField:
        rng = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        scores = rng.uniform(0.0, self.background, size=(self.height, self.width))
        offsets = np.zeros((self.height, self.width, 2))
        cells: Dict[Tuple[int, int], np.ndarray] = {}
        scaled = detections.keypoints * np.array([self.width / self.camera.width,
                                                  self.height / self.camera.height])
        for (x, y), score, descriptor in zip(scaled, detections.scores, detections.descriptors):
            col = min(int(np.floor(x)), self.width - 1)
            row = min(int(np.floor(y)), self.height - 1)
            if (row, col) in cells and scores[row, col] >= score:
                continue
            scores[row, col] = max(score, 0.0)
            offsets[row, col] = (x - col, y - row)
            cells[(row, col)] = descriptor
        return ScoreField(scores, SparseDescriptorGrid(cells, detections.dim), offsets)


def apply_drift(pose_w2c: PoseSE3, drift: PoseSim3) -> PoseSE3:
    """World-to-camera pose of the same view in a world warped by `drift`."""
    return pose_w2c.to_sim3().compose(drift.inverse()).to_se3()


def seed_map(scene: SyntheticScene, frame_indices: Sequence[int], drift: Optional[PoseSim3] = None,
             drift_from: Optional[int] = None) -> Tuple[WorldMap, Dict[int, int]]:
    """A map built directly from ground truth: one keyframe per listed frame, one point per landmark.

    Keyframes at or after `drift_from` (a position in `frame_indices`) live in a world warped by
    `drift` and get their own duplicate map points. Returns the map and keyframe id -> frame index.
    """
    world = WorldMap()
    frame_of: Dict[int, int] = {}
    point_of: List[Dict[int, int]] = [{}, {}]
    for position, index in enumerate(frame_indices):
        drifted = drift is not None and drift_from is not None and position >= drift_from
        view = render_index(scene, index)
        pose = scene.pose(index).inverse()
        if drifted:
            pose = apply_drift(pose, drift)
        kf = world.add_keyframe(scene.timestamp(index), pose, view.features, scene.camera, frame_id=index)
        frame_of[kf.id] = index
        lookup = point_of[int(drifted)]
        for feature_index, label in enumerate(view.labels):
            if label < 0:
                continue
            label = int(label)
            if label not in lookup:
                position_3d = scene.landmarks[label]
                if drifted:
                    position_3d = drift.transform(position_3d[None])[0]
                lookup[label] = world.add_point(position_3d, view.features.descriptors[feature_index], kf.id).id
            world.add_observation(lookup[label], kf.id, feature_index)
    return world, frame_of


# -- export ----------------------------------------------------------------

def _write_npz(path: Path, **arrays: np.ndarray) -> None:
    """npz archive with fixed member timestamps, so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, array in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with archive.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.ascontiguousarray(array), allow_pickle=False)


def _sensor_yaml(camera: PinholeCamera, offset: float) -> str:
    data = {
        "sensor_type": "camera",
        "comment": "synthetic pinhole camera",
        "T_BS": {"cols": 4, "rows": 4, "data": [1.0, 0.0, 0.0, offset, 0.0, 1.0, 0.0, 0.0,
                                                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]},
        "rate_hz": 20,
        "resolution": [camera.width, camera.height],
        "camera_model": "pinhole",
        "intrinsics": [camera.fx, camera.fy, camera.cx, camera.cy],
        "distortion_model": "radial-tangential",
        "distortion_coefficients": [0.0, 0.0, 0.0, 0.0],
    }
    return yaml.safe_dump(data, sort_keys=True)


def export_dataset(scene: SyntheticScene, root: Union[str, Path]) -> Path:
    """Write the scene as a mav0-style dataset of per-frame detection archives."""
    root = Path(root)
    base = root / "mav0"
    stereo = scene.spec.stereo_baseline > 0
    cameras = ["cam0", "cam1"] if stereo else ["cam0"]
    for cam in cameras:
        (base / cam / "data").mkdir(parents=True, exist_ok=True)

    stamps = [START_NS + int(round(t * 1e9)) for t in scene.trajectory.timestamps]
    manifests = {cam: ["#timestamp [ns],filename"] for cam in cameras}
    for index, ns in enumerate(stamps):
        views = render_stereo(scene, index) if stereo else (render_index(scene, index),)
        for cam, view in zip(cameras, views):
            name = f"{ns}.npz"
            _write_npz(base / cam / "data" / name, keypoints=view.features.keypoints,
                       scores=view.features.scores, descriptors=view.features.descriptors,
                       labels=view.labels)
            manifests[cam].append(f"{ns},{name}")
    for k, cam in enumerate(cameras):
        (base / cam / "data.csv").write_text("\n".join(manifests[cam]) + "\n")
        (base / cam / "sensor.yaml").write_text(_sensor_yaml(scene.camera, k * scene.spec.stereo_baseline))

    gt_dir = base / "state_groundtruth_estimate0"
    gt_dir.mkdir(parents=True, exist_ok=True)
    lines = ["#timestamp [ns], p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], q_RS_z []"]
    for ns, pose in zip(stamps, scene.trajectory.poses):
        qx, qy, qz, qw = pose.rotation
        values = [*pose.translation, qw, qx, qy, qz]
        lines.append(f"{ns}," + ",".join(f"{v:.12f}" for v in values))
    (gt_dir / "data.csv").write_text("\n".join(lines) + "\n")

    spec = dataclasses.asdict(scene.spec)
    spec["camera"] = dataclasses.asdict(scene.spec.camera)
    spec["seed"] = scene.seed
    spec["challenges"] = [dataclasses.asdict(c) for c in scene.challenges]
    (root / "scene.yaml").write_text(yaml.safe_dump(spec, sort_keys=True))
    logger.info("exported %d frames to %s", len(scene), root)
    return root


def scene_descriptor_corpus(scene: SyntheticScene, indices: Optional[Iterable[int]] = None) -> List[np.ndarray]:
    """Per-frame rendered descriptors, one document per frame, for vocabulary training."""
    indices = range(len(scene)) if indices is None else indices
    return [render_index(scene, i).features.descriptors for i in indices]
