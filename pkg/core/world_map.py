import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from core.errors import SlamError
from core.features import FeatureSet
from core.geometry import PinholeCamera, PoseSE3, PoseSim3


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: Dict[int, int] = field(default_factory=dict)  # keyframe id -> feature index
    score: float = 0.0  # f_sp: mean detector confidence over the observations
    created_at: int = 0  # keyframe insertion count when the point was created
    reference_kf: int = -1

    @property
    def num_observations(self) -> int:
        return len(self.observations)


@dataclass
class KeyFrame:
    id: int
    timestamp: float
    pose: PoseSE3
    features: FeatureSet
    camera: PinholeCamera
    associations: Dict[int, int] = field(default_factory=dict)  # feature index -> point id
    bow: Optional[object] = None
    frame_id: int = -1
    right: Optional[FeatureSet] = None  # rectified right view in stereo mode

    def point_ids(self) -> List[int]:
        return list(self.associations.values())


class WorldMap:
    """Keyframes, map points and the covisibility graph shared by all stages.

    Covisibility weights are kept equal to the exact number of map points two keyframes
    both observe; every observation change updates them incrementally.
    """

    def __init__(self):
        self.keyframes: Dict[int, KeyFrame] = {}
        self.points: Dict[int, MapPoint] = {}
        self.covisibility: Dict[int, Dict[int, int]] = {}
        self.lock = threading.RLock()
        self.insertions: int = 0
        self.origin_kf: Optional[int] = None
        # one entry per applied loop correction: keyframe id -> old-to-new pose change
        self.corrections: List[Dict[int, PoseSim3]] = []
        self._next_kf_id = 0
        self._next_point_id = 0

    # -- keyframes -------------------------------------------------------

    def add_keyframe(self, timestamp: float, pose: PoseSE3, features: FeatureSet,
                     camera: PinholeCamera, frame_id: int = -1,
                     right: Optional[FeatureSet] = None) -> KeyFrame:
        with self.lock:
            kf = KeyFrame(self._next_kf_id, timestamp, pose, features, camera, frame_id=frame_id, right=right)
            self._next_kf_id += 1
            self.keyframes[kf.id] = kf
            self.covisibility[kf.id] = {}
            self.insertions += 1
            if self.origin_kf is None:
                self.origin_kf = kf.id
            return kf

    def remove_keyframe(self, kf_id: int) -> None:
        with self.lock:
            kf = self.keyframes[kf_id]
            for point_id in list(kf.associations.values()):
                self.remove_observation(point_id, kf_id)
            for other in list(self.covisibility.get(kf_id, {})):
                self.covisibility[other].pop(kf_id, None)
            self.covisibility.pop(kf_id, None)
            del self.keyframes[kf_id]

    # -- map points ------------------------------------------------------

    def add_point(self, position: np.ndarray, descriptor: np.ndarray, reference_kf: int = -1) -> MapPoint:
        with self.lock:
            position = np.asarray(position, dtype=float).reshape(3)
            if not np.all(np.isfinite(position)):
                raise SlamError("map point position must be finite")
            point = MapPoint(self._next_point_id, position, np.asarray(descriptor, dtype=float),
                             created_at=self.insertions, reference_kf=reference_kf)
            self._next_point_id += 1
            self.points[point.id] = point
            return point

    def remove_point(self, point_id: int) -> None:
        with self.lock:
            point = self.points.get(point_id)
            if point is None:
                return
            for kf_id in list(point.observations):
                self.remove_observation(point_id, kf_id, drop_empty=False)
            del self.points[point_id]

    def add_observation(self, point_id: int, kf_id: int, feature_index: int) -> bool:
        """Attach a keyframe feature to a map point; False when either side is already taken."""
        with self.lock:
            point = self.points[point_id]
            kf = self.keyframes[kf_id]
            if kf_id in point.observations or feature_index in kf.associations:
                return False
            for other in point.observations:
                self._bump(kf_id, other, 1)
            point.observations[kf_id] = feature_index
            kf.associations[feature_index] = point_id
            if point.reference_kf < 0:
                point.reference_kf = kf_id
            self._refresh_point(point)
            return True

    def remove_observation(self, point_id: int, kf_id: int, drop_empty: bool = True) -> None:
        with self.lock:
            point = self.points.get(point_id)
            if point is None or kf_id not in point.observations:
                return
            feature_index = point.observations.pop(kf_id)
            self.keyframes[kf_id].associations.pop(feature_index, None)
            for other in point.observations:
                self._bump(kf_id, other, -1)
            if point.reference_kf == kf_id and point.observations:
                point.reference_kf = min(point.observations)
            if not point.observations:
                if drop_empty:
                    del self.points[point_id]
                return
            self._refresh_point(point)

    def record_correction(self, deltas: Dict[int, PoseSim3]) -> None:
        """Publish a loop correction; pose ∘ delta moves a pose anchored on that keyframe into the new map."""
        with self.lock:
            self.corrections.append(dict(deltas))

    def replace_point(self, old_id: int, new_id: int) -> None:
        """Move every observation of old_id onto new_id and delete old_id."""
        with self.lock:
            if old_id == new_id or old_id not in self.points or new_id not in self.points:
                return
            observations = dict(self.points[old_id].observations)
            self.remove_point(old_id)
            for kf_id, feature_index in observations.items():
                self.add_observation(new_id, kf_id, feature_index)

    def _bump(self, a: int, b: int, delta: int) -> None:
        for x, y in ((a, b), (b, a)):
            row = self.covisibility.setdefault(x, {})
            weight = row.get(y, 0) + delta
            if weight > 0:
                row[y] = weight
            else:
                row.pop(y, None)

    def _refresh_point(self, point: MapPoint) -> None:
        scores = []
        descriptors = []
        for kf_id, feature_index in point.observations.items():
            features = self.keyframes[kf_id].features
            scores.append(features.scores[feature_index])
            descriptors.append(features.descriptors[feature_index])
        point.score = float(np.clip(np.mean(scores), 0.0, 1.0))
        point.descriptor = representative_descriptor(np.asarray(descriptors))

    # -- queries ---------------------------------------------------------

    def covisible(self, kf_id: int, n: Optional[int] = None, min_weight: int = 1) -> List[int]:
        """Neighbours ordered by shared-point count (descending), then id."""
        with self.lock:
            row = self.covisibility.get(kf_id, {})
            ranked = sorted((kf for kf, w in row.items() if w >= min_weight), key=lambda k: (-row[k], k))
            return ranked if n is None else ranked[:n]

    def weight(self, a: int, b: int) -> int:
        return self.covisibility.get(a, {}).get(b, 0)

    def recount_covisibility(self) -> Dict[int, Dict[int, int]]:
        """Covisibility weights recomputed from scratch from the observations."""
        counts: Dict[int, Dict[int, int]] = {kf_id: {} for kf_id in self.keyframes}
        for point in self.points.values():
            observers = sorted(point.observations)
            for i, a in enumerate(observers):
                for b in observers[i + 1:]:
                    counts[a][b] = counts[a].get(b, 0) + 1
                    counts[b][a] = counts[b].get(a, 0) + 1
        return counts

    def check_integrity(self) -> None:
        """Raise when an association dangles or a covisibility weight differs from a recount."""
        with self.lock:
            for kf in self.keyframes.values():
                for feature_index, point_id in kf.associations.items():
                    point = self.points.get(point_id)
                    if point is None or point.observations.get(kf.id) != feature_index:
                        raise SlamError(f"keyframe {kf.id} feature {feature_index} dangles")
            for point in self.points.values():
                for kf_id, feature_index in point.observations.items():
                    if self.keyframes[kf_id].associations.get(feature_index) != point.id:
                        raise SlamError(f"point {point.id} observation in keyframe {kf_id} dangles")
            recount = self.recount_covisibility()
            current = {kf_id: dict(row) for kf_id, row in self.covisibility.items() if kf_id in self.keyframes}
            if recount != current:
                raise SlamError("covisibility weights differ from a recount")

    def points_of(self, kf_ids: Iterable[int]) -> Set[int]:
        with self.lock:
            out: Set[int] = set()
            for kf_id in kf_ids:
                kf = self.keyframes.get(kf_id)
                if kf is not None:
                    out.update(kf.associations.values())
            return out

    def median_depth(self, kf_id: int) -> float:
        kf = self.keyframes[kf_id]
        point_ids = kf.point_ids()
        if not point_ids:
            return float("nan")
        positions = np.array([self.points[p].position for p in point_ids])
        return float(np.median(kf.pose.transform(positions)[:, 2]))

    def get_summary(self) -> str:
        lines = [f"Keyframes: {len(self.keyframes)}", f"Map points: {len(self.points)}"]
        edges = sum(len(row) for row in self.covisibility.values()) // 2
        lines.append(f"Covisibility edges: {edges}")
        return "\n".join(lines)

    # -- export ----------------------------------------------------------

    def snapshot_lines(self) -> List[str]:
        """Landmarks as "id x y z"; keyframes as "id timestamp tx ty tz qx qy qz qw" (camera-to-world)."""
        with self.lock:
            lines = ["# landmarks: id x y z"]
            for point_id in sorted(self.points):
                x, y, z = self.points[point_id].position
                lines.append(f"{point_id} {x:.9f} {y:.9f} {z:.9f}")
            lines.append("# keyframes: id timestamp tx ty tz qx qy qz qw")
            for kf_id in sorted(self.keyframes):
                kf = self.keyframes[kf_id]
                pose = kf.pose.inverse()
                values = " ".join(f"{v:.9f}" for v in (*pose.translation, *pose.rotation))
                lines.append(f"{kf_id} {kf.timestamp:.9f} {values}")
            return lines

    def export_snapshot(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.snapshot_lines()) + "\n")


def representative_descriptor(descriptors: np.ndarray) -> np.ndarray:
    """The observed descriptor with the highest median cosine similarity to the others."""
    if len(descriptors) <= 2:
        return descriptors[0].copy()
    similarity = descriptors @ descriptors.T
    medians = np.median(similarity, axis=1)
    return descriptors[int(np.argmax(medians))].copy()


def shared_observation_pairs(world: WorldMap, kf_a: int, kf_b: int) -> List[Tuple[int, int, int]]:
    """(point id, feature in a, feature in b) for every point both keyframes observe."""
    with world.lock:
        out = []
        for feature_a, point_id in world.keyframes[kf_a].associations.items():
            feature_b = world.points[point_id].observations.get(kf_b)
            if feature_b is not None:
                out.append((point_id, feature_a, feature_b))
        return out
