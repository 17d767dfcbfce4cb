"""EuRoC-layout dataset reading (EuRoC, TUM-VI exports and synthetic exports)."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import cv2
import numpy as np
import yaml

from core.errors import DatasetError, MissingManifestError, UnreadableImageError
from core.evaluation import TrajectoryEstimate, read_euroc_groundtruth
from core.features import FeatureSet
from core.geometry import PinholeCamera

logger = logging.getLogger(__name__)

LAYOUTS = ("euroc", "tumvi", "synthetic")
STEREO_TOLERANCE_NS = 1_000_000
GROUNDTRUTH_PATHS = {
    "euroc": "state_groundtruth_estimate0/data.csv",
    "tumvi": "mocap0/data.csv",
    "synthetic": "state_groundtruth_estimate0/data.csv",
}

FrameData = Union[np.ndarray, FeatureSet]


@dataclass
class DatasetFrame:
    index: int
    timestamp: float
    left: FrameData
    right: Optional[FrameData] = None
    labels: Optional[np.ndarray] = None
    right_labels: Optional[np.ndarray] = None


def read_manifest(path: Path) -> List[Tuple[int, str]]:
    """(timestamp ns, file name) rows of a camera data.csv."""
    if not path.is_file():
        raise MissingManifestError(f"missing camera manifest {path}")
    rows = []
    with open(path, newline="") as f:
        for number, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append((int(row[0]), row[1].strip()))
            except (ValueError, IndexError) as e:
                raise DatasetError(f"{path}:{number}: {e}") from e
    if any(b[0] <= a[0] for a, b in zip(rows, rows[1:])):
        raise DatasetError(f"{path}: timestamps are not strictly increasing")
    return rows


def read_sensor(path: Path) -> Tuple[Optional[PinholeCamera], Optional[np.ndarray]]:
    """Camera intrinsics and body-to-sensor transform T_BS from a sensor.yaml."""
    if not path.is_file():
        return None, None
    # OpenCV-style files open with a %YAML directive that PyYAML rejects
    text = "\n".join(line for line in path.read_text().splitlines() if not line.startswith("%"))
    data = yaml.safe_load(text) or {}
    camera = None
    if "intrinsics" in data and "resolution" in data:
        fx, fy, cx, cy = (float(v) for v in data["intrinsics"])
        width, height = (int(v) for v in data["resolution"])
        camera = PinholeCamera(fx, fy, cx, cy, width, height)
    T_BS = None
    if isinstance(data.get("T_BS"), dict) and "data" in data["T_BS"]:
        T_BS = np.asarray(data["T_BS"]["data"], dtype=float).reshape(4, 4)
    return camera, T_BS


def load_detections(path: Path) -> Tuple[FeatureSet, np.ndarray]:
    try:
        with np.load(path) as data:
            features = FeatureSet(data["keypoints"], data["scores"], data["descriptors"])
            labels = data["labels"].astype(int)
    except (OSError, KeyError, ValueError) as e:
        raise UnreadableImageError(f"cannot read detections {path}: {e}") from e
    return features, labels


def load_image(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise UnreadableImageError(f"cannot read image {path}")
    return image


class DatasetReader:
    """Frames of a mav0-style sequence in timestamp order; images load lazily."""

    def __init__(self, root: Union[str, Path], layout: str = "euroc", stereo: bool = False,
                 camera: Optional[PinholeCamera] = None):
        if layout not in LAYOUTS:
            raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {self.root} does not exist")
        self.layout = layout
        self.stereo = stereo
        self.base = self.root / "mav0" if (self.root / "mav0").is_dir() else self.root

        left_dir = self.base / "cam0"
        self.left_rows = read_manifest(left_dir / "data.csv")
        sensor_camera, left_T = read_sensor(left_dir / "sensor.yaml")
        self.camera = camera or sensor_camera
        if self.camera is None:
            raise MissingManifestError(f"no camera intrinsics: {left_dir / 'sensor.yaml'} missing")

        self.baseline: Optional[float] = None
        self.rows: List[Tuple[int, str, Optional[str]]] = [(ts, name, None) for ts, name in self.left_rows]
        if stereo:
            right_dir = self.base / "cam1"
            right_rows = read_manifest(right_dir / "data.csv")
            _, right_T = read_sensor(right_dir / "sensor.yaml")
            if left_T is not None and right_T is not None:
                self.baseline = float(np.linalg.norm(left_T[:3, 3] - right_T[:3, 3]))
            self.rows = self._pair(right_rows)

        self.groundtruth: Optional[TrajectoryEstimate] = None
        gt_path = self.base / GROUNDTRUTH_PATHS[layout]
        if gt_path.is_file():
            self.groundtruth = read_euroc_groundtruth(gt_path)
        logger.info("dataset %s: %d frames (%s%s)", self.root, len(self.rows), layout,
                    ", stereo" if stereo else "")

    def _pair(self, right_rows: List[Tuple[int, str]]) -> List[Tuple[int, str, Optional[str]]]:
        right_ts = np.array([ts for ts, _ in right_rows], dtype=np.int64)
        paired = []
        for ts, name in self.left_rows:
            if len(right_ts) == 0:
                break
            k = int(np.argmin(np.abs(right_ts - ts)))
            if abs(int(right_ts[k]) - ts) <= STEREO_TOLERANCE_NS:
                paired.append((ts, name, right_rows[k][1]))
            else:
                logger.warning("no right image within 1 ms of %d; skipping the pair", ts)
        return paired

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def timestamps(self) -> List[float]:
        return [ts * 1e-9 for ts, _, _ in self.rows]

    def _load(self, camera_dir: str, name: str) -> Tuple[FrameData, Optional[np.ndarray]]:
        path = self.base / camera_dir / "data" / name
        if self.layout == "synthetic" or path.suffix == ".npz":
            return load_detections(path)
        return load_image(path), None

    def frame(self, index: int) -> DatasetFrame:
        ts, left_name, right_name = self.rows[index]
        left, labels = self._load("cam0", left_name)
        right = right_labels = None
        if right_name is not None:
            right, right_labels = self._load("cam1", right_name)
        return DatasetFrame(index, ts * 1e-9, left, right, labels, right_labels)

    def __iter__(self) -> Iterator[DatasetFrame]:
        for index in range(len(self.rows)):
            yield self.frame(index)


def read_dataset(root: Union[str, Path], layout: str = "euroc", stereo: bool = False,
                 camera: Optional[PinholeCamera] = None) -> DatasetReader:
    return DatasetReader(root, layout, stereo, camera)
