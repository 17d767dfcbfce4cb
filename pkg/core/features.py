"""Keypoint extraction with the adaptive confidence threshold and keypoint rescaling."""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage
from scipy.special import expit

from core.errors import BackendError, SlamError
from core.geometry import PinholeCamera

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 256
DEFAULT_RESIZE = (400, 300)


class DescriptorGrid(Protocol):
    dim: int

    def sample(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Descriptors (N, dim) at score-cell coordinates (row, col)."""
        ...


class DenseDescriptorGrid:
    """Coarse descriptor map (Hd, Wd, L), one cell per `stride` score cells, sampled bicubically."""

    def __init__(self, grid: np.ndarray, stride: float = 8.0):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise SlamError(f"descriptor grid must be (H, W, L), got {grid.shape}")
        self.grid = grid
        self.stride = float(stride)
        self.dim = grid.shape[2]

    def sample(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        if len(rows) == 0:
            return np.zeros((0, self.dim))
        offset = (self.stride - 1.0) / 2.0
        coords = np.vstack([(rows - offset) / self.stride, (cols - offset) / self.stride])
        out = np.empty((len(rows), self.dim))
        for channel in range(self.dim):
            out[:, channel] = ndimage.map_coordinates(self.grid[:, :, channel], coords,
                                                      order=3, mode="nearest")
        return out


class SparseDescriptorGrid:
    """Full-resolution descriptor grid that is zero except at a few cells."""

    def __init__(self, cells: Dict[Tuple[int, int], np.ndarray], dim: int = DESCRIPTOR_DIM):
        self.cells = cells
        self.dim = dim

    def sample(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), self.dim))
        for k, (r, c) in enumerate(zip(rows, cols)):
            descriptor = self.cells.get((int(round(r)), int(round(c))))
            if descriptor is not None:
                out[k] = descriptor
        return out


@dataclass
class ScoreField:
    """Detector output at the resized W'×H' resolution."""
    scores: np.ndarray
    descriptors: DescriptorGrid
    offsets: Optional[np.ndarray] = None  # (H', W', 2) sub-cell (dx, dy) refinement

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.size == 0:
            raise SlamError("score field must be a non-empty 2-D grid")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise SlamError("scores must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class FeatureSet:
    keypoints: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if descriptors.ndim != 2:
            descriptors = descriptors.reshape(len(keypoints), -1)
        if not (len(keypoints) == len(scores) == len(descriptors)):
            raise SlamError("keypoints, scores and descriptors differ in length")
        object.__setattr__(self, "keypoints", keypoints)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "descriptors", descriptors)

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)))

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def subset(self, indices) -> "FeatureSet":
        indices = np.asarray(indices, dtype=int)
        return FeatureSet(self.keypoints[indices], self.scores[indices],
                          self.descriptors[indices], self.threshold)

    def normalized_keypoints(self, camera: PinholeCamera) -> np.ndarray:
        """Keypoints scaled into [0, 1]²."""
        return self.keypoints / np.array([camera.width, camera.height], dtype=float)


@dataclass
class AdaptiveThresholdState:
    mu1: float = 0.1
    mu2: float = 0.01
    last_match_count: int = 0
    width: int = DEFAULT_RESIZE[0]
    height: int = DEFAULT_RESIZE[1]

    def __post_init__(self):
        if self.mu1 < 0 or self.mu2 <= 0:
            raise SlamError("mu1 must be >= 0 and mu2 > 0")
        if self.width <= 0 or self.height <= 0:
            raise SlamError("resize dimensions must be positive")


class DetectorBackend(Protocol):
    name: str

    def infer(self, image) -> ScoreField:
        ...


def compute_adaptive_threshold(field: ScoreField, state: AdaptiveThresholdState) -> float:
    """th = E + sqrt(var)/2 + mu1 * sigmoid(mu2 * m) over every score in the field."""
    scores = field.scores
    mean = float(np.mean(scores))
    variance = float(np.var(scores))
    return mean + np.sqrt(variance) / 2.0 + state.mu1 * float(expit(state.mu2 * state.last_match_count))


def filter_scores(field: ScoreField, threshold: float,
                  nms_radius: int = 4) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cells with score strictly above threshold, then non-maximum suppression.

    Returns (rows, cols, scores) ordered by descending score.
    """
    if not np.isfinite(threshold):
        raise SlamError("threshold must be finite")
    scores = field.scores
    keep = scores > threshold
    if nms_radius > 0 and keep.any():
        candidate = np.where(keep, scores, 0.0)
        local_max = ndimage.maximum_filter(candidate, size=2 * nms_radius + 1, mode="constant", cval=0.0)
        keep &= candidate == local_max
    rows, cols = np.nonzero(keep)
    values = scores[rows, cols]
    order = np.lexsort((cols, rows, -values))
    return rows[order], cols[order], values[order]


def rescale_keypoints(keypoints: np.ndarray, camera: PinholeCamera,
                      resized: Tuple[int, int] = DEFAULT_RESIZE) -> np.ndarray:
    """Map keypoints from the W'×H' detection frame to the camera's W×H frame.

    x scales by W/W' and y by H/H'; results are clamped to the image.
    """
    keypoints = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    resized_w, resized_h = resized
    out = np.column_stack([keypoints[:, 0] * camera.width / resized_w,
                           keypoints[:, 1] * camera.height / resized_h])
    out[:, 0] = np.clip(out[:, 0], 0.0, camera.width - 1)
    out[:, 1] = np.clip(out[:, 1], 0.0, camera.height - 1)
    return out


def prepare_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Grayscale (0.299/0.587/0.114), resize to W'×H', scale to [0, 1] float32."""
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    if image.shape[1] != width or image.shape[0] != height:
        image = cv2.resize(image, (width, height), interpolation=cv2.INTER_AREA)
    scale = 255.0 if image.dtype == np.uint8 else 1.0
    return image.astype(np.float32) / scale


def extract(source: Union[ScoreField, np.ndarray, object], camera: PinholeCamera,
            state: AdaptiveThresholdState, backend: Optional[DetectorBackend] = None,
            nms_radius: int = 4, fixed_threshold: Optional[float] = None) -> FeatureSet:
    """Backend inference, threshold, NMS, descriptor lookup, rescale."""
    if isinstance(source, ScoreField):
        field = source
    else:
        if backend is None:
            raise BackendError("no detector backend attached")
        image = prepare_image(source, state.width, state.height) if isinstance(source, np.ndarray) else source
        field = backend.infer(image)

    threshold = fixed_threshold if fixed_threshold is not None else compute_adaptive_threshold(field, state)
    rows, cols, values = filter_scores(field, threshold, nms_radius)
    descriptors = field.descriptors.sample(rows, cols)
    norms = np.linalg.norm(descriptors, axis=1)
    valid = norms > 1e-12
    rows, cols, values = rows[valid], cols[valid], values[valid]
    descriptors = descriptors[valid] / norms[valid, None]

    points = np.column_stack([cols, rows]).astype(np.float64)
    if field.offsets is not None and len(points):
        points += field.offsets[rows, cols]
    keypoints = rescale_keypoints(points, camera, (field.width, field.height))
    logger.debug("extracted %d features at threshold %.4f", len(keypoints), threshold)
    return FeatureSet(keypoints, values, descriptors, threshold)
