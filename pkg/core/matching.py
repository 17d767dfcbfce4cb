"""Soft partial assignment between two feature sets and hard correspondence extraction."""
import logging
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy.spatial import cKDTree

from core.errors import DimensionMismatchError, SlamError
from core.features import FeatureSet
from core.geometry import PinholeCamera

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class AssignmentMatrix:
    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)
        if values.ndim != 2:
            raise SlamError("assignment matrix must be 2-D")
        if values.size and (values.sum(axis=1).max() > 1 + SUM_TOLERANCE
                            or values.sum(axis=0).max() > 1 + SUM_TOLERANCE):
            raise SlamError("assignment matrix is not a partial assignment")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class MatchSet:
    index_a: np.ndarray
    index_b: np.ndarray
    confidence: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "index_a", np.asarray(self.index_a, dtype=int).reshape(-1))
        object.__setattr__(self, "index_b", np.asarray(self.index_b, dtype=int).reshape(-1))
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=float).reshape(-1))

    @classmethod
    def empty(cls, provenance: str = "") -> "MatchSet":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0), provenance)

    def __len__(self) -> int:
        return len(self.index_a)

    def pairs(self):
        return list(zip(self.index_a.tolist(), self.index_b.tolist(), self.confidence.tolist()))

    def transposed(self) -> "MatchSet":
        order = np.argsort(self.index_b, kind="stable")
        return MatchSet(self.index_b[order], self.index_a[order], self.confidence[order], self.provenance)


class MatcherBackend(Protocol):
    name: str

    def match(self, keypoints_a: np.ndarray, descriptors_a: np.ndarray,
              keypoints_b: np.ndarray, descriptors_b: np.ndarray) -> np.ndarray:
        """M×N match likelihoods for keypoints normalized to [0, 1]²."""
        ...


def match(setA: FeatureSet, setB: FeatureSet, backend: MatcherBackend,
          cameraA: PinholeCamera, cameraB: Optional[PinholeCamera] = None) -> AssignmentMatrix:
    cameraB = cameraB or cameraA
    if len(setA) == 0 or len(setB) == 0:
        return AssignmentMatrix(np.zeros((len(setA), len(setB))), backend.name)
    if setA.dim != setB.dim:
        raise DimensionMismatchError(f"descriptor lengths differ: {setA.dim} vs {setB.dim}")
    values = backend.match(setA.normalized_keypoints(cameraA), setA.descriptors,
                           setB.normalized_keypoints(cameraB), setB.descriptors)
    return AssignmentMatrix(values, backend.name)


def extract_matches(P: AssignmentMatrix, min_confidence: float = 0.2) -> MatchSet:
    """Mutual-best pairs with likelihood at least min_confidence."""
    if not 0.0 <= min_confidence <= 1.0:
        raise SlamError("min_confidence must lie in [0, 1]")
    values = P.values
    if values.size == 0:
        return MatchSet.empty(P.provenance)
    best_b = np.argmax(values, axis=1)
    best_a = np.argmax(values, axis=0)
    rows = np.arange(values.shape[0])
    mutual = best_a[best_b] == rows
    confidence = values[rows, best_b]
    keep = mutual & (confidence >= min_confidence)
    return MatchSet(rows[keep], best_b[keep], confidence[keep], P.provenance)


def descriptor_similarity(descriptors_a: np.ndarray, descriptors_b: np.ndarray) -> np.ndarray:
    """Squared positive cosine similarity of unit descriptors."""
    return np.maximum(descriptors_a @ descriptors_b.T, 0.0) ** 2


def match_with_prior(setA: FeatureSet, setB: FeatureSet, predicted: np.ndarray, radius: float,
                     min_confidence: float = 0.2) -> MatchSet:
    """Window-restricted matching: each A-feature only considers B-features strictly within
    `radius` pixels of its predicted position (NaN predictions are skipped)."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 2)
    if len(predicted) != len(setA):
        raise SlamError("one prediction per A-feature is required")
    if radius <= 0 or len(setA) == 0 or len(setB) == 0:
        return MatchSet.empty("prior")

    tree = cKDTree(setB.keypoints)
    candidates = []
    for i, center in enumerate(predicted):
        if not np.all(np.isfinite(center)):
            continue
        neighbours = tree.query_ball_point(center, radius)
        if not neighbours:
            continue
        neighbours = np.asarray(neighbours, dtype=int)
        distances = np.linalg.norm(setB.keypoints[neighbours] - center, axis=1)
        neighbours = neighbours[distances < radius]
        if len(neighbours) == 0:
            continue
        similarity = descriptor_similarity(setA.descriptors[i:i + 1], setB.descriptors[neighbours])[0]
        for j, s in zip(neighbours, similarity):
            if s >= min_confidence:
                candidates.append((s, i, int(j)))

    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_a, used_b = set(), set()
    index_a, index_b, confidence = [], [], []
    for s, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        index_a.append(i)
        index_b.append(j)
        confidence.append(s)
    order = np.argsort(index_a, kind="stable")
    return MatchSet(np.asarray(index_a, int)[order], np.asarray(index_b, int)[order],
                    np.asarray(confidence, float)[order], "prior")


class Matcher:
    """A matcher backend bound to a camera and a confidence floor."""

    def __init__(self, backend: MatcherBackend, camera: PinholeCamera, min_confidence: float = 0.2):
        self.backend = backend
        self.camera = camera
        self.min_confidence = min_confidence

    def assignment(self, setA: FeatureSet, setB: FeatureSet) -> AssignmentMatrix:
        return match(setA, setB, self.backend, self.camera)

    def match_sets(self, setA: FeatureSet, setB: FeatureSet) -> MatchSet:
        matches = extract_matches(self.assignment(setA, setB), self.min_confidence)
        logger.debug("%s matched %d/%d features", self.backend.name, len(matches), min(len(setA), len(setB)))
        return matches

    def match_in_window(self, setA: FeatureSet, setB: FeatureSet, predicted: np.ndarray,
                        radius: float) -> MatchSet:
        return match_with_prior(setA, setB, predicted, radius, self.min_confidence)
