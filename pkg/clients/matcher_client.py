from pathlib import Path
from typing import List, Optional

import numpy as np

from core.errors import BackendError
from core.matching import descriptor_similarity


def _partial_assignment(scores: np.ndarray) -> np.ndarray:
    """Divide each entry by max(1, its row sum, its column sum)."""
    rows = scores.sum(axis=1, keepdims=True)
    cols = scores.sum(axis=0, keepdims=True)
    return scores / np.maximum(1.0, np.maximum(rows, cols))


class BruteForceMatcher:
    """Test oracle: p_ij = max(0, cos(d_i, d_j))² with row/column max-normalization."""

    name = "bruteforce"

    def match(self, keypoints_a: np.ndarray, descriptors_a: np.ndarray,
              keypoints_b: np.ndarray, descriptors_b: np.ndarray) -> np.ndarray:
        return _partial_assignment(descriptor_similarity(descriptors_a, descriptors_b))


class NeuralMatcher:
    """LightGlue-style matcher executed from an ONNX graph.

    Inputs, in graph order: keypoints A (1, M, 2), keypoints B (1, N, 2), descriptors A
    (1, M, L), descriptors B (1, N, L). The first output is the log assignment matrix,
    (1, M+1, N+1) with dustbins or (1, M, N).
    """

    name = "lightglue-onnx"

    def __init__(self, model_path: str, providers: Optional[List[str]] = None):
        self.model_path = Path(model_path)
        if not self.model_path.exists():
            raise BackendError(f"matcher model not found: {self.model_path}")
        try:
            import onnxruntime as ort
        except ImportError:
            raise ImportError("Install onnxruntime package: pip install onnxruntime")
        try:
            self.session = ort.InferenceSession(str(self.model_path),
                                                providers=providers or ["CPUExecutionProvider"])
        except Exception as e:
            raise BackendError(f"could not load matcher model {self.model_path}: {e}") from e
        self.input_names = [i.name for i in self.session.get_inputs()]
        if len(self.input_names) != 4:
            raise BackendError(f"matcher graph has {len(self.input_names)} inputs, expected 4")

    def match(self, keypoints_a: np.ndarray, descriptors_a: np.ndarray,
              keypoints_b: np.ndarray, descriptors_b: np.ndarray) -> np.ndarray:
        feeds = dict(zip(self.input_names, [
            keypoints_a[None].astype(np.float32), keypoints_b[None].astype(np.float32),
            descriptors_a[None].astype(np.float32), descriptors_b[None].astype(np.float32),
        ]))
        try:
            outputs = self.session.run(None, feeds)
        except Exception as e:
            raise BackendError(f"matcher inference failed: {e}") from e
        log_scores = np.asarray(outputs[0], dtype=np.float64)[0]
        m, n = len(keypoints_a), len(keypoints_b)
        if log_scores.shape == (m + 1, n + 1):
            log_scores = log_scores[:m, :n]
        elif log_scores.shape != (m, n):
            raise BackendError(f"matcher output {log_scores.shape} does not fit {m}x{n} keypoints")
        return _partial_assignment(np.clip(np.exp(log_scores), 0.0, 1.0))
