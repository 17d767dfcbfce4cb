from pathlib import Path
from typing import List, Optional

import numpy as np

from core.errors import BackendError
from core.features import DenseDescriptorGrid, ScoreField


class NeuralDetector:
    """SuperPoint-style detector executed from an ONNX graph.

    The graph takes a (1, 1, H', W') float image in [0, 1] and returns either a dense score
    map (1, H', W') or 65-channel cell logits (1, 65, H'/8, W'/8), plus a coarse descriptor
    map (1, L, H'/8, W'/8).
    """

    name = "superpoint-onnx"

    def __init__(self, model_path: str, descriptor_stride: int = 8,
                 providers: Optional[List[str]] = None):
        self.model_path = Path(model_path)
        self.descriptor_stride = descriptor_stride
        if not self.model_path.exists():
            raise BackendError(f"detector model not found: {self.model_path}")
        try:
            import onnxruntime as ort
        except ImportError:
            raise ImportError("Install onnxruntime package: pip install onnxruntime")
        try:
            self.session = ort.InferenceSession(str(self.model_path),
                                                providers=providers or ["CPUExecutionProvider"])
        except Exception as e:
            raise BackendError(f"could not load detector model {self.model_path}: {e}") from e
        self.input_name = self.session.get_inputs()[0].name

    def infer(self, image: np.ndarray) -> ScoreField:
        tensor = np.ascontiguousarray(image, dtype=np.float32)[None, None]
        try:
            outputs = self.session.run(None, {self.input_name: tensor})
        except Exception as e:
            raise BackendError(f"detector inference failed: {e}") from e
        if len(outputs) < 2:
            raise BackendError(f"detector returned {len(outputs)} outputs, expected scores and descriptors")
        scores = self._dense_scores(np.asarray(outputs[0]), image.shape)
        descriptors = np.asarray(outputs[1])[0].transpose(1, 2, 0)
        return ScoreField(np.clip(scores, 0.0, 1.0), DenseDescriptorGrid(descriptors, self.descriptor_stride))

    def _dense_scores(self, raw: np.ndarray, shape) -> np.ndarray:
        if raw.ndim == 4 and raw.shape[1] == self.descriptor_stride ** 2 + 1:
            logits = raw[0]
            logits = logits - logits.max(axis=0, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=0, keepdims=True)
            cells = prob[:-1]
            s = self.descriptor_stride
            hc, wc = cells.shape[1:]
            dense = cells.reshape(s, s, hc, wc).transpose(2, 0, 3, 1).reshape(hc * s, wc * s)
        else:
            dense = raw.reshape(raw.shape[-2], raw.shape[-1])
        if dense.shape != tuple(shape[:2]):
            raise BackendError(f"detector score map {dense.shape} does not match input {tuple(shape[:2])}")
        return dense
