from .detector_client import NeuralDetector
from .matcher_client import BruteForceMatcher, NeuralMatcher

__all__ = ["NeuralDetector", "BruteForceMatcher", "NeuralMatcher"]
