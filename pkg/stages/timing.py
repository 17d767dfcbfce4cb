"""Per-stage wall-clock timing: feature extraction, tracking, local mapping, place recognition
and loop correction."""
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Union

import numpy as np

CATEGORIES = ("FE", "TT", "LM", "PR", "LC")
HISTOGRAM_BINS = 10


class StageTimer:
    def __init__(self):
        self.samples: Dict[str, List[float]] = {c: [] for c in CATEGORIES}

    @contextmanager
    def measure(self, category: str) -> Iterator[None]:
        if category not in self.samples:
            raise KeyError(f"unknown timing category {category!r}; expected one of {CATEGORIES}")
        start = time.perf_counter()
        try:
            yield
        finally:
            self.samples[category].append(time.perf_counter() - start)

    def total(self, category: str) -> float:
        return float(sum(self.samples[category]))

    def histogram(self, category: str, bins: int = HISTOGRAM_BINS):
        """(counts, edges) of the recorded durations in milliseconds."""
        values = np.asarray(self.samples[category]) * 1e3
        if len(values) == 0:
            return np.zeros(bins, dtype=int), np.zeros(bins + 1)
        return np.histogram(values, bins=bins)

    def get_summary(self) -> Dict[str, Dict[str, float]]:
        summary = {}
        for category, values in self.samples.items():
            ms = np.asarray(values) * 1e3
            summary[category] = {
                "calls": len(ms),
                "total_ms": float(ms.sum()) if len(ms) else 0.0,
                "mean_ms": float(ms.mean()) if len(ms) else 0.0,
                "median_ms": float(np.median(ms)) if len(ms) else 0.0,
                "max_ms": float(ms.max()) if len(ms) else 0.0,
            }
        return summary

    def lines(self) -> List[str]:
        out = []
        for category, stats in self.get_summary().items():
            for key, value in stats.items():
                out.append(f"{category}.{key} {value:.6g}" if isinstance(value, float) else f"{category}.{key} {value}")
            counts, edges = self.histogram(category)
            out.append(f"{category}.histogram_edges_ms " + " ".join(f"{e:.6g}" for e in edges))
            out.append(f"{category}.histogram_counts " + " ".join(str(int(c)) for c in counts))
        return out

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")
