"""Run configuration: sectioned "key = value" text, fail-fast on unknown keys."""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Union

from core.errors import ConfigError, ConfigParseError, RangeViolationError

logger = logging.getLogger(__name__)

ABLATIONS = ("mt", "lm", "lc")


def _range(lo=None, hi=None, choices=None) -> Dict[str, Any]:
    return {"min": lo, "max": hi, "choices": choices}


@dataclass
class RunSection:
    sensor: str = field(default="mono", metadata=_range(choices=("mono", "stereo")))
    backend: str = field(default="synthetic", metadata=_range(choices=("synthetic", "neural")))
    detector_model: str = ""
    matcher_model: str = ""
    deterministic: bool = False
    seed: int = field(default=0, metadata=_range(0))
    ablate: str = ""


@dataclass
class FeatureSection:
    width: int = field(default=400, metadata=_range(16, 4096))
    height: int = field(default=300, metadata=_range(16, 4096))
    mu1: float = field(default=0.1, metadata=_range(0.0, 1.0))
    mu2: float = field(default=0.01, metadata=_range(1e-9, 1.0))
    nms_radius: int = field(default=4, metadata=_range(0, 32))
    threshold_mode: str = field(default="adaptive", metadata=_range(choices=("adaptive", "fixed")))
    fixed_threshold: float = field(default=0.3, metadata=_range(0.0, 1.0))
    descriptor_stride: int = field(default=8, metadata=_range(1, 64))
    background_score: float = field(default=0.05, metadata=_range(0.0, 1.0))


@dataclass
class MatcherSection:
    min_confidence: float = field(default=0.2, metadata=_range(0.0, 1.0))


@dataclass
class TrackerSection:
    min_inliers: int = field(default=20, metadata=_range(4))
    init_min_features: int = field(default=50, metadata=_range(8))
    init_frame_budget: int = field(default=50, metadata=_range(2))
    max_frame_gap: int = field(default=30, metadata=_range(1))
    keyframe_ratio: float = field(default=0.8, metadata=_range(0.0, 1.0))
    prior_radius: float = field(default=15.0, metadata=_range(0.0))
    local_map_radius: float = field(default=5.0, metadata=_range(0.0))
    local_map_keyframes: int = field(default=10, metadata=_range(1))
    lost_after: int = field(default=2, metadata=_range(1))
    pnp_iterations: int = field(default=200, metadata=_range(1))
    pnp_threshold: float = field(default=3.0, metadata=_range(0.1))


@dataclass
class MappingSection:
    lam: int = field(default=5, metadata=_range(1, 1000))
    window: int = field(default=10, metadata=_range(1))
    ba_iterations: int = field(default=20, metadata=_range(0))
    neighbours: int = field(default=10, metadata=_range(1))
    min_baseline_ratio: float = field(default=0.01, metadata=_range(0.0))
    min_parallax_deg: float = field(default=1.0, metadata=_range(0.0, 90.0))
    cull_grace: int = field(default=3, metadata=_range(0))
    cull_min_observers: int = field(default=3, metadata=_range(1))
    redundancy: float = field(default=0.9, metadata=_range(0.0, 1.0))
    fusion_radius: float = field(default=0.05, metadata=_range(0.0))


@dataclass
class LoopSection:
    k: int = field(default=10, metadata=_range(2, 64))
    depth: int = field(default=4, metadata=_range(1, 8))
    top_n: int = field(default=3, metadata=_range(1))
    verify_threshold: int = field(default=40, metadata=_range(0))
    verify_radius: float = field(default=5.0, metadata=_range(0.0))
    consistency: int = field(default=3, metadata=_range(1))
    min_keyframe_gap: int = field(default=10, metadata=_range(0))
    sim3_min_inliers: int = field(default=20, metadata=_range(3))
    covisibility_edge: int = field(default=100, metadata=_range(1))
    global_ba_iterations: int = field(default=10, metadata=_range(0))


@dataclass
class StereoSection:
    baseline: float = field(default=0.11, metadata=_range(1e-6))


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    matcher: MatcherSection = field(default_factory=MatcherSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    mapping: MappingSection = field(default_factory=MappingSection)
    loop: LoopSection = field(default_factory=LoopSection)
    stereo: StereoSection = field(default_factory=StereoSection)

    @property
    def ablations(self) -> Set[str]:
        return {a.strip() for a in self.run.ablate.split(",") if a.strip()}

    @property
    def stereo_mode(self) -> bool:
        return self.run.sensor == "stereo"

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            values = getattr(self, section.name)
            for item in dataclasses.fields(values):
                _check(section.name, item, getattr(values, item.name))
        unknown = self.ablations - set(ABLATIONS)
        if unknown:
            raise RangeViolationError(f"run.ablate: unknown toggles {sorted(unknown)}; expected {ABLATIONS}")
        if self.run.backend == "neural":
            for name in ("detector_model", "matcher_model"):
                path = getattr(self.run, name)
                if not path or not Path(path).is_file():
                    raise ConfigError(f"run.{name}: neural backend needs an existing model file, got {path!r}")

    def set(self, dotted_key: str, raw: str, line_number: int = 0) -> None:
        section_name, key = _split_key(dotted_key, line_number)
        section = getattr(self, section_name)
        item = next(f for f in dataclasses.fields(section) if f.name == key)
        setattr(section, key, _convert(item, raw, line_number))


def _check(section: str, item: dataclasses.Field, value: Any) -> None:
    meta = item.metadata
    if not meta:
        return
    name = f"{section}.{item.name}"
    if meta.get("choices") and value not in meta["choices"]:
        raise RangeViolationError(f"{name} = {value!r}: expected one of {meta['choices']}")
    if meta.get("min") is not None and value < meta["min"]:
        raise RangeViolationError(f"{name} = {value!r}: below minimum {meta['min']}")
    if meta.get("max") is not None and value > meta["max"]:
        raise RangeViolationError(f"{name} = {value!r}: above maximum {meta['max']}")


_SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
_SECTIONS = list(_SECTION_TYPES)


def _split_key(dotted_key: str, line_number: int, section: Optional[str] = None):
    if "." in dotted_key:
        section, key = dotted_key.split(".", 1)
    else:
        key = dotted_key
        section = section or "run"
    if section not in _SECTIONS:
        raise ConfigParseError(line_number, f"unknown section {section!r}")
    names = [f.name for f in dataclasses.fields(_SECTION_TYPES[section])]
    if key not in names:
        raise ConfigParseError(line_number, f"unknown key {section}.{key}")
    return section, key


def _convert(item: dataclasses.Field, raw: str, line_number: int) -> Any:
    kind = type(item.default)
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigParseError(line_number, f"{item.name}: {e}") from e


def parse_config(text: str) -> RunConfig:
    config = RunConfig()
    section: Optional[str] = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigParseError(number, f"malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigParseError(number, f"unknown section {section!r}")
            continue
        if "=" not in stripped:
            raise ConfigParseError(number, f"expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigParseError(number, "empty key")
        section_name, key = _split_key(key, number, section)
        config.set(f"{section_name}.{key}", value, number)
    config.validate()
    return config


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Config from a file; defaults when path is None."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text())
    logger.debug("loaded config from %s", path)
    return config


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Canonical text: sections and keys in declaration order, floats via repr."""
    blocks: List[str] = []
    for section in dataclasses.fields(config):
        values = getattr(config, section.name)
        lines = [f"[{section.name}]"]
        for item in dataclasses.fields(values):
            text = _format(getattr(values, item.name))
            lines.append(f"{item.name} = {text}" if text else f"{item.name} =")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
