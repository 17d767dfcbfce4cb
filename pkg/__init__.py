from core.config import RunConfig, load_config
from core.evaluation import TrajectoryEvaluator
from core.world_map import WorldMap
from stages.system import SlamSystem, run_slam

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "TrajectoryEvaluator",
    "WorldMap",
    "SlamSystem",
    "run_slam",
]
