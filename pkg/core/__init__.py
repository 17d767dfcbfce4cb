from .geometry import PinholeCamera, PoseSE3, PoseSim3
from .world_map import WorldMap
from .evaluation import TrajectoryEvaluator

__all__ = ["PinholeCamera", "PoseSE3", "PoseSim3", "WorldMap", "TrajectoryEvaluator"]
