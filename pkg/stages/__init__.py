from .tracking import Tracker
from .local_mapping import LocalMapper
from .loop_closing import LoopCloser
from .system import SlamSystem, run_slam

__all__ = ["Tracker", "LocalMapper", "LoopCloser", "SlamSystem", "run_slam"]
