"""Sim(3) / SE(3) pose-graph optimization over keyframe poses."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import lil_matrix
from scipy.spatial.transform import Rotation

from core.errors import RankDeficiencyError
from core.geometry import PoseSim3

logger = logging.getLogger(__name__)


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: PoseSim3  # S_i ∘ S_j⁻¹: camera j to camera i
    weight: float = 1.0
    loop: bool = False


def relative(S_i: PoseSim3, S_j: PoseSim3) -> PoseSim3:
    return S_i.compose(S_j.inverse())


def _edge_error(measurement: PoseSim3, S_i: PoseSim3, S_j: PoseSim3, with_scale: bool) -> np.ndarray:
    error = measurement.inverse().compose(relative(S_i, S_j))
    rotvec = Rotation.from_quat(error.rotation).as_rotvec()
    if with_scale:
        return np.concatenate([rotvec, error.translation, [np.log(error.scale)]])
    return np.concatenate([rotvec, error.translation])


class PoseGraph:
    """World-to-camera similarity per keyframe, relative-pose edges, fixed gauge nodes."""

    def __init__(self, with_scale: bool = True):
        self.with_scale = with_scale
        self.nodes: Dict[int, PoseSim3] = {}
        self.fixed: Set[int] = set()
        self.edges: List[PoseGraphEdge] = []
        self._edge_keys: Set[Tuple[int, int]] = set()

    @property
    def dof(self) -> int:
        return 7 if self.with_scale else 6

    def add_node(self, kf_id: int, pose: PoseSim3, fixed: bool = False) -> None:
        if not self.with_scale:
            pose = PoseSim3(pose.rotation, pose.translation / pose.scale, 1.0)
        self.nodes[kf_id] = pose
        if fixed:
            self.fixed.add(kf_id)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self._edge_keys

    def add_edge(self, i: int, j: int, measurement: Optional[PoseSim3] = None,
                 weight: float = 1.0, loop: bool = False) -> bool:
        """Add an edge; without a measurement the current node estimates define it."""
        if i == j or self.has_edge(i, j) or i not in self.nodes or j not in self.nodes:
            return False
        if measurement is None:
            measurement = relative(self.nodes[i], self.nodes[j])
        self.edges.append(PoseGraphEdge(i, j, measurement, weight, loop))
        self._edge_keys.add((min(i, j), max(i, j)))
        return True

    def _pack(self, free: List[int]) -> np.ndarray:
        x = []
        for kf_id in free:
            pose = self.nodes[kf_id]
            x.extend(Rotation.from_quat(pose.rotation).as_rotvec())
            x.extend(pose.translation)
            if self.with_scale:
                x.append(np.log(pose.scale))
        return np.asarray(x, dtype=float)

    def _unpack(self, x: np.ndarray, free: List[int]) -> Dict[int, PoseSim3]:
        poses = dict(self.nodes)
        d = self.dof
        for k, kf_id in enumerate(free):
            block = x[d * k:d * (k + 1)]
            scale = float(np.exp(block[6])) if self.with_scale else 1.0
            poses[kf_id] = PoseSim3(Rotation.from_rotvec(block[:3]).as_quat(), block[3:6], scale)
        return poses

    def residuals(self, poses: Dict[int, PoseSim3]) -> np.ndarray:
        out = [np.sqrt(edge.weight) * _edge_error(edge.measurement, poses[edge.i], poses[edge.j], self.with_scale)
               for edge in self.edges]
        return np.concatenate(out) if out else np.zeros(0)

    def cost(self, poses: Optional[Dict[int, PoseSim3]] = None) -> float:
        r = self.residuals(self.nodes if poses is None else poses)
        return 0.5 * float(r @ r)

    def optimize(self, max_iterations: int = 20, tolerance: float = 1e-12) -> Dict[int, PoseSim3]:
        """Solve the graph in place and return the optimized poses."""
        if not self.fixed:
            raise RankDeficiencyError("pose graph has no fixed node")
        free = [kf_id for kf_id in sorted(self.nodes) if kf_id not in self.fixed]
        if not free or not self.edges:
            return dict(self.nodes)

        d = self.dof
        column = {kf_id: d * k for k, kf_id in enumerate(free)}
        sparsity = lil_matrix((d * len(self.edges), d * len(free)), dtype=int)
        for e, edge in enumerate(self.edges):
            for node in (edge.i, edge.j):
                if node in column:
                    sparsity[d * e:d * (e + 1), column[node]:column[node] + d] = 1

        def fun(x):
            return self.residuals(self._unpack(x, free))

        x0 = self._pack(free)
        initial = self.cost()
        result = least_squares(fun, x0, jac="3-point", jac_sparsity=sparsity, method="trf",
                               x_scale="jac", ftol=tolerance, xtol=tolerance, gtol=tolerance,
                               max_nfev=max_iterations * 100)
        self.nodes = self._unpack(result.x, free)
        logger.debug("pose graph: %d nodes, %d edges, cost %.4g -> %.4g",
                     len(self.nodes), len(self.edges), initial, self.cost())
        return dict(self.nodes)


def essential_graph(kf_ids: Iterable[int], initial: Dict[int, PoseSim3], uncorrected: Dict[int, PoseSim3],
                    parents: Dict[int, int], covisibility, loop_connections: Dict[int, Iterable[int]],
                    past_loops: Iterable[Tuple[int, int]], fixed: Iterable[int],
                    with_scale: bool = True, min_weight: int = 100) -> PoseGraph:
    """Spanning-tree, strong covisibility, previous loop and new loop edges over the given keyframes.

    `initial` holds the starting estimate of every node (loop-corrected where available);
    `uncorrected` the poses before correction, from which non-loop edge measurements are taken.
    `covisibility(kf_id)` returns a mapping neighbour -> shared point count.
    """
    graph = PoseGraph(with_scale)
    fixed = set(fixed)
    for kf_id in sorted(kf_ids):
        graph.add_node(kf_id, initial[kf_id], fixed=kf_id in fixed)

    def measured(i, j):
        return relative(uncorrected.get(i, initial[i]), uncorrected.get(j, initial[j]))

    for i, neighbours in sorted(loop_connections.items()):
        for j in sorted(neighbours):
            graph.add_edge(i, j, relative(initial[i], initial[j]), loop=True)
    for i in sorted(graph.nodes):
        parent = parents.get(i)
        if parent is not None and parent in graph.nodes:
            graph.add_edge(i, parent, measured(i, parent))
    for i, j in past_loops:
        if i in graph.nodes and j in graph.nodes:
            graph.add_edge(i, j, measured(i, j), loop=True)
    for i in sorted(graph.nodes):
        for j, weight in sorted(covisibility(i).items()):
            if j < i and weight >= min_weight and j in graph.nodes:
                graph.add_edge(i, j, measured(i, j))
    return graph
