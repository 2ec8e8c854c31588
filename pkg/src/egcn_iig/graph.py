"""Intra-body and inter-body skeleton graphs with spatial-configuration partitioning."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

NUM_JOINTS = 25

# NTU RGB+D 25-joint kinematic tree, 1-based joint numbers as distributed.
NTU_EDGES_1BASED = (
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
    (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
)
INTRA_EDGES = tuple((i - 1, j - 1) for i, j in NTU_EDGES_1BASED)

# spine at the shoulders; the bone-feature root
ROOT_JOINT = 20

# head, torso (mid-spine), left hand, right hand, left foot, right foot
REPRESENTATIVE_NAMES = ("head", "torso", "left_hand", "right_hand", "left_foot", "right_foot")
REPRESENTATIVE_JOINTS = (3, 1, 7, 11, 15, 19)

BETA_NORM = 0.001


@dataclass(frozen=True)
class BodyGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    kind: str
    representative_joints: tuple[tuple[int, ...], ...] = ()
    virtual_edges: tuple[tuple[int, int], ...] = ()

    def neighbors(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in range(self.node_count)]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return nbrs

    def degree(self, node: int) -> int:
        return len(self.neighbors()[node])


@dataclass
class PartitionedAdjacency:
    """Binary subsets ``binary[k]``, and once normalized ``normalized[k]`` and ``lam[k]``.

    Row ``i`` of each matrix belongs to root node ``i``; column ``j`` is the neighbor.
    """

    binary: np.ndarray
    normalized: np.ndarray | None = None
    lam: np.ndarray | None = None
    beta: float | None = None
    labels: tuple[str, ...] = field(default=("root", "centripetal", "centrifugal"))


def _check_graph(node_count: int, edges) -> None:
    seen = set()
    for i, j in edges:
        if i == j:
            raise ValueError(f"self edge at node {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate edge {key}")
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise ValueError(f"edge {key} outside {node_count} nodes")
        seen.add(key)


def build_intra_graph() -> BodyGraph:
    _check_graph(NUM_JOINTS, INTRA_EDGES)
    return BodyGraph(NUM_JOINTS, INTRA_EDGES, "intra")


def build_inter_graph() -> BodyGraph:
    """Two kinematic trees plus a virtual edge for every pair of representative joints."""
    second = tuple((i + NUM_JOINTS, j + NUM_JOINTS) for i, j in INTRA_EDGES)
    reps_a = REPRESENTATIVE_JOINTS
    reps_b = tuple(j + NUM_JOINTS for j in REPRESENTATIVE_JOINTS)
    virtual = tuple((a, b) for a in reps_a for b in reps_b)
    edges = INTRA_EDGES + second + virtual
    _check_graph(2 * NUM_JOINTS, edges)
    return BodyGraph(2 * NUM_JOINTS, edges, "inter", (reps_a, reps_b), virtual)


def build_graph(kind: str) -> BodyGraph:
    if kind == "intra":
        return build_intra_graph()
    if kind == "inter":
        return build_inter_graph()
    raise ValueError(f"unknown graph kind {kind!r}")


def parent_map(graph: BodyGraph | None = None, root: int = ROOT_JOINT) -> np.ndarray:
    """Each joint's adjacent joint toward ``root``; the root maps to itself."""
    graph = graph or build_intra_graph()
    nbrs = graph.neighbors()
    parent = np.full(graph.node_count, -1)
    parent[root] = root
    queue = [root]
    while queue:
        i = queue.pop(0)
        for j in sorted(nbrs[i]):
            if parent[j] < 0:
                parent[j] = i
                queue.append(j)
    if (parent < 0).any():
        raise ValueError("graph is not connected")
    return parent


def partition_spatial(graph: BodyGraph, reference_pose, center=None) -> PartitionedAdjacency:
    """Split each neighborhood into root / centripetal / centrifugal subsets.

    A neighbor ``j`` of root ``i`` is centripetal when it is strictly closer to
    the center of gravity than ``i``; ties go to the centrifugal subset.
    ``center`` defaults to the mean of all node coordinates.
    """
    pose = np.asarray(reference_pose, dtype=np.float64)
    if pose.shape != (graph.node_count, 3):
        raise ValueError(f"reference pose must be ({graph.node_count}, 3), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("reference pose contains non-finite coordinates")
    cog = pose.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    dist = np.linalg.norm(pose - cog, axis=1)
    tol = 1e-9 * max(1.0, float(dist.max()))
    if np.ptp(pose, axis=0).max() <= tol:
        warnings.warn("degenerate reference pose: all neighbors assigned to the centrifugal subset", stacklevel=2)
        dist = np.zeros_like(dist)
    v = graph.node_count
    binary = np.zeros((3, v, v))
    binary[0] = np.eye(v)
    for a, b in graph.edges:
        for i, j in ((a, b), (b, a)):
            k = 1 if dist[j] < dist[i] - tol else 2
            binary[k, i, j] = 1.0
    return PartitionedAdjacency(binary)


def normalize_adjacency(part: PartitionedAdjacency, beta: float = BETA_NORM) -> PartitionedAdjacency:
    """``A_k = Lam_k^-1/2 Abar_k Lam_k^-1/2`` with ``Lam_k^ii = sum_j Abar_k^ij + beta``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    lam_diag = part.binary.sum(axis=2) + beta
    inv = lam_diag ** -0.5
    normalized = inv[:, :, None] * part.binary * inv[:, None, :]
    lam = np.stack([np.diag(d) for d in lam_diag])
    return PartitionedAdjacency(part.binary, normalized, lam, beta, part.labels)


def canonical_pose() -> np.ndarray:
    """A neutral standing 25-joint pose (meters, y up, facing +z)."""
    return np.array(
        [
            [0.00, 0.00, 0.00],   # 1 spine base
            [0.00, 0.28, 0.00],   # 2 mid spine
            [0.00, 0.58, 0.00],   # 3 neck
            [0.00, 0.72, 0.02],   # 4 head
            [-0.18, 0.52, 0.00],  # 5 left shoulder
            [-0.22, 0.26, 0.02],  # 6 left elbow
            [-0.24, 0.02, 0.06],  # 7 left wrist
            [-0.24, -0.06, 0.08], # 8 left hand
            [0.18, 0.52, 0.00],   # 9 right shoulder
            [0.22, 0.26, 0.02],   # 10 right elbow
            [0.24, 0.02, 0.06],   # 11 right wrist
            [0.24, -0.06, 0.08],  # 12 right hand
            [-0.09, -0.02, 0.00], # 13 left hip
            [-0.10, -0.44, 0.02], # 14 left knee
            [-0.10, -0.84, -0.02],# 15 left ankle
            [-0.10, -0.88, 0.08], # 16 left foot
            [0.09, -0.02, 0.00],  # 17 right hip
            [0.10, -0.44, 0.02],  # 18 right knee
            [0.10, -0.84, -0.02], # 19 right ankle
            [0.10, -0.88, 0.08],  # 20 right foot
            [0.00, 0.52, 0.00],   # 21 spine shoulder
            [-0.24, -0.13, 0.09], # 22 left hand tip
            [-0.21, -0.08, 0.12], # 23 left thumb
            [0.24, -0.13, 0.09],  # 24 right hand tip
            [0.21, -0.08, 0.12],  # 25 right thumb
        ]
    )


def canonical_pair_pose(distance: float = 1.5) -> np.ndarray:
    """Two canonical bodies facing each other ``distance`` meters apart, as 50 nodes."""
    a = canonical_pose()
    b = canonical_pose() * np.array([-1.0, 1.0, -1.0])
    a = a - np.array([0.0, 0.0, distance / 2])
    b = b + np.array([0.0, 0.0, distance / 2])
    return np.concatenate([a, b])


def reference_pose(kind: str) -> np.ndarray:
    return canonical_pose() if kind == "intra" else canonical_pair_pose()


def build_adjacency(kind: str, pose=None, beta: float = BETA_NORM) -> tuple[BodyGraph, PartitionedAdjacency]:
    graph = build_graph(kind)
    pose = reference_pose(kind) if pose is None else pose
    return graph, normalize_adjacency(partition_spatial(graph, pose), beta)


def dump_adjacency(part: PartitionedAdjacency, directory: str | os.PathLike, prefix: str = "A") -> list[str]:
    """Write each binary and normalized matrix as a plain-text file for inspection."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for k, label in enumerate(part.labels):
        for tag, mats in (("bar", part.binary), ("norm", part.normalized)):
            if mats is None:
                continue
            path = os.path.join(directory, f"{prefix}{k + 1}_{label}_{tag}.txt")
            np.savetxt(path, mats[k], fmt="%.8g")
            written.append(path)
    return written
