"""Spatial-temporal skeleton graphs over (frame, joint) nodes.

A joint topology fixes the within-frame edges (human body connectivity) and
the anatomical partitions used by graph pooling. A skeleton graph replicates
the topology over T frames: spatial edges copy the topology per frame,
temporal edges link the same joint in adjacent frames. Node ids are
``t * n_joints + joint``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COCO_JOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]

# Standard 19-edge COCO skeleton (0-based pairs).
_COCO_EDGES_17 = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
]

_HEAD_JOINTS = {0, 1, 2, 3, 4}

# Headless 12-joint skeleton: COCO body joints with the torso closed off so
# the graph stays connected. 8 limb edges + 4 torso edges.
_BODY_JOINT_NAMES = [
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]

_BODY_EDGES_12 = [
    (0, 2), (2, 4), (1, 3), (3, 5),          # arms
    (6, 8), (8, 10), (7, 9), (9, 11),        # legs
    (0, 1), (6, 7), (0, 6), (1, 7),          # torso
]


@dataclass(frozen=True)
class JointTopology:
    """Within-frame joint connectivity plus pooling partitions."""

    n_joints: int
    edges: tuple
    joint_names: tuple
    partition_map: dict = field(compare=False)

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.n_joints and 0 <= j < self.n_joints):
                raise ValueError(f"edge ({i},{j}) out of range for {self.n_joints} joints")
            if i == j:
                raise ValueError(f"self-loop at joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        upper = set(self.partition_map["upper"])
        lower = set(self.partition_map["lower"])
        if upper | lower != set(range(self.n_joints)):
            raise ValueError("upper/lower partitions must cover all joints")
        diag_a = set(self.partition_map["left_arm"]) | set(self.partition_map["right_leg"])
        diag_b = set(self.partition_map["right_arm"]) | set(self.partition_map["left_leg"])
        if diag_a & diag_b:
            raise ValueError("diagonal partitions must be disjoint")

    def pooling_groups(self):
        """The five node groups averaged by graph pooling, as index arrays.

        Raises ValueError when any group is empty (unusable for pooling).
        """
        p = self.partition_map
        groups = [
            np.arange(self.n_joints),
            np.array(sorted(p["upper"]), dtype=np.intp),
            np.array(sorted(p["lower"]), dtype=np.intp),
            np.array(sorted(set(p["left_arm"]) | set(p["right_leg"])), dtype=np.intp),
            np.array(sorted(set(p["right_arm"]) | set(p["left_leg"])), dtype=np.intp),
        ]
        for name, g in zip(("whole", "upper", "lower", "diag_a", "diag_b"), groups):
            if len(g) == 0:
                raise ValueError(f"pooling group '{name}' is empty")
        return groups

    def describe(self):
        """Plain text table of joints and edges, for docs and tests."""
        lines = ["joints:"]
        lines += [f"  {i:2d} {name}" for i, name in enumerate(self.joint_names)]
        lines.append("edges:")
        lines += [f"  {self.joint_names[i]} -- {self.joint_names[j]}" for i, j in self.edges]
        return "\n".join(lines)


def coco_body_topology(include_head=False):
    """COCO-style topology: 17 joints with head, 12 body joints without."""
    if include_head:
        names = tuple(COCO_JOINT_NAMES)
        edges = tuple(_COCO_EDGES_17)
        partition = {
            "upper": list(range(0, 11)),        # head + shoulders/elbows/wrists
            "lower": list(range(11, 17)),
            "left_arm": [5, 7, 9],
            "right_arm": [6, 8, 10],
            "left_leg": [11, 13, 15],
            "right_leg": [12, 14, 16],
        }
        return JointTopology(17, edges, names, partition)
    names = tuple(_BODY_JOINT_NAMES)
    partition = {
        "upper": [0, 1, 2, 3, 4, 5],
        "lower": [6, 7, 8, 9, 10, 11],
        "left_arm": [0, 2, 4],
        "right_arm": [1, 3, 5],
        "left_leg": [6, 8, 10],
        "right_leg": [7, 9, 11],
    }
    return JointTopology(12, tuple(_BODY_EDGES_12), names, partition)


GRAPH_MODES = ("spatial", "temporal", "both")


class SkeletonGraph:
    """Undirected spatial-temporal graph over T*N keypoint nodes."""

    def __init__(self, topology, n_frames, mode="both"):
        if n_frames < 1:
            raise ValueError(f"need at least one frame, got {n_frames}")
        if mode not in GRAPH_MODES:
            raise ValueError(f"mode must be one of {GRAPH_MODES}, got {mode!r}")
        self.topology = topology
        self.n_frames = n_frames
        self.mode = mode
        n = topology.n_joints
        self.n_nodes = n_frames * n

        spatial = []
        if mode in ("spatial", "both"):
            for t in range(n_frames):
                base = t * n
                spatial += [(base + i, base + j) for i, j in topology.edges]
        temporal = []
        if mode in ("temporal", "both"):
            for t in range(n_frames - 1):
                base = t * n
                temporal += [(base + i, base + n + i) for i in range(n)]
        self.spatial_edges = spatial
        self.temporal_edges = temporal

        self._adjacency = [[] for _ in range(self.n_nodes)]
        for u, v in spatial + temporal:
            self._adjacency[u].append(v)
            self._adjacency[v].append(u)
        for lst in self._adjacency:
            lst.sort()

    @property
    def edges(self):
        return self.spatial_edges + self.temporal_edges

    def neighbors(self, v):
        """Sorted neighbor node ids of v across both edge sets."""
        if not 0 <= v < self.n_nodes:
            raise IndexError(f"node id {v} out of range [0, {self.n_nodes})")
        return list(self._adjacency[v])

    def directed_edges(self):
        """(src, dst) arrays with both directions, sorted by dst then src."""
        und = self.edges
        if not und:
            return (np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))
        arr = np.asarray(und, dtype=np.intp)
        src = np.concatenate([arr[:, 0], arr[:, 1]])
        dst = np.concatenate([arr[:, 1], arr[:, 0]])
        order = np.lexsort((src, dst))
        return src[order], dst[order]


def build_graph(topology, n_frames, mode="both"):
    return SkeletonGraph(topology, n_frames, mode)
