"""Kinematic skeleton graphs: joints, segments, sagittal correspondence.

Joint ordering of the bundled 17-joint lifting skeleton (``h36m17``)::

    0 pelvis (root)   4 l_hip      8 thorax     12 l_elbow     16 r_wrist
    1 r_hip           5 l_knee     9 neck       13 l_wrist
    2 r_knee          6 l_ankle   10 head       14 r_shoulder
    3 r_ankle         7 spine     11 l_shoulder 15 r_elbow

A segment's side is the side of its distal joint, so thorax->shoulder
segments belong to the arms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SIDES = ("left", "right", "center")


@dataclass(frozen=True)
class SkeletonGraph:
    """Tree-shaped joint graph.

    Attributes
    ----------
    joint_names : tuple of str
        Length J.
    edges : tuple of (int, int)
        ``(proximal, distal)`` joint index pairs, length S = J - 1.
    joint_sides : tuple of str
        ``"left"``, ``"right"`` or ``"center"`` per joint.
    left_segments, right_segments : tuple of int
        Edge indices; ``right_segments[k]`` mirrors ``left_segments[k]``.
    joint_groups : dict
        Named joint index sets (``left_arm``, ``right_leg``, ``root``...).
    rest_pose : ndarray or None
        (J, 3) reference pose in meters, used by the synthetic generator.
    """

    name: str
    joint_names: tuple
    edges: tuple
    joint_sides: tuple
    left_segments: tuple
    right_segments: tuple
    joint_groups: dict = field(default_factory=dict)
    root: int = 0
    rest_pose: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        J = len(self.joint_names)
        if len(self.edges) != J - 1:
            raise ValueError(f"a tree over {J} joints needs {J - 1} edges, got {len(self.edges)}")
        if len(self.joint_sides) != J:
            raise ValueError("one side label per joint is required")
        for p, d in self.edges:
            if not (0 <= p < J and 0 <= d < J) or p == d:
                raise ValueError(f"invalid edge ({p}, {d})")
        # connected + S = J - 1 <=> spanning tree
        seen = {self.root}
        frontier = [self.root]
        nbrs = [[] for _ in range(J)]
        for p, d in self.edges:
            nbrs[p].append(d)
            nbrs[d].append(p)
        while frontier:
            j = frontier.pop()
            for k in nbrs[j]:
                if k not in seen:
                    seen.add(k)
                    frontier.append(k)
        if len(seen) != J:
            raise ValueError("edges do not connect all joints")
        if len(self.left_segments) != len(self.right_segments):
            raise ValueError("left/right segment lists differ in length")
        lr = list(self.left_segments) + list(self.right_segments)
        if len(set(lr)) != len(lr) or any(not 0 <= s < len(self.edges) for s in lr):
            raise ValueError("left/right segments must be distinct edge indices")
        for name, idx in self.joint_groups.items():
            if any(not 0 <= j < J for j in idx):
                raise ValueError(f"joint group {name!r} has out-of-range indices")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_segments(self) -> int:
        return len(self.edges)

    @property
    def central_segments(self) -> tuple:
        sided = set(self.left_segments) | set(self.right_segments)
        return tuple(s for s in range(self.num_segments) if s not in sided)

    @property
    def tau(self) -> dict:
        """Left segment index -> mirrored right segment index."""
        return dict(zip(self.left_segments, self.right_segments))

    @property
    def tau_inverse(self) -> dict:
        return dict(zip(self.right_segments, self.left_segments))

    @property
    def parents(self) -> np.ndarray:
        par = np.full(self.num_joints, -1, dtype=int)
        for p, d in self.edges:
            par[d] = p
        return par

    def group(self, name: str) -> tuple:
        return tuple(self.joint_groups.get(name, ()))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_joints, dtype=int)
        for p, d in self.edges:
            deg[p] += 1
            deg[d] += 1
        return deg

    def to_dict(self) -> dict:
        """Inverse of :func:`skeleton_from_dict` (mirror names are recomputed)."""
        mirror = _joint_mirror(self)
        joints = []
        for j, n in enumerate(self.joint_names):
            entry = {"name": n, "side": self.joint_sides[j], "mirror": self.joint_names[mirror[j]]}
            if self.rest_pose is not None:
                entry["rest"] = [float(v) for v in self.rest_pose[j]]
            joints.append(entry)
        return {
            "name": self.name,
            "units": "m",
            "root": self.joint_names[self.root],
            "joints": joints,
            "edges": [[self.joint_names[p], self.joint_names[d]] for p, d in self.edges],
            "groups": {k: [self.joint_names[j] for j in v] for k, v in self.joint_groups.items()},
        }


def _joint_mirror(graph: SkeletonGraph) -> list:
    mirror = list(range(graph.num_joints))
    for ls, rs in zip(graph.left_segments, graph.right_segments):
        for a, b in zip(graph.edges[ls], graph.edges[rs]):
            mirror[a], mirror[b] = b, a
    return mirror


def skeleton_from_dict(spec: dict) -> SkeletonGraph:
    """Build a graph from the structured skeleton description.

    Expected keys: ``name``, ``root``, ``joints`` (each with ``name``,
    ``side``, ``mirror`` and optionally ``rest``), ``edges`` (pairs of
    joint names, proximal first) and ``groups``.
    """
    joints = spec["joints"]
    names = [j["name"] for j in joints]
    index = {n: i for i, n in enumerate(names)}
    if len(index) != len(names):
        raise ValueError("duplicate joint names")
    sides = []
    for j in joints:
        side = j.get("side", "center")
        if side not in SIDES:
            raise ValueError(f"unknown side label {side!r} for joint {j['name']!r}")
        sides.append(side)

    def _idx(n):
        if isinstance(n, int):
            return n
        if n not in index:
            raise ValueError(f"unknown joint {n!r}")
        return index[n]

    edges = tuple((_idx(p), _idx(d)) for p, d in spec["edges"])
    mirror = [_idx(j.get("mirror", j["name"])) for j in joints]
    edge_index = {e: s for s, e in enumerate(edges)}

    left, right = [], []
    for s, (p, d) in enumerate(edges):
        if sides[d] != "left":
            continue
        twin = (mirror[p], mirror[d])
        if twin not in edge_index or sides[twin[1]] != "right":
            raise ValueError(f"left segment {names[p]}->{names[d]} has no right-side mirror")
        left.append(s)
        right.append(edge_index[twin])
    n_right = sum(1 for p, d in edges if sides[d] == "right")
    if n_right != len(right):
        raise ValueError("some right-side segments have no left-side mirror")

    rest = None
    if all("rest" in j for j in joints):
        rest = np.asarray([j["rest"] for j in joints], dtype=np.float64)

    groups = {k: tuple(_idx(n) for n in v) for k, v in spec.get("groups", {}).items()}
    return SkeletonGraph(
        name=spec.get("name", "custom"),
        joint_names=tuple(names),
        edges=edges,
        joint_sides=tuple(sides),
        left_segments=tuple(left),
        right_segments=tuple(right),
        joint_groups=groups,
        root=_idx(spec.get("root", 0)),
        rest_pose=rest,
    )


def load_skeleton(path_or_name: str | Path) -> SkeletonGraph:
    """Load a skeleton from a JSON file, or a bundled one by name."""
    p = Path(path_or_name)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        try:
            text = resources.files("diffhpe.skeletons").joinpath(f"{path_or_name}.json").read_text()
        except FileNotFoundError:
            raise ValueError(f"no skeleton file or bundled skeleton named {path_or_name!r}") from None
    return skeleton_from_dict(json.loads(text))


def standard_h36m_skeleton() -> SkeletonGraph:
    return load_skeleton("h36m17")


def adjacency(graph: SkeletonGraph, self_loops: bool = False) -> np.ndarray:
    J = graph.num_joints
    A = np.zeros((J, J), dtype=np.float64)
    for p, d in graph.edges:
        A[p, d] = A[d, p] = 1.0
    np.fill_diagonal(A, 1.0 if self_loops else 0.0)
    return A


def segment_lengths(pose, graph: SkeletonGraph) -> np.ndarray:
    """Euclidean length of every segment.

    ``pose`` has shape (..., J, 3); the result has shape (..., S).
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2] != graph.num_joints:
        raise ValueError(f"pose has {pose.shape[-2]} joints, skeleton has {graph.num_joints}")
    prox = np.array([p for p, _ in graph.edges])
    dist = np.array([d for _, d in graph.edges])
    return np.linalg.norm(pose[..., dist, :] - pose[..., prox, :], axis=-1)
