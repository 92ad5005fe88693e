"""Fifteen-landmark fetal pose graph and the masked-softmax adjacency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LANDMARK_NAMES: tuple[str, ...] = (
    "eye_L", "eye_R",
    "shoulder_L", "shoulder_R",
    "elbow_L", "elbow_R",
    "wrist_L", "wrist_R",
    "bladder",
    "hip_L", "hip_R",
    "knee_L", "knee_R",
    "ankle_L", "ankle_R",
)
N_LANDMARKS = len(LANDMARK_NAMES)
INDEX = {name: i for i, name in enumerate(LANDMARK_NAMES)}

LIMB_AGENT_NAMES = tuple(
    f"{part}_{side}"
    for part in ("shoulder", "elbow", "wrist", "hip", "knee", "ankle")
    for side in ("L", "R")
)

_SKELETON = [
    ("shoulder_{s}", "elbow_{s}"),
    ("elbow_{s}", "wrist_{s}"),
    ("hip_{s}", "knee_{s}"),
    ("knee_{s}", "ankle_{s}"),
    ("shoulder_{s}", "bladder"),
    ("hip_{s}", "bladder"),
    ("eye_{s}", "bladder"),
]


def landmark_index(name: str) -> int:
    return INDEX[name]


def mirror_index(i: int) -> int:
    """Index of the contralateral landmark (bladder maps to itself)."""
    name = LANDMARK_NAMES[i]
    if name.endswith("_L"):
        return INDEX[name[:-1] + "R"]
    if name.endswith("_R"):
        return INDEX[name[:-1] + "L"]
    return i


MIRROR_PERMUTATION = np.array([mirror_index(i) for i in range(N_LANDMARKS)])


def _pair(a: str, b: str) -> frozenset[int]:
    return frozenset((INDEX[a], INDEX[b]))


@dataclass(frozen=True)
class PoseGraph:
    nodes: tuple[str, ...]
    skeleton_edges: frozenset[frozenset[int]]
    lateral_edges: frozenset[frozenset[int]]
    limb_agents: frozenset[int]
    limb_segments: dict[int, frozenset[int]] = field(hash=False)

    def edge_list(self) -> list[tuple[int, int, str]]:
        """Ordered (i, j, kind) list with i < j, skeleton edges first."""
        out = [(*sorted(e), "skeleton") for e in self.skeleton_edges]
        out.sort()
        lat = sorted((*sorted(e), "lateral") for e in self.lateral_edges)
        return out + lat

    def adjacency(self) -> np.ndarray:
        """Binary 15x15 support with self-loops."""
        a = np.eye(len(self.nodes))
        for e in self.skeleton_edges | self.lateral_edges:
            i, j = tuple(e)
            a[i, j] = a[j, i] = 1.0
        return a


def build_fetal_graph() -> PoseGraph:
    skeleton = {
        _pair(a.format(s=s), b.format(s=s)) for a, b in _SKELETON for s in ("L", "R")
    }
    lateral = {
        frozenset((i, mirror_index(i)))
        for i in range(N_LANDMARKS)
        if mirror_index(i) != i
    }
    limb_agents = frozenset(INDEX[n] for n in LIMB_AGENT_NAMES)
    segments: dict[int, frozenset[int]] = {}
    for k in limb_agents:
        nbrs = set()
        for e in skeleton:
            if k in e:
                (m,) = tuple(e - {k})
                if m in limb_agents:
                    nbrs.add(m)
        segments[k] = frozenset(nbrs)
    return PoseGraph(
        nodes=LANDMARK_NAMES,
        skeleton_edges=frozenset(skeleton),
        lateral_edges=frozenset(lateral),
        limb_agents=limb_agents,
        limb_segments=segments,
    )


def limb_neighbors(graph: PoseGraph, k: int) -> frozenset[int]:
    if k in graph.limb_agents:
        return graph.limb_segments[k]
    return frozenset()


def normalized_adjacency(mask, adjacency):
    """Row-wise softmax of ``mask`` restricted to the support of ``adjacency``.

    Works on numpy arrays and torch tensors alike. Entries outside the support
    are exactly zero; each row sums to one. Every row must contain at least one
    allowed entry (self-loops guarantee this).
    """
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and isinstance(mask, torch.Tensor):
        support = torch.as_tensor(adjacency, dtype=torch.bool, device=mask.device)
        logits = mask.masked_fill(~support, float("-inf"))
        return torch.softmax(logits, dim=1)
    mask = np.asarray(mask, dtype=float)
    support = np.asarray(adjacency) != 0
    logits = np.where(support, mask, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.where(support, np.exp(logits), 0.0)
    return e / e.sum(axis=1, keepdims=True)
