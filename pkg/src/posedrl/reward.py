"""Per-agent immediate reward: landmark distance delta plus limb-segment distance delta."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSegment
from .pose_graph import PoseGraph, limb_neighbors


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 2.0
    use_structure_reward: bool = True
    # False keeps only the distal segment for joints with two limb neighbours
    both_segments: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


def point_segment_distance(p, pk, pm) -> float:
    """Distance from ``p`` to the segment joining ``pk`` and ``pm``.

    Endpoint regions are decided with ``a = pk - pm``: beyond ``pk`` when
    ``(p - pk) . a > 0``, beyond ``pm`` when ``(p - pm) . a < 0``; otherwise the
    perpendicular distance to the line is returned.
    """
    p = np.asarray(p, dtype=np.float64)
    pk = np.asarray(pk, dtype=np.float64)
    pm = np.asarray(pm, dtype=np.float64)
    a = pk - pm
    na = float(np.sqrt(a @ a))
    if na < 1e-9:
        raise DegenerateSegment(f"segment endpoints coincide: {pk} {pm}")
    if (p - pk) @ a > 0:
        return float(np.linalg.norm(p - pk))
    if (p - pm) @ a < 0:
        return float(np.linalg.norm(p - pm))
    return float(np.linalg.norm(np.cross(p - pm, a)) / na)


def point_segment_distance_batch(p, pk, pm) -> np.ndarray:
    """Vectorised form over leading axes; same case split as the scalar version."""
    p, pk, pm = (np.asarray(x, dtype=np.float64) for x in (p, pk, pm))
    a = pk - pm
    na = np.linalg.norm(a, axis=-1)
    if np.any(na < 1e-9):
        raise DegenerateSegment("segment endpoints coincide")
    beyond_k = np.einsum("...i,...i->...", p - pk, a) > 0
    beyond_m = np.einsum("...i,...i->...", p - pm, a) < 0
    perp = np.linalg.norm(np.cross(p - pm, a), axis=-1) / na
    return np.where(
        beyond_k,
        np.linalg.norm(p - pk, axis=-1),
        np.where(beyond_m, np.linalg.norm(p - pm, axis=-1), perp),
    )


def structure_neighbors(graph: PoseGraph, k: int, cfg: RewardConfig) -> list[int]:
    if not cfg.use_structure_reward or cfg.beta == 0:
        return []
    nbrs = sorted(limb_neighbors(graph, k))
    if not cfg.both_segments and len(nbrs) > 1:
        nbrs = [max(nbrs)]  # landmark indices increase distally along each limb
    return nbrs


def agent_reward(k: int, pos_t, pos_t1, gt, graph: PoseGraph, cfg: RewardConfig) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pos_t = np.asarray(pos_t, dtype=np.float64)
    pos_t1 = np.asarray(pos_t1, dtype=np.float64)
    r = float(np.linalg.norm(pos_t - gt[k]) - np.linalg.norm(pos_t1 - gt[k]))
    nbrs = structure_neighbors(graph, k, cfg)
    if nbrs:
        s = 0.0
        for m in nbrs:
            s += point_segment_distance(pos_t, gt[k], gt[m]) - point_segment_distance(pos_t1, gt[k], gt[m])
        r += cfg.beta * s
    return r


def all_rewards(pos_t, pos_t1, gt, graph: PoseGraph, cfg: RewardConfig) -> np.ndarray:
    return np.array([agent_reward(k, pos_t[k], pos_t1[k], gt, graph, cfg) for k in range(len(gt))])
