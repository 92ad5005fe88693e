"""Procedural articulated phantoms standing in for labeled fetal volumes.

A phantom is a stick figure in the fetal position: an ellipsoidal torso with a
bright bladder marker, an ellipsoidal head carrying two bright eye markers, and
capsules along each arm and leg segment. Compositing is by maximum so that the
limb capsules are never hidden by the torso.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import SpecInfeasible
from .pose_graph import INDEX, N_LANDMARKS
from .rng import substream_seed
from .volume import LabeledVolume

MAX_ATTEMPTS = 100

# Template joints for a figure of nominal size 1 in a 48^3 grid; +z head, +y front,
# the figure's left is -x.
_TEMPLATE = {
    "bladder": (0.0, 0.5, -3.0),
    "hip_L": (-4.0, 0.0, -5.5),
    "hip_R": (4.0, 0.0, -5.5),
    "shoulder_L": (-5.5, 0.0, 7.0),
    "shoulder_R": (5.5, 0.0, 7.0),
}
_NECK = (0.0, 0.0, 10.0)
_HEAD_OFFSET = (0.0, 1.0, 3.5)  # head centre relative to neck
_EYE_OFFSETS = {"eye_L": (-1.8, 3.2, 0.6), "eye_R": (1.8, 3.2, 0.6)}  # relative to head centre
# (parent, child, direction, length) with left-side directions; right mirrors x.
_BONES = [
    ("shoulder", "elbow", (-0.25, 0.35, -0.9), 6.5),
    ("elbow", "wrist", (0.3, 0.95, 0.1), 5.5),
    ("hip", "knee", (-0.1, 0.95, 0.25), 7.0),
    ("knee", "ankle", (0.05, -0.15, -0.99), 6.5),
]
TORSO_CENTER = (0.0, 0.0, 1.0)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    figure_scale: float | None = None  # None: min(dims) / 48
    torso_radii: tuple[float, float, float] = (6.0, 4.0, 8.5)
    head_radius: float = 4.0
    eye_radius: float = 1.2
    bladder_radius: float = 1.6
    limb_radius: float = 1.5
    background: float = 0.0
    torso_level: float = 0.35
    head_level: float = 0.45
    limb_level: float = 0.75
    marker_level: float = 1.0
    noise_std: float = 0.05
    joint_angle_deg: float = 20.0
    bone_length_jitter: float = 0.1
    head_tilt_deg: float = 15.0
    rotation_deg: float = 15.0
    translation_vox: float = 3.0

    def scale(self) -> float:
        if self.figure_scale is not None:
            return float(self.figure_scale)
        return min(self.dims) / 48.0


@dataclass
class Pose:
    """Posed figure geometry in voxel coordinates."""

    joints: np.ndarray  # (15, 3)
    torso_center: np.ndarray
    torso_axes: np.ndarray  # (3, 3) rows are the ellipsoid's principal directions
    head_center: np.ndarray
    segments: list[tuple[int, int]]


def _random_rotation(rng: np.random.Generator, max_deg: float) -> Rotation:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    return Rotation.from_rotvec(axis * angle)


def sample_pose(spec: PhantomSpec, rng: np.random.Generator) -> Pose:
    s = spec.scale()
    local = {}
    for name, p in _TEMPLATE.items():
        local[name] = np.array(p) * s
    neck = np.array(_NECK) * s
    tilt = _random_rotation(rng, spec.head_tilt_deg)
    head = neck + tilt.apply(np.array(_HEAD_OFFSET) * s)
    for eye, off in _EYE_OFFSETS.items():
        local[eye] = head + tilt.apply(np.array(off) * s)
    segments = []
    for side, sx in (("L", 1.0), ("R", -1.0)):
        for parent, child, direction, length in _BONES:
            d = np.array(direction) * (sx, 1.0, 1.0)
            d = _random_rotation(rng, spec.joint_angle_deg).apply(d / np.linalg.norm(d))
            ln = length * s * (1.0 + rng.uniform(-spec.bone_length_jitter, spec.bone_length_jitter))
            p = local[f"{parent}_{side}"]
            local[f"{child}_{side}"] = p + ln * d
            segments.append((INDEX[f"{parent}_{side}"], INDEX[f"{child}_{side}"]))

    glob = _random_rotation(rng, spec.rotation_deg)
    center = (np.array(spec.dims) - 1) / 2.0
    shift = center + rng.uniform(-spec.translation_vox, spec.translation_vox, size=3)
    joints = np.zeros((N_LANDMARKS, 3))
    for name, p in local.items():
        joints[INDEX[name]] = glob.apply(p) + shift
    return Pose(
        joints=joints,
        torso_center=glob.apply(np.array(TORSO_CENTER) * s) + shift,
        torso_axes=glob.as_matrix().T,
        head_center=glob.apply(head) + shift,
        segments=segments,
    )


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def phantom_intensity(points: np.ndarray, pose: Pose, spec: PhantomSpec) -> np.ndarray:
    """Noise-free intensity at arbitrary continuous voxel coordinates ``points`` (N, 3)."""
    s = spec.scale()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(pts), spec.background, dtype=np.float64)
    rel = (pts - pose.torso_center) @ pose.torso_axes.T
    radii = np.array(spec.torso_radii) * s
    inside = np.sum((rel / radii) ** 2, axis=1) <= 1.0
    out[inside] = np.maximum(out[inside], spec.torso_level)
    inside = np.linalg.norm(pts - pose.head_center, axis=1) <= spec.head_radius * s
    out[inside] = np.maximum(out[inside], spec.head_level)
    for i, j in pose.segments:
        inside = _segment_distance(pts, pose.joints[i], pose.joints[j]) <= spec.limb_radius * s
        out[inside] = np.maximum(out[inside], spec.limb_level)
    for name, r in (("eye_L", spec.eye_radius), ("eye_R", spec.eye_radius), ("bladder", spec.bladder_radius)):
        inside = np.linalg.norm(pts - pose.joints[INDEX[name]], axis=1) <= r * s
        out[inside] = np.maximum(out[inside], spec.marker_level)
    return out


def _fits(pose: Pose, spec: PhantomSpec) -> bool:
    s = spec.scale()
    hi = np.array(spec.dims) - 1
    m = spec.limb_radius * s + 1.0
    if np.any(pose.joints < m) or np.any(pose.joints > hi - m):
        return False
    h = spec.head_radius * s
    return bool(np.all(pose.head_center >= h) and np.all(pose.head_center <= hi - h))


def render(pose: Pose, spec: PhantomSpec) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), axis=-1)
    return phantom_intensity(grid.reshape(-1, 3), pose, spec).reshape(spec.dims)


def generate_phantom_with_pose(spec: PhantomSpec, seed: int) -> tuple[LabeledVolume, Pose]:
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        pose = sample_pose(spec, rng)
        if _fits(pose, spec):
            break
    else:
        raise SpecInfeasible(f"posed skeleton left a {spec.dims} volume in {MAX_ATTEMPTS} attempts")
    vox = render(pose, spec)
    if spec.noise_std > 0:
        vox = vox + rng.normal(0.0, spec.noise_std, size=vox.shape)
    meta = {"generator": "phantom", "seed": str(seed)}
    return LabeledVolume(vox.astype(np.float32), spec.spacing_mm, pose.joints, meta), pose


def generate_phantom(spec: PhantomSpec, seed: int) -> LabeledVolume:
    return generate_phantom_with_pose(spec, seed)[0]


def phantom_set(spec: PhantomSpec, count: int, seed: int) -> list[tuple[int, LabeledVolume]]:
    """``count`` phantoms, volume i drawn from the named substream ``data-i`` of ``seed``."""
    out = []
    for i in range(count):
        vseed = substream_seed(seed, f"data-{i}")
        out.append((vseed, generate_phantom(spec, vseed)))
    return out
