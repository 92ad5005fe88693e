"""Labeled volumes, the LSV1 file format, augmentation and the agent MDP."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .pose_graph import LANDMARK_NAMES, MIRROR_PERMUTATION, N_LANDMARKS

# action id -> (axis, sign): +x, -x, +y, -y, +z, -z
ACTIONS = ("+x", "-x", "+y", "-y", "+z", "-z")
N_ACTIONS = len(ACTIONS)
ACTION_VECTORS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)

MAGIC = b"LSV1"
FORMAT_VERSION = 1


@dataclass
class LabeledVolume:
    voxels: np.ndarray  # float32, indexed [x, y, z]
    spacing_mm: tuple[float, float, float]
    landmarks_gt: np.ndarray  # (15, 3) continuous voxel coordinates
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.landmarks_gt = np.asarray(self.landmarks_gt, dtype=np.float64)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.voxels.ndim != 3:
            raise ValueError("voxels must be 3-D")
        if self.landmarks_gt.shape != (N_LANDMARKS, 3):
            raise ValueError(f"expected ({N_LANDMARKS}, 3) landmarks")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError("spacing must be positive")
        hi = np.array(self.dims) - 1
        if np.any(self.landmarks_gt < 0) or np.any(self.landmarks_gt > hi):
            raise ValueError("landmark outside volume")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


# ---------------------------------------------------------------- file format


def save_volume(v: LabeledVolume, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "landmarks": {n: [float(c) for c in p] for n, p in zip(LANDMARK_NAMES, v.landmarks_gt)},
        "meta": {str(k): str(val) for k, val in v.meta.items()},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = v.voxels.astype("<f4").tobytes(order="F")  # x fastest
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(payload)


def load_volume(path) -> LabeledVolume:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {header.get('version')}")
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        lm = np.array([header["landmarks"][name] for name in LANDMARK_NAMES], dtype=np.float64)
        meta = dict(header.get("meta", {}))
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: bad dims {dims}")
    payload = raw[8 + n :]
    if len(payload) != 4 * math.prod(dims):
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header dims {dims} need {4 * math.prod(dims)}"
        )
    vox = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    try:
        return LabeledVolume(vox, spacing, lm, meta)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    scale_range: tuple[float, float] = (0.8, 1.5)


@dataclass(frozen=True)
class AugmentDraw:
    flips: tuple[bool, bool, bool] = (False, False, False)
    rot_axis: int = 0
    rot_quarters: int = 0
    scale: float = 1.0


def sample_augmentation(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentDraw:
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    axis = int(rng.integers(3))
    quarters = int(rng.integers(4))
    scale = float(rng.uniform(*cfg.scale_range))
    return AugmentDraw(
        flips=flips if cfg.flip else (False, False, False),
        rot_axis=axis,
        rot_quarters=quarters if cfg.rotate else 0,
        scale=scale if cfg.scale else 1.0,
    )


def _max_scale(points: np.ndarray, dims) -> float:
    c = (np.asarray(dims) - 1) / 2.0
    d = np.abs(points - c)
    with np.errstate(divide="ignore"):
        lim = np.where(d > 0, c / d, np.inf)
    return float(lim.min())


def apply_augmentation(v: LabeledVolume, draw: AugmentDraw) -> LabeledVolume:
    """Apply flips, then a quarter-turn rotation, then isotropic scaling about the centre.

    If the drawn scale would push a landmark out of the volume it is reduced to
    the largest scale that keeps every landmark inside.
    """
    vox = v.voxels
    pts = v.landmarks_gt.copy()
    spacing = list(v.spacing_mm)
    det = 1
    for axis, f in enumerate(draw.flips):
        if f:
            vox = np.flip(vox, axis)
            pts[:, axis] = vox.shape[axis] - 1 - pts[:, axis]
            det = -det
    a = draw.rot_axis
    plane = [ax for ax in range(3) if ax != a]
    for _ in range(draw.rot_quarters % 4):
        p, q = plane
        dq = vox.shape[q]
        vox = np.rot90(vox, 1, axes=(p, q))
        new = pts.copy()
        new[:, p] = dq - 1 - pts[:, q]
        new[:, q] = pts[:, p]
        pts = new
        spacing[p], spacing[q] = spacing[q], spacing[p]
    vox = np.ascontiguousarray(vox)
    scale = min(draw.scale, _max_scale(pts, vox.shape))
    if scale != 1.0:
        c = (np.array(vox.shape) - 1) / 2.0
        vox = ndimage.affine_transform(
            vox, np.diag(np.full(3, 1.0 / scale)), offset=c - c / scale,
            order=1, mode="constant", cval=0.0,
        ).astype(np.float32)
        pts = c + scale * (pts - c)
        pts = np.clip(pts, 0, np.array(vox.shape) - 1)
    if det < 0:
        pts = pts[MIRROR_PERMUTATION]
    meta = dict(v.meta)
    meta["augment"] = f"flips={draw.flips} rot={draw.rot_axis}x{draw.rot_quarters} scale={scale:.6g}"
    return LabeledVolume(vox, tuple(spacing), pts, meta)


def augment(v: LabeledVolume, seed: int, cfg: AugmentConfig = AugmentConfig()) -> LabeledVolume:
    return apply_augmentation(v, sample_augmentation(np.random.default_rng(seed), cfg))


# ------------------------------------------------------------------------ MDP


def extract_patch(voxels: np.ndarray, center, size: int = 48) -> np.ndarray:
    """Axis-aligned ``size``^3 crop starting at ``center - size // 2``; zero outside."""
    out = np.zeros((size, size, size), dtype=np.float32)
    src, dst = [], []
    for c, d in zip(center, voxels.shape):
        lo = int(c) - size // 2
        a, b = max(lo, 0), min(lo + size, d)
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def extract_patches(voxels: np.ndarray, centers, size: int = 48) -> np.ndarray:
    return np.stack([extract_patch(voxels, c, size) for c in centers])


def env_step(positions, actions, dims, step_voxels: int = 1) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64)
    moved = pos + ACTION_VECTORS[np.asarray(actions)] * step_voxels
    return np.clip(moved, 0, np.asarray(dims, dtype=np.int64) - 1)


def init_box(dims, fraction: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive lower/upper corners of the central box with side ceil(fraction*D)."""
    d = np.asarray(dims, dtype=np.int64)
    side = np.array([math.ceil(round(fraction * int(x), 9)) for x in d])
    lo = d // 2 - side // 2
    return lo, lo + side - 1


def initial_positions(dims, seed, fraction: float = 0.15) -> np.ndarray:
    """Uniform independent draws over the central box; ``seed`` may be a Generator."""
    rng = np.random.default_rng(seed)
    lo, hi = init_box(dims, fraction)
    return rng.integers(lo, hi + 1, size=(N_LANDMARKS, 3))
