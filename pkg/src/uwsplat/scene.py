"""Scene state: Gaussian primitives, cameras, medium parameters and checkpoints.

All learnable tensors are stored as float32 arrays (the checkpoint wire
format) and promoted to float64 inside numerical kernels. Parametrization
follows the usual splatting conventions: covariance is rebuilt from
log-scales and a unit quaternion, so it stays symmetric positive-definite
under unconstrained optimization; opacity is stored as a logit.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CheckpointError

# Degree-0 spherical harmonic basis constant.
SH_C0 = 0.28209479177387814

# Box constraints applied to the medium parameters after every update.
WATER_COLOR_BOUNDS = (0.0, 1.0)
BACKSCATTER_BOUNDS = (0.0, 5.0)

_CHECKPOINT_MAGIC = b"SPLASH01"
_CHECKPOINT_VERSION = 1


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (..., 4) in (w, x, y, z) order to rotation matrices.

    Input quaternions are normalized first, so non-unit inputs are valid.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rgb_to_feature(rgb: np.ndarray) -> np.ndarray:
    """Map an RGB value in [0, 1] to the degree-0 color feature."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def feature_to_rgb(f: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_feature` (no clamping applied)."""
    return np.asarray(f, dtype=np.float64) * SH_C0 + 0.5


@dataclass
class Gaussian:
    """A single anisotropic Gaussian primitive."""

    position: np.ndarray       # (3,) world units
    log_scale: np.ndarray      # (3,) log of per-axis std dev
    rotation: np.ndarray       # (4,) unit quaternion (w, x, y, z)
    sh_coeffs: np.ndarray      # (K, 3) color features, K = 1 for constant color
    opacity_logit: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)


def covariance(g: Gaussian) -> np.ndarray:
    """World-space 3x3 covariance R * S * S^T * R^T of a single Gaussian."""
    R = quat_to_rotmat(g.rotation)
    M = R * np.exp(g.log_scale)[None, :]
    return M @ M.T


def opacity(g: Gaussian) -> float:
    """Base opacity sigmoid(logit) in (0, 1)."""
    return float(expit(g.opacity_logit))


class GaussianCloud:
    """Growable structure-of-arrays container for the scene's Gaussians.

    ``generation`` is bumped whenever densification or pruning changes the
    set of Gaussians, so cached index buffers can detect staleness.
    """

    def __init__(self, positions, log_scales, rotations, sh_coeffs, opacity_logits):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(-1, 3)
        n = self.positions.shape[0]
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=np.float32).reshape(n, -1, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float32).reshape(n)
        self.generation = 0
        self._validate()

    def _validate(self):
        if self.sh_coeffs.shape[1] != 1:
            raise ValueError("only constant (degree-0) color features are supported")
        for name in ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite values in {name}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_sh_coeffs(self) -> int:
        return self.sh_coeffs.shape[1]

    def gaussian(self, i: int) -> Gaussian:
        """Materialize Gaussian ``i`` as a standalone object."""
        return Gaussian(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            sh_coeffs=self.sh_coeffs[i],
            opacity_logit=float(self.opacity_logits[i]),
        )

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1, keepdims=True)
        self.rotations = (self.rotations / np.maximum(norms, 1e-12)).astype(np.float32)

    def base_colors(self) -> np.ndarray:
        """Per-Gaussian RGB colors (clamped at zero), float64 (N, 3)."""
        rgb = feature_to_rgb(self.sh_coeffs[:, 0, :].astype(np.float64))
        return np.maximum(rgb, 0.0)

    def copy(self) -> "GaussianCloud":
        c = GaussianCloud(
            self.positions.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.sh_coeffs.copy(), self.opacity_logits.copy(),
        )
        c.generation = self.generation
        return c


class MediumParams:
    """Learnable water parameters plus optional guidance estimates.

    ``attenuation`` scales the exponential color loss of the direct signal,
    ``water_color`` is the saturated color seen where no object exists, and
    ``backscatter`` controls how fast that color saturates with depth. All
    three are RGB triplets. ``*_guide`` hold the latest dark-pixel fit used
    as an anchor by the guidance loss; they are not learned directly.
    """

    def __init__(self, attenuation, water_color, backscatter,
                 water_color_guide=None, backscatter_guide=None):
        self.attenuation = np.asarray(attenuation, dtype=np.float32).reshape(3).copy()
        self.water_color = np.asarray(water_color, dtype=np.float32).reshape(3).copy()
        self.backscatter = np.asarray(backscatter, dtype=np.float32).reshape(3).copy()
        self.water_color_guide = None if water_color_guide is None else \
            np.asarray(water_color_guide, dtype=np.float32).reshape(3).copy()
        self.backscatter_guide = None if backscatter_guide is None else \
            np.asarray(backscatter_guide, dtype=np.float32).reshape(3).copy()

    @property
    def has_guidance(self) -> bool:
        return self.water_color_guide is not None and self.backscatter_guide is not None

    def clamp_(self):
        """Project parameters back into their boxes (idempotent)."""
        np.maximum(self.attenuation, 0.0, out=self.attenuation)
        np.clip(self.water_color, *WATER_COLOR_BOUNDS, out=self.water_color)
        np.clip(self.backscatter, *BACKSCATTER_BOUNDS, out=self.backscatter)

    def copy(self) -> "MediumParams":
        return MediumParams(self.attenuation, self.water_color, self.backscatter,
                            self.water_color_guide, self.backscatter_guide)

    @staticmethod
    def zero() -> "MediumParams":
        return MediumParams(np.zeros(3), np.zeros(3), np.zeros(3))


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus a rigid world-to-view transform.

    View space follows the usual computer-vision convention (x right,
    y down, z forward); ``x_view = R @ x_world + t``. Pixel (col, row)
    has its center at (col + 0.5, row + 0.5).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray          # (3, 3) world-to-view rotation
    t: np.ndarray          # (3,) world-to-view translation
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    @property
    def tan_fovx(self) -> float:
        return 0.5 * self.width / self.fx

    @property
    def tan_fovy(self) -> float:
        return 0.5 * self.height / self.fy

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def camera_center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), *, width, height, fx, fy,
                cx=None, cy=None, near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(np.asarray(up, dtype=np.float64), fwd)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        t = -R @ eye
        return Camera(width=width, height=height, fx=fx, fy=fy,
                      cx=width / 2 if cx is None else cx,
                      cy=height / 2 if cy is None else cy,
                      R=R, t=t, near=near, far=far)


class AdamSlot:
    """First/second moment buffers plus a shared step counter for one tensor."""

    def __init__(self, shape):
        self.m = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.step = 0


# Per-Gaussian tensors, in checkpoint order.
CLOUD_FIELDS = ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits")
MEDIUM_FIELDS = ("attenuation", "water_color", "backscatter")


class TrainState:
    """Everything the trainer mutates: scene, medium, moments, statistics."""

    def __init__(self, cloud: GaussianCloud, medium: MediumParams, iteration: int = 0):
        self.cloud = cloud
        self.medium = medium
        self.iteration = iteration
        self.adam = {name: AdamSlot(getattr(cloud, name).shape) for name in CLOUD_FIELDS}
        for name in MEDIUM_FIELDS:
            self.adam[name] = AdamSlot((3,))
        n = len(cloud)
        # Densification statistics: accumulated screen-space gradient norm and
        # number of renders each Gaussian appeared in since the last reset.
        self.grad_accum = np.zeros(n, dtype=np.float32)
        self.obs_count = np.zeros(n, dtype=np.uint32)

    def reset_densify_stats(self):
        n = len(self.cloud)
        self.grad_accum = np.zeros(n, dtype=np.float32)
        self.obs_count = np.zeros(n, dtype=np.uint32)


def _pack_array(buf: io.BytesIO, a: np.ndarray):
    buf.write(np.ascontiguousarray(a).tobytes())


def save_checkpoint(state: TrainState) -> bytes:
    """Serialize a TrainState to versioned little-endian bytes.

    Layout: magic, version, flags, counts, then contiguous float32 arrays in
    declared field order (positions, log_scales, rotations, sh_coeffs,
    opacity_logits), the medium as a 3x3 float32 block (attenuation,
    water_color, backscatter rows) plus an optional 2x3 guidance block, the
    Adam slots, and the densification statistics.
    """
    cloud, medium = state.cloud, state.medium
    buf = io.BytesIO()
    flags = 1 if medium.has_guidance else 0
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIIIQ", _CHECKPOINT_VERSION, flags, len(cloud),
                          cloud.num_sh_coeffs, state.iteration))
    for name in CLOUD_FIELDS:
        _pack_array(buf, getattr(cloud, name).astype("<f4"))
    medium_block = np.stack([medium.attenuation, medium.water_color, medium.backscatter])
    _pack_array(buf, medium_block.astype("<f4"))
    if medium.has_guidance:
        guide = np.stack([medium.water_color_guide, medium.backscatter_guide])
        _pack_array(buf, guide.astype("<f4"))
    for name in CLOUD_FIELDS + MEDIUM_FIELDS:
        slot = state.adam[name]
        buf.write(struct.pack("<Q", slot.step))
        _pack_array(buf, slot.m.astype("<f4"))
        _pack_array(buf, slot.v.astype("<f4"))
    _pack_array(buf, state.grad_accum.astype("<f4"))
    _pack_array(buf, state.obs_count.astype("<u4"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_checkpoint(data: bytes) -> TrainState:
    """Parse checkpoint bytes; raises CheckpointError on any defect.

    Parsing is all-or-nothing: no partially constructed state escapes.
    """
    r = _Reader(data)
    if r.take(len(_CHECKPOINT_MAGIC)) != _CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, flags, n, k, iteration = struct.unpack("<IIIIQ", r.take(24))
    if version != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = {
        "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
        "sh_coeffs": (n, k, 3), "opacity_logits": (n,),
    }
    arrays = {name: r.array("<f4", shapes[name]) for name in CLOUD_FIELDS}
    medium_block = r.array("<f4", (3, 3))
    guide = r.array("<f4", (2, 3)) if flags & 1 else None
    cloud = GaussianCloud(**arrays)
    medium = MediumParams(medium_block[0], medium_block[1], medium_block[2],
                          None if guide is None else guide[0],
                          None if guide is None else guide[1])
    state = TrainState(cloud, medium, iteration=int(iteration))
    for name in CLOUD_FIELDS + MEDIUM_FIELDS:
        slot = state.adam[name]
        (slot.step,) = struct.unpack("<Q", r.take(8))
        shape = shapes.get(name, (3,))
        slot.m = r.array("<f4", shape)
        slot.v = r.array("<f4", shape)
    state.grad_accum = r.array("<f4", (n,))
    state.obs_count = r.array("<u4", (n,))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes in checkpoint")
    return state
