"""Screen-space projection of 3D Gaussians with conservative culling.

The 3D covariance is pushed through the local affine approximation of the
perspective map (Jacobian J at the view-space mean), giving a 2x2 screen
covariance; a 0.3-pixel isotropic dilation acts as a low-pass filter. The
per-Gaussian footprint radius is chosen so that every pixel whose opacity
contribution could reach the 1/255 floor lies inside it, which makes tile
culling exact with respect to the compositing rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .scene import Camera, Gaussian, GaussianCloud, quat_to_rotmat

TILE_SIZE = 16
COV2D_DILATION = 0.3
ALPHA_FLOOR = 1.0 / 255.0
# Footprint must cover at least 3 sigma; high-opacity Gaussians extend it to
# the radius where alpha falls below the 1/255 floor (~3.33 sigma at peak 1).
MIN_RADIUS_SIGMA = 3.0


@dataclass
class Projected2D:
    """One Gaussian's screen-space footprint."""

    mean2d: np.ndarray     # (2,) pixel coordinates
    cov2d: np.ndarray      # (2, 2) symmetric, pixel^2, dilation included
    depth: float           # view-space z of the mean
    radius: float          # conservative footprint radius in pixels
    source_index: int      # index into the originating cloud


class ProjectedCloud:
    """Structure-of-arrays result of projecting a cloud through a camera.

    Only non-culled Gaussians are stored; ``source_index`` maps rows back to
    the cloud. The view-space positions, per-Gaussian rotation/scale factors
    and frustum-clamp masks are retained so the backward pass can chain
    screen-space gradients to the world-space parameters without re-deriving
    the forward state.
    """

    def __init__(self, n_source: int):
        self.n_source = n_source
        self.source_index = np.empty(0, dtype=np.int64)
        self.mean2d = np.empty((0, 2))
        self.cov2d = np.empty((0, 3))      # packed (a, b, c) of [[a, b], [b, c]]
        self.conic = np.empty((0, 3))      # packed inverse covariance
        self.depth = np.empty(0)
        self.radius = np.empty(0)
        self.opacity = np.empty(0)         # sigmoid of stored logits
        self.color = np.empty((0, 3))      # evaluated RGB, clamped at 0
        self.color_clamped = np.empty((0, 3), dtype=bool)
        # Backward context
        self.t_view = np.empty((0, 3))
        self.tx_clamped = np.empty(0)
        self.ty_clamped = np.empty(0)
        self.x_clamp_mask = np.empty(0, dtype=bool)
        self.x_clamp_sign = np.empty(0)
        self.y_clamp_mask = np.empty(0, dtype=bool)
        self.y_clamp_sign = np.empty(0)
        self.rotmat = np.empty((0, 3, 3))
        self.scale = np.empty((0, 3))
        self.cov3d = np.empty((0, 3, 3))
        self.quat_unit = np.empty((0, 4))
        self.quat_norm = np.empty(0)

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def item(self, i: int) -> Projected2D:
        a, b, c = self.cov2d[i]
        return Projected2D(
            mean2d=self.mean2d[i].copy(),
            cov2d=np.array([[a, b], [b, c]]),
            depth=float(self.depth[i]),
            radius=float(self.radius[i]),
            source_index=int(self.source_index[i]),
        )


def footprint_radius(cov2d_packed: np.ndarray, peak_opacity: np.ndarray) -> np.ndarray:
    """Conservative pixel radius outside which alpha < 1/255 is guaranteed."""
    a, b, c = cov2d_packed[..., 0], cov2d_packed[..., 1], cov2d_packed[..., 2]
    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    # alpha = s * exp(-d^2 / (2 lam)) >= 1/255  =>  d <= sqrt(2 ln(255 s) lam)
    reach = 2.0 * np.log(np.maximum(255.0 * peak_opacity, 1.0))
    return np.sqrt(np.maximum(reach, MIN_RADIUS_SIGMA ** 2) * lam_max)


def project_cloud(cloud: GaussianCloud, cam: Camera) -> ProjectedCloud:
    """Project every Gaussian, dropping those that cannot touch the image.

    Culling is conservative: a Gaussian is removed only if its depth lies
    outside (near, far), its peak opacity is below the 1/255 floor, or its
    footprint cannot reach any pixel center.
    """
    proj = ProjectedCloud(len(cloud))
    if len(cloud) == 0:
        return proj

    pos = cloud.positions.astype(np.float64)
    t = pos @ cam.R.T + cam.t
    depth = t[:, 2]
    keep = (depth > cam.near) & (depth < cam.far)

    s_op = expit(cloud.opacity_logits.astype(np.float64))
    keep &= s_op >= ALPHA_FLOOR
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return proj

    t = t[idx]
    tz = t[:, 2]
    # Frustum clamp on the point used for the Jacobian, as in EWA splatting:
    # keeps the affine approximation sane for Gaussians far off-axis.
    limx = 1.3 * cam.tan_fovx
    limy = 1.3 * cam.tan_fovy
    txtz = t[:, 0] / tz
    tytz = t[:, 1] / tz
    txc = np.clip(txtz, -limx, limx)
    tyc = np.clip(tytz, -limy, limy)
    x_clamp = txtz != txc
    y_clamp = tytz != tyc
    tx_used = txc * tz
    ty_used = tyc * tz

    quat = cloud.rotations[idx].astype(np.float64)
    qnorm = np.linalg.norm(quat, axis=1)
    qunit = quat / qnorm[:, None]
    R = quat_to_rotmat(qunit)
    s = np.exp(cloud.log_scales[idx].astype(np.float64))
    M = R * s[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))

    # J rows deformed by perspective; T = J @ R_view maps world deltas to pixels.
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * tx_used * inv_z2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * ty_used * inv_z2
    T = J @ cam.R
    cov2d_full = T @ cov3d @ np.transpose(T, (0, 2, 1))
    a = cov2d_full[:, 0, 0] + COV2D_DILATION
    b = 0.5 * (cov2d_full[:, 0, 1] + cov2d_full[:, 1, 0])
    c = cov2d_full[:, 1, 1] + COV2D_DILATION
    cov2d = np.stack([a, b, c], axis=1)

    mean2d = np.stack([cam.fx * txtz + cam.cx, cam.fy * tytz + cam.cy], axis=1)
    radius = footprint_radius(cov2d, s_op[idx])

    # Drop Gaussians whose footprint misses every pixel center (+1 px slack).
    on_image = (
        (mean2d[:, 0] + radius >= -0.5)
        & (mean2d[:, 0] - radius <= cam.width + 0.5)
        & (mean2d[:, 1] + radius >= -0.5)
        & (mean2d[:, 1] - radius <= cam.height + 0.5)
    )
    sub = np.nonzero(on_image)[0]
    if sub.size == 0:
        return proj

    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    proj.source_index = idx[sub]
    proj.mean2d = mean2d[sub]
    proj.cov2d = cov2d[sub]
    proj.conic = conic[sub]
    proj.depth = tz[sub]
    proj.radius = radius[sub]
    proj.opacity = s_op[idx][sub]
    colors = cloud.base_colors()[idx[sub]]
    proj.color = colors
    proj.color_clamped = colors <= 0.0
    proj.t_view = t[sub]
    proj.tx_clamped = tx_used[sub]
    proj.ty_clamped = ty_used[sub]
    proj.x_clamp_mask = x_clamp[sub]
    proj.x_clamp_sign = np.sign(txtz[sub])
    proj.y_clamp_mask = y_clamp[sub]
    proj.y_clamp_sign = np.sign(tytz[sub])
    proj.rotmat = R[sub]
    proj.scale = s[sub]
    proj.cov3d = cov3d[sub]
    proj.quat_unit = qunit[sub]
    proj.quat_norm = qnorm[sub]
    return proj


def project_gaussian(g: Gaussian, cam: Camera) -> Optional[Projected2D]:
    """Project a single Gaussian; returns None when culled."""
    cloud = GaussianCloud(
        g.position[None, :], g.log_scale[None, :], g.rotation[None, :],
        g.sh_coeffs[None, :, :], np.array([g.opacity_logit]),
    )
    proj = project_cloud(cloud, cam)
    if len(proj) == 0:
        return None
    return proj.item(0)


def tile_span(p: Projected2D, tile_size: int = TILE_SIZE,
              grid: Optional[tuple] = None) -> Optional[tuple]:
    """Inclusive tile rectangle (tx0, ty0, tx1, ty1) covered by a footprint.

    Covers exactly the tiles containing a pixel center within ``radius``
    (per axis) of the mean. Returns None when no pixel center is reached.
    ``grid`` optionally clips to (tiles_x, tiles_y).
    """
    span = _spans_for(p.mean2d[None, :], np.array([p.radius]), tile_size, grid)
    x0, y0, x1, y1 = (int(span[0, k]) for k in range(4))
    if x1 < x0 or y1 < y0:
        return None
    return x0, y0, x1, y1


def _spans_for(mean2d: np.ndarray, radius: np.ndarray, tile_size: int,
               grid: Optional[tuple]) -> np.ndarray:
    """Vectorized tile spans; columns (tx0, ty0, tx1, ty1), inclusive."""
    eps = 1e-9
    ix0 = np.ceil(mean2d[:, 0] - radius - 0.5 - eps)
    ix1 = np.floor(mean2d[:, 0] + radius - 0.5 + eps)
    iy0 = np.ceil(mean2d[:, 1] - radius - 0.5 - eps)
    iy1 = np.floor(mean2d[:, 1] + radius - 0.5 + eps)
    span = np.stack([
        np.floor_divide(ix0, tile_size), np.floor_divide(iy0, tile_size),
        np.floor_divide(ix1, tile_size), np.floor_divide(iy1, tile_size),
    ], axis=1).astype(np.int64)
    if grid is not None:
        tx, ty = grid
        span[:, 0] = np.clip(span[:, 0], 0, tx - 1)
        span[:, 1] = np.clip(span[:, 1], 0, ty - 1)
        span[:, 2] = np.clip(span[:, 2], -1, tx - 1)
        span[:, 3] = np.clip(span[:, 3], -1, ty - 1)
        span[:, 2] = np.maximum(span[:, 2], span[:, 0] - 1)
        span[:, 3] = np.maximum(span[:, 3], span[:, 1] - 1)
    return span
