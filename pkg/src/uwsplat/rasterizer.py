"""Tile-binned, depth-sorted forward rendering.

Per pixel, contributors are blended front to back: color accumulates
c_i * alpha_i * T_i with transmittance T_1 = 1, T_{i+1} = T_i (1 - alpha_i),
and a weighted depth (sum d_i alpha_i T_i) / (sum alpha_i T_i) is extracted
in the same pass. In underwater mode the clean color is attenuated by
exp(-attenuation * z) and a saturating water-color term is added, with z the
logistically remapped per-pixel depth of this very pass.

The tiled path and the all-Gaussians-per-pixel reference path share one
compositing kernel, so they agree to floating-point reordering error.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .medium import logistic_remap
from .projection import (ALPHA_FLOOR, TILE_SIZE, ProjectedCloud, _spans_for,
                         project_cloud)
from .scene import Camera, GaussianCloud, MediumParams

ALPHA_CLAMP = 0.99
T_EARLY_STOP = 1e-4
WEIGHT_EPS = 1e-8


class TileBins:
    """CSR-style lists of projected-Gaussian rows per tile.

    Within each tile, entries are sorted by depth ascending with ties broken
    by source index, so traversal order is deterministic.
    """

    def __init__(self, grid_x: int, grid_y: int, offsets: np.ndarray, entries: np.ndarray):
        self.grid_x = grid_x
        self.grid_y = grid_y
        self.offsets = offsets      # (grid_x * grid_y + 1,)
        self.entries = entries      # (E,) row indices into the ProjectedCloud

    def tile_entries(self, tx: int, ty: int) -> np.ndarray:
        tid = ty * self.grid_x + tx
        return self.entries[self.offsets[tid]:self.offsets[tid + 1]]


def bin_and_sort(proj: ProjectedCloud, width: int, height: int,
                 tile_size: int = TILE_SIZE) -> TileBins:
    """Assign footprints to tiles and depth-sort each tile's list."""
    grid_x = (width + tile_size - 1) // tile_size
    grid_y = (height + tile_size - 1) // tile_size
    n_tiles = grid_x * grid_y
    if len(proj) == 0:
        return TileBins(grid_x, grid_y, np.zeros(n_tiles + 1, dtype=np.int64),
                        np.empty(0, dtype=np.int64))

    span = _spans_for(proj.mean2d, proj.radius, tile_size, (grid_x, grid_y))
    nx = span[:, 2] - span[:, 0] + 1
    ny = span[:, 3] - span[:, 1] + 1
    counts = np.maximum(nx, 0) * np.maximum(ny, 0)
    rows = np.repeat(np.arange(len(proj)), counts)
    if rows.size == 0:
        return TileBins(grid_x, grid_y, np.zeros(n_tiles + 1, dtype=np.int64),
                        np.empty(0, dtype=np.int64))

    # Enumerate each Gaussian's tile rectangle in row-major order.
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(rows.size) - np.repeat(starts, counts)
    w = np.repeat(nx, counts)
    dx = local % w
    dy = local // w
    tx = np.repeat(span[:, 0], counts) + dx
    ty = np.repeat(span[:, 1], counts) + dy
    tile_id = ty * grid_x + tx

    order = np.lexsort((proj.source_index[rows], proj.depth[rows], tile_id))
    rows = rows[order]
    tile_id = tile_id[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tile_id + 1, 1)
    np.cumsum(offsets, out=offsets)
    return TileBins(grid_x, grid_y, offsets, rows.astype(np.int64))


def alpha_at(p, opacity_logit: float, pixel_center) -> float:
    """Opacity contribution of one projected Gaussian at a pixel center.

    sigmoid(logit) * exp(-0.5 d^T cov2d^{-1} d), clamped to <= 0.99; values
    below 1/255 are reported as exactly zero.
    """
    from scipy.special import expit

    d = np.asarray(pixel_center, dtype=np.float64) - p.mean2d
    inv = np.linalg.inv(p.cov2d)
    power = -0.5 * d @ inv @ d
    a = float(expit(opacity_logit) * np.exp(power))
    a = min(a, ALPHA_CLAMP)
    return a if a >= ALPHA_FLOOR else 0.0


def composite_pixel(contributors, pixel, far: float):
    """Reference front-to-back blend of one pixel.

    ``contributors`` is a depth-sorted list of (Projected2D, opacity_logit,
    rgb) triples. Returns (color, depth, weight, final_transmittance, count).
    Traversal stops once transmittance drops below 1e-4.
    """
    color = np.zeros(3)
    weight = 0.0
    depth_num = 0.0
    T = 1.0
    count = 0
    for p, logit, rgb in contributors:
        if T < T_EARLY_STOP:
            break
        a = alpha_at(p, logit, pixel)
        if a <= 0.0:
            continue
        w = a * T
        color += w * np.asarray(rgb, dtype=np.float64)
        depth_num += w * p.depth
        weight += w
        T *= 1.0 - a
        count += 1
    z = depth_num / weight if weight > WEIGHT_EPS else far
    return color, z, weight, T, count


@dataclass
class RenderOutput:
    """Forward buffers; projection and bins are retained for the backward pass."""

    color: np.ndarray                 # (H, W, 3) composited color (clean or underwater)
    depth: np.ndarray                 # (H, W) raw view-space depth, far where empty
    weight: np.ndarray                # (H, W) sum of alpha_i T_i
    final_transmittance: np.ndarray   # (H, W)
    count: np.ndarray                 # (H, W) int32 contributors blended
    mode: str                         # "clean" | "underwater"
    color_clean: Optional[np.ndarray] = None   # underwater mode only
    proj: Optional[ProjectedCloud] = None
    bins: Optional[TileBins] = None
    camera: Optional[Camera] = None


def _composite_block(px, py, mean2d, conic, colors, opac, depths, far):
    """Blend a block of pixels against one depth-sorted contributor list.

    px, py: (P,) pixel centers. Contributor arrays are length M. Returns
    (color (P,3), z (P,), weight (P,), T_final (P,), count (P,)).
    """
    P = px.shape[0]
    M = mean2d.shape[0]
    if M == 0:
        return (np.zeros((P, 3)), np.full(P, far), np.zeros(P), np.ones(P),
                np.zeros(P, dtype=np.int32))
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    power = (-0.5 * (conic[None, :, 0] * dx * dx + conic[None, :, 2] * dy * dy)
             - conic[None, :, 1] * dx * dy)
    alpha = opac[None, :] * np.exp(power)
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    alpha[alpha < ALPHA_FLOOR] = 0.0
    one_minus = 1.0 - alpha
    T = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((P, 1)), T[:, :-1]], axis=1)
    live = T >= T_EARLY_STOP
    w = alpha * T
    w *= live
    color = w @ colors
    weight = w.sum(axis=1)
    depth_num = w @ depths
    t_final = np.prod(np.where(live, one_minus, 1.0), axis=1)
    count = ((alpha > 0.0) & live).sum(axis=1).astype(np.int32)
    z = np.where(weight > WEIGHT_EPS, depth_num / np.maximum(weight, 1e-300), far)
    return color, z, weight, t_final, count


def _pixel_centers(x0, x1, y0, y1):
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gx.ravel(), gy.ravel()


def render(cloud: GaussianCloud, cam: Camera, medium: Optional[MediumParams] = None,
           mode: str = "clean", workers: int = 1, retain: bool = True) -> RenderOutput:
    """Render a full frame, tile-parallel with deterministic output.

    Tiles write disjoint pixel regions, so results are bit-identical for any
    worker count. ``mode="underwater"`` additionally requires ``medium``.
    """
    if mode not in ("clean", "underwater"):
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "underwater" and medium is None:
        raise ValueError("underwater mode requires medium parameters")

    H, W = cam.height, cam.width
    proj = project_cloud(cloud, cam)
    bins = bin_and_sort(proj, W, H)
    color = np.zeros((H, W, 3))
    depth = np.full((H, W), float(cam.far))
    weight = np.zeros((H, W))
    t_final = np.ones((H, W))
    count = np.zeros((H, W), dtype=np.int32)

    def run_tile(tid):
        ty, tx = divmod(tid, bins.grid_x)
        x0, x1 = tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, W)
        y0, y1 = ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, H)
        rows = bins.tile_entries(tx, ty)
        px, py = _pixel_centers(x0, x1, y0, y1)
        c, z, wgt, tf, cnt = _composite_block(
            px, py, proj.mean2d[rows], proj.conic[rows], proj.color[rows],
            proj.opacity[rows], proj.depth[rows], float(cam.far))
        sh = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = c.reshape(sh + (3,))
        depth[y0:y1, x0:x1] = z.reshape(sh)
        weight[y0:y1, x0:x1] = wgt.reshape(sh)
        t_final[y0:y1, x0:x1] = tf.reshape(sh)
        count[y0:y1, x0:x1] = cnt.reshape(sh)

    tile_ids = range(bins.grid_x * bins.grid_y)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, tile_ids))
    else:
        for tid in tile_ids:
            run_tile(tid)

    out = RenderOutput(color=color, depth=depth, weight=weight,
                       final_transmittance=t_final, count=count, mode=mode,
                       proj=proj if retain else None,
                       bins=bins if retain else None,
                       camera=cam)
    if mode == "underwater":
        out.color_clean = color
        out.color = apply_water(color, depth, medium)
    return out


def apply_water(color_clean: np.ndarray, depth_raw: np.ndarray,
                medium: MediumParams) -> np.ndarray:
    """Attenuate a clean render and add backscatter using remapped depth."""
    z = logistic_remap(depth_raw)[..., None]
    att = np.exp(-medium.attenuation.astype(np.float64)[None, None, :] * z)
    bsc = medium.water_color.astype(np.float64)[None, None, :] * (
        1.0 - np.exp(-medium.backscatter.astype(np.float64)[None, None, :] * z))
    return color_clean * att + bsc


def render_naive(cloud: GaussianCloud, cam: Camera,
                 medium: Optional[MediumParams] = None, mode: str = "clean",
                 row_chunk: int = 16) -> RenderOutput:
    """Reference renderer: every projected Gaussian against every pixel.

    No tiling; the global depth-sorted list is blended at each pixel with the
    same floor/clamp/early-stop rules as the tiled path.
    """
    if mode == "underwater" and medium is None:
        raise ValueError("underwater mode requires medium parameters")
    H, W = cam.height, cam.width
    proj = project_cloud(cloud, cam)
    order = np.lexsort((proj.source_index, proj.depth))
    mean2d = proj.mean2d[order]
    conic = proj.conic[order]
    colors = proj.color[order]
    opac = proj.opacity[order]
    depths = proj.depth[order]

    color = np.zeros((H, W, 3))
    depth = np.full((H, W), float(cam.far))
    weight = np.zeros((H, W))
    t_final = np.ones((H, W))
    count = np.zeros((H, W), dtype=np.int32)
    for y0 in range(0, H, row_chunk):
        y1 = min(y0 + row_chunk, H)
        px, py = _pixel_centers(0, W, y0, y1)
        c, z, wgt, tf, cnt = _composite_block(px, py, mean2d, conic, colors,
                                              opac, depths, float(cam.far))
        sh = (y1 - y0, W)
        color[y0:y1] = c.reshape(sh + (3,))
        depth[y0:y1] = z.reshape(sh)
        weight[y0:y1] = wgt.reshape(sh)
        t_final[y0:y1] = tf.reshape(sh)
        count[y0:y1] = cnt.reshape(sh)

    out = RenderOutput(color=color, depth=depth, weight=weight,
                       final_transmittance=t_final, count=count, mode=mode,
                       camera=cam)
    if mode == "underwater":
        out.color_clean = color
        out.color = apply_water(color, depth, medium)
    return out
