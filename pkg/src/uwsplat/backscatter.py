"""Dark-pixel backscatter estimation.

In shadowed regions the direct signal is near zero, so observed color is
close to pure backscatter. The estimator clusters the depth map, picks the
darkest percentile of pixels inside each cluster, reduces those samples to
per-interval minima (a lower envelope over depth), and fits the saturating
curve  v(z) = water_color * (1 - exp(-backscatter * z))  per channel with a
box-constrained Levenberg-Marquardt solver started from a fixed grid. The
whole procedure is deterministic: no RNG, stable tie-breaks everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

WATER_COLOR_BOX = (0.0, 1.0)
BACKSCATTER_BOX = (0.0, 5.0)

P_DARK_DEFAULT = 0.01
EDGES_NUM_DEFAULT = 10
INTERVALS_NUM_DEFAULT = 25
RESIZED_HEIGHT_DEFAULT = 300

_BB_STARTS = (0.1, 0.5, 1.0, 2.0, 4.0)
_LM_MAX_ITER = 200
_LM_STEP_TOL = 1e-10


@dataclass
class DarkPixelSet:
    """Depths and RGB triplets of the selected dark pixels (parallel arrays)."""

    dark_z: np.ndarray   # (K,)
    colors: np.ndarray   # (K, 3)
    degenerate: bool = False


@dataclass
class BackscatterEstimate:
    water_color_est: np.ndarray   # (3,) in [0, 1]
    backscatter_est: np.ndarray   # (3,) in [0, 5]
    residual: np.ndarray          # (3,) per-channel RMS fit error
    degenerate: bool = False


def resize_nearest(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resize with half-pixel center alignment."""
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(new_h) + 0.5) * h / new_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(new_w) + 0.5) * w / new_w, w - 1).astype(np.int64)
    return img[rows][:, cols]


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel center alignment, edge clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(new_h) + 0.5) * h / new_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * w / new_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def cluster_range(depth: np.ndarray, edges: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """Label each pixel by the interval [edges[i], edges[i+1]) containing it.

    The last edge is inclusive. Returns (labels, degenerate); a degenerate
    result (all-zero labels) is produced when the edges span no range.
    """
    depth = np.asarray(depth, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or edges[-1] <= edges[0]:
        return np.zeros(depth.shape, dtype=np.int64), True
    if np.any(np.diff(edges) <= 0):
        raise DataError("cluster edges must be strictly increasing")
    labels = np.searchsorted(edges, depth, side="right") - 1
    return np.clip(labels, 0, edges.size - 2), False


def select_dark_pixels(image: np.ndarray, depth: np.ndarray,
                       p_dark: float = P_DARK_DEFAULT,
                       edges_num: int = EDGES_NUM_DEFAULT) -> DarkPixelSet:
    """Darkest pixels (by summed RGB) of each depth cluster.

    Within each non-empty cluster the ceil(p_dark * size) smallest pixels
    are taken, ties broken by raster order. Negative input values are
    zeroed first.
    """
    image = np.maximum(np.asarray(image, dtype=np.float64), 0.0)
    depth = np.maximum(np.asarray(depth, dtype=np.float64), 0.0)
    if image.size == 0:
        raise DataError("empty image")
    if depth.shape != image.shape[:2]:
        raise DataError("image and depth are not co-registered")

    edges = np.linspace(depth.min(), depth.max(), edges_num)
    labels, degenerate = cluster_range(depth, edges)
    labels = labels.ravel()
    sums = image.reshape(-1, 3).sum(axis=1)

    picked = []
    n_clusters = 1 if degenerate else edges.size - 1
    for i in range(n_clusters):
        members = np.nonzero(labels == i)[0]
        if members.size == 0:
            continue
        k = max(1, int(np.ceil(p_dark * members.size)))
        order = np.argsort(sums[members], kind="stable")
        picked.append(members[order[:k]])
    sel = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    sel.sort()
    return DarkPixelSet(dark_z=depth.ravel()[sel], colors=image.reshape(-1, 3)[sel],
                        degenerate=degenerate)


def _sse(params: np.ndarray, z: np.ndarray, y: np.ndarray) -> float:
    r = params[0] * (1.0 - np.exp(-params[1] * z)) - y
    return float(r @ r)


def _lm_fit(z: np.ndarray, y: np.ndarray, p0: np.ndarray,
            lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, float]:
    """Levenberg-Marquardt with box projection from one start point."""
    p = np.clip(p0, lo, hi).astype(np.float64)
    sse = _sse(p, z, y)
    lam = 1e-3
    for _ in range(_LM_MAX_ITER):
        e = np.exp(-p[1] * z)
        r = p[0] * (1.0 - e) - y
        J = np.stack([1.0 - e, p[0] * z * e], axis=1)
        JtJ = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(12):
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = np.clip(p + step, lo, hi)
            cand_sse = _sse(cand, z, y)
            if cand_sse <= sse:
                moved = np.linalg.norm(cand - p)
                p, sse = cand, cand_sse
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if moved < _LM_STEP_TOL:
                    return p, sse
                break
            lam *= 3.0
        if not accepted:
            return p, sse
    return p, sse


def fit_saturating_exponential(dark_z: np.ndarray, values: np.ndarray,
                               bounds_binf: Tuple[float, float] = WATER_COLOR_BOX,
                               bounds_bb: Tuple[float, float] = BACKSCATTER_BOX
                               ) -> Tuple[float, float, float, bool]:
    """Least-squares fit of v(z) = b_inf * (1 - exp(-b_b * z)) within boxes.

    Multi-start over a fixed grid, best (lowest SSE) feasible minimum wins;
    ties resolved by start order. Returns (b_inf, b_b, rms_residual,
    degenerate). Degenerate inputs (fewer than 3 points or a single distinct
    depth) return the mean value and the upper backscatter bound, flagged.
    """
    z = np.asarray(dark_z, dtype=np.float64).ravel()
    y = np.asarray(values, dtype=np.float64).ravel()
    if z.shape != y.shape:
        raise DataError("depth/value arrays differ in length")
    lo = np.array([bounds_binf[0], bounds_bb[0]])
    hi = np.array([bounds_binf[1], bounds_bb[1]])

    if z.size < 3 or np.unique(z).size < 2:
        b_inf = float(np.clip(np.mean(y) if y.size else 0.0, *bounds_binf))
        rms = float(np.sqrt(np.mean((b_inf * (1 - np.exp(-hi[1] * z)) - y) ** 2))) if y.size else 0.0
        return b_inf, float(hi[1]), rms, True

    if np.max(np.abs(y)) == 0.0:
        return float(lo[0]), float(lo[1]), 0.0, False

    starts = []
    for b_inf0 in (float(np.mean(y)), float(np.max(y))):
        for bb0 in _BB_STARTS:
            starts.append(np.array([b_inf0, bb0]))
    best_p, best_sse = None, np.inf
    for p0 in starts:
        p, sse = _lm_fit(z, y, p0, lo, hi)
        if sse < best_sse - 1e-15:
            best_p, best_sse = p, sse
    rms = float(np.sqrt(best_sse / z.size))
    return float(best_p[0]), float(best_p[1]), rms, False


def estimate_backscatter(image: np.ndarray, depth: np.ndarray,
                         p_dark: float = P_DARK_DEFAULT,
                         intervals_num: int = INTERVALS_NUM_DEFAULT,
                         resized_height: int = RESIZED_HEIGHT_DEFAULT,
                         edges_num: int = EDGES_NUM_DEFAULT) -> BackscatterEstimate:
    """Full estimation pipeline on one (image, depth) pair.

    Inputs are downscaled to at most ``resized_height`` rows (bilinear for
    color, nearest for depth), dark pixels are selected per depth cluster,
    bucketed into ``intervals_num`` evenly spaced depth intervals, reduced
    to per-interval per-channel minima, and fitted per channel.
    """
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    target_h = min(resized_height, h)
    if target_h != h:
        target_w = max(1, round(w * target_h / h))
        image = resize_bilinear(image, target_h, target_w)
        depth = resize_nearest(depth, target_h, target_w)
    image = np.maximum(image, 0.0)
    depth = np.maximum(depth, 0.0)

    dark = select_dark_pixels(image, depth, p_dark=p_dark, edges_num=edges_num)
    if dark.dark_z.size == 0 or dark.degenerate:
        mean_color = image.reshape(-1, 3).mean(axis=0)
        return BackscatterEstimate(
            water_color_est=np.clip(mean_color, *WATER_COLOR_BOX),
            backscatter_est=np.full(3, BACKSCATTER_BOX[1]),
            residual=np.zeros(3), degenerate=True)

    intervals = np.linspace(dark.dark_z.min(), dark.dark_z.max(), intervals_num)
    labels, degenerate = cluster_range(dark.dark_z, intervals)

    water = np.zeros(3)
    bsc = np.zeros(3)
    residual = np.zeros(3)
    any_degenerate = degenerate
    for k in range(3):
        min_depths, min_vals = [], []
        if degenerate:
            j = int(np.argmin(dark.colors[:, k]))
            min_depths.append(dark.dark_z[j])
            min_vals.append(dark.colors[j, k])
        else:
            for i in range(intervals.size - 1):
                members = np.nonzero(labels == i)[0]
                if members.size == 0:
                    continue
                j = members[int(np.argmin(dark.colors[members, k]))]
                min_depths.append(dark.dark_z[j])
                min_vals.append(dark.colors[j, k])
        b_inf, b_b, rms, flag = fit_saturating_exponential(
            np.array(min_depths), np.array(min_vals))
        water[k], bsc[k], residual[k] = b_inf, b_b, rms
        any_degenerate |= flag
    return BackscatterEstimate(water_color_est=water, backscatter_est=bsc,
                               residual=residual, degenerate=any_degenerate)
