"""Training loop, evaluation, and novel-view rendering.

Each iteration renders one training view in underwater mode, evaluates the
combined loss, accumulates analytic gradients, and applies an Adam step.
On a fixed period the water-parameter guidance is refreshed by running the
dark-pixel estimator on the current render's depth map against that view's
ground-truth image; the guidance term then anchors the learned water
parameters between refreshes. Densification follows the usual clone/split
schedule. Runs are deterministic for a fixed seed and any worker count.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .backscatter import estimate_backscatter
from .backward import backward_render
from .dataset import LoadedDataset, _atomic_write, write_pfm, write_png
from .errors import DataError
from .losses import psnr, ssim_value, total_loss
from .medium import logistic_remap
from .optim import (OptimConfig, apply_gradients, densify_and_prune,
                    position_lr, reset_opacities)
from .rasterizer import render
from .scene import (Camera, GaussianCloud, MediumParams, TrainState,
                    rgb_to_feature, save_checkpoint)

log = logging.getLogger(__name__)

TEST_EVERY = 8

LOG_COLUMNS = [
    "iter", "l1", "d_ssim", "l_bs", "total", "num_gaussians",
    "attenuation_r", "attenuation_g", "attenuation_b",
    "water_color_r", "water_color_g", "water_color_b",
    "backscatter_r", "backscatter_g", "backscatter_b",
    "lr_position",
]

INIT_MEDIUM_ATTENUATION = 0.05
INIT_MEDIUM_WATER = 0.3
INIT_MEDIUM_BACKSCATTER = 0.05
INIT_OPACITY = 0.1


def split_dataset(num_images: int) -> Tuple[List[int], List[int]]:
    """Hold out every 8th image: indices i % 8 == 0 form the test set."""
    if num_images < 2:
        raise DataError("need at least two images to split")
    test = [i for i in range(num_images) if i % TEST_EVERY == 0]
    train = [i for i in range(num_images) if i % TEST_EVERY != 0]
    if not train:
        raise DataError("split left no training images")
    return train, test


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the camera-center bounding sphere (with slack), for lr scaling."""
    centers = np.stack([c.camera_center() for c in cameras])
    mid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers - mid, axis=1).max())
    return max(radius * 1.1, 1.0)


def frustum_box(cameras: Sequence[Camera], coverage: float = 0.9,
                grid_res: int = 24) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box of points visible from (nearly) all cameras.

    Candidate points on a coarse grid over the union of per-camera view
    volumes are kept when at least ``coverage`` of the cameras see them;
    falls back to the union volume if the intersection is empty.
    """
    pts = []
    for cam in cameras:
        center = cam.camera_center()
        for frac in (0.25, 0.5, 1.0):
            depth = frac * 0.5 * (cam.near + min(cam.far, 4 * np.linalg.norm(cam.t)))
            for sx in (-1.0, 0.0, 1.0):
                for sy in (-1.0, 0.0, 1.0):
                    ray = np.array([sx * cam.tan_fovx, sy * cam.tan_fovy, 1.0])
                    pts.append(center + (cam.R.T @ ray) * depth)
    pts = np.stack(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)

    axes = [np.linspace(lo[k], hi[k], grid_res) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    seen = np.zeros(grid.shape[0])
    for cam in cameras:
        v = grid @ cam.R.T + cam.t
        ok = (v[:, 2] > cam.near) & (v[:, 2] < cam.far)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = v[:, 0] / v[:, 2]
            w = v[:, 1] / v[:, 2]
        ok &= (np.abs(u) < cam.tan_fovx) & (np.abs(w) < cam.tan_fovy)
        seen += ok
    inside = grid[seen >= coverage * len(cameras)]
    if inside.shape[0] < 8:
        return lo, hi
    return inside.min(axis=0), inside.max(axis=0)


def init_cloud(cameras: Sequence[Camera], num_points: int,
               rng: np.random.Generator) -> GaussianCloud:
    """Uniform random cloud inside the frustum-intersection box.

    Isotropic scale is the mean nearest-neighbor distance of the sampled
    positions; colors start mid-gray, opacity at logit(0.1).
    """
    lo, hi = frustum_box(cameras)
    pos = rng.uniform(lo, hi, (num_points, 3))
    from scipy.spatial import cKDTree
    d, _ = cKDTree(pos).query(pos, k=2)
    nn = float(np.mean(d[:, 1]))
    colors = np.full((num_points, 3), 0.5) + rng.uniform(-0.05, 0.05, (num_points, 3))
    q = np.zeros((num_points, 4))
    q[:, 0] = 1.0
    logit = float(np.log(INIT_OPACITY / (1 - INIT_OPACITY)))
    return GaussianCloud(
        positions=pos,
        log_scales=np.full((num_points, 3), np.log(max(nn, 1e-3))),
        rotations=q,
        sh_coeffs=rgb_to_feature(colors)[:, None, :],
        opacity_logits=np.full(num_points, logit),
    )


@dataclass
class TrainResult:
    state: TrainState
    log_rows: List[dict]
    checkpoint_path: Optional[str]
    log_path: Optional[str]


def _write_checkpoint(state: TrainState, path: str):
    data = save_checkpoint(state)
    with _atomic_write(path) as f:
        f.write(data)


def train(dataset: LoadedDataset, cfg: OptimConfig, seed: int = 0,
          out_dir: Optional[str] = None, num_init_points: int = 1000,
          initial_cloud: Optional[GaussianCloud] = None) -> TrainResult:
    """Optimize scene and water parameters against the training split."""
    cfg.validate()
    train_idx, _ = split_dataset(len(dataset.images))
    cams = dataset.cameras
    extent = scene_extent(cams)
    rng = np.random.default_rng(seed)

    cloud = initial_cloud if initial_cloud is not None else \
        init_cloud([cams[i] for i in train_idx], num_init_points, rng)
    medium = MediumParams(
        np.full(3, INIT_MEDIUM_ATTENUATION),
        np.full(3, INIT_MEDIUM_WATER),
        np.full(3, INIT_MEDIUM_BACKSCATTER))
    state = TrainState(cloud, medium)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rows: List[dict] = []
    order: List[int] = []

    for it in range(1, cfg.iterations + 1):
        state.iteration = it
        if not order:
            order = list(train_idx)
            rng.shuffle(order)
        view = order.pop()
        cam, gt = cams[view], dataset.images[view]

        out = render(cloud, cam, medium=medium, mode="underwater",
                     workers=cfg.workers)
        breakdown, dL_dC = total_loss(out.color, gt, medium,
                                      cfg.lambda_ssim, cfg.lambda_guide)
        if not np.isfinite(breakdown.total):
            log.warning("iteration %d: non-finite loss, skipping update", it)
            continue
        buf = backward_render(out, dL_dC, cloud, medium, cfg.lambda_guide,
                              workers=cfg.workers)
        if not buf.all_finite():
            log.warning("iteration %d: non-finite gradients, skipping update", it)
            continue

        state.grad_accum[buf.observed] += buf.mean2d_grad_norm[buf.observed].astype(np.float32)
        state.obs_count[buf.observed] += 1
        apply_gradients(state, buf, cfg, spatial_scale=extent)

        if (cfg.densify_from <= it <= cfg.densify_until
                and it % cfg.densify_interval == 0):
            clones, splits, pruned = densify_and_prune(state, cfg, extent, rng)
            if clones or splits or pruned:
                log.debug("iteration %d: +%d clones +%d splits -%d pruned -> %d",
                          it, clones, splits, pruned, len(cloud))
        if cfg.opacity_reset_interval and it % cfg.opacity_reset_interval == 0:
            reset_opacities(state, cfg)

        if cfg.refit_period and it % cfg.refit_period == 0:
            est = estimate_backscatter(gt, logistic_remap(out.depth))
            if not est.degenerate:
                medium.water_color_guide = est.water_color_est.astype(np.float32)
                medium.backscatter_guide = est.backscatter_est.astype(np.float32)

        rows.append({
            "iter": it, "l1": breakdown.l1, "d_ssim": breakdown.d_ssim,
            "l_bs": breakdown.l_bs, "total": breakdown.total,
            "num_gaussians": len(cloud),
            "attenuation_r": float(medium.attenuation[0]),
            "attenuation_g": float(medium.attenuation[1]),
            "attenuation_b": float(medium.attenuation[2]),
            "water_color_r": float(medium.water_color[0]),
            "water_color_g": float(medium.water_color[1]),
            "water_color_b": float(medium.water_color[2]),
            "backscatter_r": float(medium.backscatter[0]),
            "backscatter_g": float(medium.backscatter[1]),
            "backscatter_b": float(medium.backscatter[2]),
            "lr_position": position_lr(it, cfg, extent),
        })
        if out_dir and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _write_checkpoint(state, os.path.join(out_dir, f"checkpoint_{it:06d}.bin"))

    ckpt_path = log_path = None
    if out_dir:
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        _write_checkpoint(state, ckpt_path)
        log_path = os.path.join(out_dir, "training_log.csv")
        write_log(log_path, rows)
    return TrainResult(state=state, log_rows=rows, checkpoint_path=ckpt_path,
                       log_path=log_path)


def write_log(path: str, rows: List[dict]) -> None:
    with _atomic_write(path) as f:
        text = []
        text.append(",".join(LOG_COLUMNS))
        for row in rows:
            text.append(",".join(repr(row[c]) if isinstance(row[c], float)
                                 else str(row[c]) for c in LOG_COLUMNS))
        f.write(("\n".join(text) + "\n").encode())


def evaluate(state: TrainState, dataset: LoadedDataset,
             indices: Optional[Sequence[int]] = None, workers: int = 1) -> dict:
    """PSNR/SSIM of underwater renders against held-out ground truth."""
    if indices is None:
        _, indices = split_dataset(len(dataset.images))
    per_view = []
    for i in indices:
        if i >= len(dataset.images):
            raise DataError(f"view index {i} out of range")
        out = render(state.cloud, dataset.cameras[i], medium=state.medium,
                     mode="underwater", workers=workers, retain=False)
        img = np.clip(out.color, 0.0, 1.0)
        per_view.append({
            "view": i,
            "psnr": psnr(img, dataset.images[i]),
            "ssim": ssim_value(img, dataset.images[i]),
        })
    return {
        "per_view": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])),
    }


def render_novel(state: TrainState, cameras: Sequence[Camera], out_dir: str,
                 modes: Sequence[str] = ("clean", "underwater"),
                 workers: int = 1) -> List[dict]:
    """Render a camera path; writes PNG + PFM color and PFM depth per pose."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, cam in enumerate(cameras):
        entry = {"pose": i}
        for mode in modes:
            out = render(state.cloud, cam,
                         medium=state.medium if mode == "underwater" else None,
                         mode=mode, workers=workers, retain=False)
            stem = os.path.join(out_dir, f"pose_{i:03d}_{mode}")
            write_png(stem + ".png", out.color)
            write_pfm(stem + ".pfm", out.color)
            write_pfm(stem + "_depth.pfm", logistic_remap(out.depth))
            entry[mode] = stem
        written.append(entry)
    return written
